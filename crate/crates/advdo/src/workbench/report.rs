//! Report files, binary trajectory sidecars, and plot emission.
//!
//! Reports are deterministic JSON keyed by a config hash; dense
//! trajectories go to a compact little-endian sidecar; plots are
//! standalone SVG files with their raw series next to them as TSV.

use crate::error::{Error, Result};
use crate::metrics::{MetricSet, PlanningAware, Similarity};
use crate::vec2::Vec2;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// FNV-1a 64-bit hash of a serializable value's canonical JSON, hex
/// encoded. Identical configurations hash identically across runs.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

/// One scene's persisted evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub benign: MetricSet,
    #[serde(default)]
    pub adversarial: MetricSet,
    #[serde(default)]
    pub pi_benign: PlanningAware,
    #[serde(default)]
    pub pi_adversarial: PlanningAware,
    #[serde(default)]
    pub delta_sensitivity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<Similarity>,
    #[serde(default)]
    pub motion: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction: Option<f64>,
    #[serde(default)]
    pub scene_speed: f64,
    #[serde(default)]
    pub scene_curvature: f64,
    #[serde(default)]
    pub violation: bool,
    #[serde(default)]
    pub max_knot_dev: f64,
    /// Benign and adversarial prediction-error objective values.
    #[serde(default)]
    pub benign_obj: f64,
    #[serde(default)]
    pub adv_obj: f64,
    /// Random-search baseline objective, when the baseline ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_obj: Option<f64>,
    #[serde(default)]
    pub queries: usize,
    /// Adversarial sparse history.
    #[serde(default)]
    pub x_adv: Vec<Vec2>,
}

/// Metric statistics of one speed or curvature bin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinStat {
    pub label: String,
    pub count: usize,
    pub benign_ade: f64,
    pub adversarial_ade: f64,
    pub benign_mr: f64,
    pub adversarial_mr: f64,
}

/// Aggregated campaign report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub scene_count: usize,
    pub failures: usize,
    /// True when some scenes failed and the aggregate covers a subset.
    pub partial: bool,
    pub benign: MetricSet,
    pub adversarial: MetricSet,
    pub pi_benign: PlanningAware,
    pub pi_adversarial: PlanningAware,
    pub violation_rate: f64,
    pub mean_delta_sensitivity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_similarity: Option<Similarity>,
    pub mean_motion: f64,
    pub mean_interaction: f64,
    pub mean_benign_obj: f64,
    pub mean_adv_obj: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_baseline_obj: Option<f64>,
    pub speed_bins: Vec<BinStat>,
    pub curvature_bins: Vec<BinStat>,
    /// Per-scene one-line summaries, sorted by scene id.
    pub scenes: Vec<SceneSummary>,
}

pub const REPORT_FORMAT: &str = "advdo-report/1";

/// One line of the per-scene table embedded in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene_id: String,
    pub ok: bool,
    pub benign_ade: f64,
    pub adversarial_ade: f64,
    pub violation: bool,
}

const TRAJ_MAGIC: &[u8; 4] = b"ADVT";

/// Write a dense trajectory as the binary sidecar format: magic, u32
/// version, u32 point count, then little-endian f64 (x, y) pairs.
pub fn write_traj_bin(path: &Path, positions: &[Vec2]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(TRAJ_MAGIC)?;
    file.write_all(&1u32.to_le_bytes())?;
    file.write_all(&(positions.len() as u32).to_le_bytes())?;
    for p in positions {
        file.write_all(&p.x.to_le_bytes())?;
        file.write_all(&p.y.to_le_bytes())?;
    }
    Ok(())
}

/// Read a sidecar written by [`write_traj_bin`].
pub fn read_traj_bin(path: &Path) -> Result<Vec<Vec2>> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 12 || &data[..4] != TRAJ_MAGIC {
        return Err(Error::Parse {
            file: path.display().to_string(),
            detail: "not a trajectory sidecar".into(),
        });
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != 1 {
        return Err(Error::Parse {
            file: path.display().to_string(),
            detail: format!("unsupported sidecar version {version}"),
        });
    }
    let count = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    if data.len() != 12 + count * 16 {
        return Err(Error::Parse {
            file: path.display().to_string(),
            detail: "sidecar length mismatch".into(),
        });
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let off = 12 + i * 16;
        let x = f64::from_le_bytes(data[off..off + 8].try_into().unwrap());
        let y = f64::from_le_bytes(data[off + 8..off + 16].try_into().unwrap());
        out.push(Vec2::new(x, y));
    }
    Ok(out)
}

/// A named data series for plotting.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Emit a line plot as a standalone SVG plus the raw series as TSV.
pub fn write_plot(path_svg: &Path, title: &str, series: &[Series]) -> Result<()> {
    if let Some(dir) = path_svg.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (w, h, ml, mb, mt, mr) = (640.0, 400.0, 60.0, 40.0, 30.0, 20.0);
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for (x, y) in &s.points {
            xmin = xmin.min(*x);
            xmax = xmax.max(*x);
            ymin = ymin.min(*y);
            ymax = ymax.max(*y);
        }
    }
    if !xmin.is_finite() {
        xmin = 0.0;
        xmax = 1.0;
        ymin = 0.0;
        ymax = 1.0;
    }
    if (xmax - xmin).abs() < 1e-12 {
        xmax = xmin + 1.0;
    }
    if (ymax - ymin).abs() < 1e-12 {
        ymax = ymin + 1.0;
    }
    let sx = |x: f64| ml + (x - xmin) / (xmax - xmin) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - ymin) / (ymax - ymin) * (h - mb - mt);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
        w / 2.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"#333\"/>\n",
        h - mb,
        w - mr,
        h - mb,
        h - mb
    ));
    for (t, val) in [(xmin, ymin), (xmax, ymax)] {
        let _ = (t, val);
    }
    svg.push_str(&format!(
        "<text x=\"{ml}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{:.3}</text>\n",
        h - mb + 14.0,
        xmin
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>\n",
        w - mr,
        h - mb + 14.0,
        xmax
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>\n",
        ml - 4.0,
        h - mb,
        ymin
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{mt}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>\n",
        ml - 4.0,
        ymax
    ));
    for (i, s) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            w - mr - 150.0,
            mt + 14.0 * (i as f64 + 1.0),
            s.name
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path_svg, svg)?;

    let tsv_path = path_svg.with_extension("tsv");
    let mut tsv = String::from("series\tx\ty\n");
    for s in series {
        for (x, y) in &s.points {
            tsv.push_str(&format!("{}\t{x}\t{y}\n", s.name));
        }
    }
    std::fs::write(tsv_path, tsv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traj_sidecar_round_trip() {
        let dir = std::env::temp_dir().join(format!("advdo-bin-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.traj.bin");
        let traj: Vec<Vec2> = (0..17).map(|i| Vec2::new(i as f64 * 0.3, -(i as f64))).collect();
        write_traj_bin(&path, &traj).unwrap();
        let back = read_traj_bin(&path).unwrap();
        assert_eq!(traj, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        #[derive(Serialize)]
        struct C {
            a: f64,
            b: u32,
        }
        let h1 = config_hash(&C { a: 0.3, b: 30 });
        let h2 = config_hash(&C { a: 0.3, b: 30 });
        let h3 = config_hash(&C { a: 0.31, b: 30 });
        assert_eq!(h1, h2);
        assert_ne!(h1, h3);
    }

    #[test]
    fn plot_writes_svg_and_tsv() {
        let dir = std::env::temp_dir().join(format!("advdo-plot-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.svg");
        write_plot(
            &path,
            "demo",
            &[Series {
                name: "a".into(),
                points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, 1.5)],
            }],
        )
        .unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(path.with_extension("tsv").exists());
        std::fs::remove_dir_all(&dir).ok();
    }
}
