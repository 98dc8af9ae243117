//! Campaign orchestration: fan scenes out to a worker pool, persist
//! per-scene records, aggregate deterministically, and emit reports.

use super::report::{
    config_hash, write_plot, write_traj_bin, BinStat, EvalReport, SceneRecord, SceneSummary,
    Series, REPORT_FORMAT,
};
use super::{load_map, load_scenario, synth_map, ScenarioFile};
use crate::attack::{attack_single, random_search_attack, AttackConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregated_sensitivity, displacement_errors, miss_flags, motion_interaction_split,
    offroad_flags, planning_aware, scene_stats, sensitivity, trajectory_similarity, MetricSet,
    MetricsConfig, PlanningAware, Similarity,
};
use crate::planning::MapModel;
use crate::predict::{
    load_model, BridgeConfig, BridgeModel, Prediction, PredictionModel, SurrogateKind,
    SurrogateSpec,
};
use crate::recon::{reconstruct_at, ReconConfig};
use crate::scene::Scene;
use crate::vec2::Vec2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// How the campaign's predictor is obtained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ModelChoice {
    /// One of the built-in surrogates with default construction.
    Builtin(SurrogateKind),
    /// A model file written by `save_model` (or the `train` subcommand).
    File(PathBuf),
    /// An external predictor over the line-delimited JSON bridge.
    Bridge {
        cmd: Vec<String>,
        history_len: usize,
        horizon: usize,
        grad_supported: bool,
    },
}

impl ModelChoice {
    /// Instantiate the predictor. Built-ins default to H=4, T=12.
    pub fn build(&self) -> Result<Box<dyn PredictionModel>> {
        match self {
            ModelChoice::Builtin(kind) => {
                let spec = match kind {
                    SurrogateKind::SocialMlp => SurrogateSpec::social_mlp(4, 12, 0),
                    SurrogateKind::ConstantVelocity => SurrogateSpec::constant_velocity(4, 12),
                    SurrogateKind::KinematicExtrapolation => SurrogateSpec::kinematic(4, 12),
                    SurrogateKind::Oracle => SurrogateSpec {
                        kind: SurrogateKind::Oracle,
                        ..SurrogateSpec::constant_velocity(4, 12)
                    },
                };
                Ok(spec.build())
            }
            ModelChoice::File(path) => load_model(path),
            ModelChoice::Bridge {
                cmd,
                history_len,
                horizon,
                grad_supported,
            } => {
                let mut cfg = BridgeConfig::new(cmd.clone(), *history_len, *horizon);
                cfg.grad_supported = *grad_supported;
                Ok(Box::new(BridgeModel::spawn(cfg)?))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ModelChoice::Builtin(kind) => format!("{kind:?}"),
            ModelChoice::File(path) => path.display().to_string(),
            ModelChoice::Bridge { cmd, .. } => format!("bridge:{}", cmd.join(" ")),
        }
    }
}

/// Full campaign configuration.
#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub scenario: PathBuf,
    /// Explicit map override; otherwise the scenario's referenced map, or
    /// the built-in crossroads map.
    pub map: Option<PathBuf>,
    pub model: ModelChoice,
    pub attack: AttackConfig,
    pub recon: ReconConfig,
    pub metrics: MetricsConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
    /// Also run the random-search baseline per scene.
    pub baseline: bool,
}

impl CampaignConfig {
    fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashable<'a> {
            attack: &'a AttackConfig,
            recon: &'a ReconConfig,
            metrics: &'a MetricsConfig,
            seed: u64,
            model: String,
            baseline: bool,
        }
        config_hash(&Hashable {
            attack: &self.attack,
            recon: &self.recon,
            metrics: &self.metrics,
            seed: self.seed,
            model: self.model.describe(),
            baseline: self.baseline,
        })
    }
}

/// What a finished campaign returns.
pub struct CampaignOutcome {
    pub report: EvalReport,
    pub report_path: PathBuf,
    pub failures: usize,
}

/// Indices of the agents whose predictions are scored: everyone but the
/// ego vehicle.
fn scored_agents(scene: &Scene) -> Vec<usize> {
    (0..scene.n_agents()).filter(|i| *i != scene.ego).collect()
}

fn select_rows<T: Clone>(rows: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|i| rows[*i].clone()).collect()
}

/// Restrict a prediction to a subset of agents.
fn select_pred(pred: &Prediction, idx: &[usize]) -> Prediction {
    Prediction {
        modes: pred
            .modes
            .iter()
            .map(|mode| idx.iter().map(|i| mode[*i].clone()).collect())
            .collect(),
        probs: pred.probs.clone(),
    }
}

/// The four metrics of one prediction over the scored agents, plus the
/// planning-aware variant.
fn eval_prediction(
    scene: &Scene,
    pred: &Prediction,
    map: &MapModel,
    metrics: &MetricsConfig,
) -> Result<(MetricSet, PlanningAware)> {
    let idx = scored_agents(scene);
    let futures = select_rows(&scene.futures(), &idx);
    let sub = select_pred(pred, &idx);
    let errors = displacement_errors(&sub, &futures)?;
    let missed = miss_flags(&sub, &futures, metrics.miss_threshold)?;
    let offroad = offroad_flags(&sub, map)?;
    let set = MetricSet {
        ade: errors.iter().map(|e| e.0).sum::<f64>() / errors.len() as f64,
        fde: errors.iter().map(|e| e.1).sum::<f64>() / errors.len() as f64,
        mr: missed.iter().filter(|m| **m).count() as f64 / missed.len() as f64,
        orr: offroad.iter().filter(|m| **m).count() as f64 / offroad.len() as f64,
    };
    // Planning-aware weights: sensitivity of each scored agent's logged
    // future to the ego's logged future, identical for the benign and
    // adversarial evaluations of a scene.
    let ego_future = &scene.agents[scene.ego].future;
    let weights: Vec<f64> = idx
        .iter()
        .map(|i| sensitivity(&scene.agents[*i].future, ego_future))
        .collect();
    let pa = planning_aware(&errors, &missed, &offroad, &weights)?;
    Ok((set, pa))
}

/// Evaluate one scene end-to-end: reconstruct, attack, and measure.
fn evaluate_scene(
    scene: &Scene,
    model: &dyn PredictionModel,
    map: &MapModel,
    cfg: &CampaignConfig,
    hash: &str,
) -> Result<(SceneRecord, Vec<Vec2>)> {
    let idx = scored_agents(scene);
    let benign_pred = model.predict(scene)?;
    let (benign, pi_benign) = eval_prediction(scene, &benign_pred, map, &cfg.metrics)?;
    let futures = select_rows(&scene.futures(), &idx);
    let benign_obj = crate::attack::l_obj(
        &futures,
        &select_pred(&benign_pred, &idx),
        cfg.attack.mode_rule,
    )?
    .0;

    let result = attack_single(scene, model, &cfg.attack, &cfg.recon)?;
    let adv_scene = scene.with_adv_history(result.x_adv.clone());
    let adv_pred = model.predict(&adv_scene)?;
    let (adversarial, pi_adversarial) = eval_prediction(&adv_scene, &adv_pred, map, &cfg.metrics)?;
    let adv_obj =
        crate::attack::l_obj(&futures, &select_pred(&adv_pred, &idx), cfg.attack.mode_rule)?.0;

    let baseline_obj = if cfg.baseline {
        let baseline = random_search_attack(scene, model, &cfg.attack, &cfg.recon)?;
        Some(baseline.best.l_obj)
    } else {
        None
    };

    // Fidelity of the adversarial history against the reconstruction.
    let rec = reconstruct_at(&scene.agents[scene.adv].history, scene.dt, &cfg.recon)?;
    let similarity = trajectory_similarity(&rec.dense.positions, &result.dense_positions)?;
    let others: Vec<Vec<Vec2>> = scene
        .agents
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != scene.adv)
        .map(|(_, a)| a.history.clone())
        .collect();
    let rho = cfg.metrics.sensitivity_radius;
    let delta_sensitivity = aggregated_sensitivity(&result.x_adv, &others, rho)
        - aggregated_sensitivity(&scene.agents[scene.adv].history, &others, rho);
    let (motion, interaction) =
        motion_interaction_split(scene.adv, &benign_pred, &adv_pred)?;
    let (scene_speed, scene_curvature) = scene_stats(scene)?;

    let record = SceneRecord {
        scene_id: scene.id.clone(),
        config_hash: hash.to_string(),
        seed: cfg.seed,
        ok: true,
        error: None,
        benign,
        adversarial,
        pi_benign,
        pi_adversarial,
        delta_sensitivity,
        similarity: Some(similarity),
        motion,
        interaction,
        scene_speed,
        scene_curvature,
        violation: result.violation,
        max_knot_dev: result.max_knot_dev,
        benign_obj,
        adv_obj,
        baseline_obj,
        queries: result.queries,
        x_adv: result.x_adv.clone(),
    };
    Ok((record, result.dense_positions))
}

/// The map a campaign uses: explicit override, the scenario's reference,
/// or the built-in crossroads.
fn resolve_map(cfg: &CampaignConfig, scenario: &ScenarioFile) -> Result<MapModel> {
    if let Some(path) = &cfg.map {
        return load_map(path);
    }
    if let Some(map_ref) = &scenario.map {
        let path = cfg
            .scenario
            .parent()
            .unwrap_or(Path::new("."))
            .join(map_ref);
        return load_map(&path);
    }
    Ok(synth_map())
}

fn scene_record_path(out_dir: &Path, scene_id: &str) -> PathBuf {
    out_dir.join("scenes").join(format!("{scene_id}.json"))
}

fn try_resume(path: &Path, hash: &str) -> Option<SceneRecord> {
    let text = std::fs::read_to_string(path).ok()?;
    let record: SceneRecord = serde_json::from_str(&text).ok()?;
    (record.config_hash == hash).then_some(record)
}

/// Run the full campaign: reconstruct, attack, and evaluate every scene,
/// persisting per-scene records (resumable) and an aggregate report with
/// plots. Per-scene failures are recorded and skipped; the aggregate is
/// marked partial.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignOutcome> {
    cfg.attack.validate()?;
    cfg.recon.validate()?;
    let scenario = load_scenario(&cfg.scenario)?;
    let map = resolve_map(cfg, &scenario)?;
    let model = cfg.model.build()?;
    let hash = cfg.hash();
    std::fs::create_dir_all(cfg.out_dir.join("scenes"))?;

    let mut scenes: Vec<&Scene> = scenario.scenes.iter().collect();
    scenes.sort_by(|a, b| a.id.cmp(&b.id));

    let workers = if cfg.workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cfg.workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let records: Vec<SceneRecord> = pool.install(|| {
        scenes
            .par_iter()
            .map(|scene| {
                let path = scene_record_path(&cfg.out_dir, &scene.id);
                if let Some(record) = try_resume(&path, &hash) {
                    return record;
                }
                let record = match evaluate_scene(scene, model.as_ref(), &map, cfg, &hash) {
                    Ok((record, dense)) => {
                        let bin = cfg
                            .out_dir
                            .join("scenes")
                            .join(format!("{}.traj.bin", scene.id));
                        if let Err(e) = write_traj_bin(&bin, &dense) {
                            eprintln!("warning: sidecar write failed for {}: {e}", scene.id);
                        }
                        record
                    }
                    Err(e) => SceneRecord {
                        scene_id: scene.id.clone(),
                        config_hash: hash.clone(),
                        seed: cfg.seed,
                        ok: false,
                        error: Some(e.to_string()),
                        benign: MetricSet::default(),
                        adversarial: MetricSet::default(),
                        pi_benign: PlanningAware::default(),
                        pi_adversarial: PlanningAware::default(),
                        delta_sensitivity: 0.0,
                        similarity: None,
                        motion: 0.0,
                        interaction: None,
                        scene_speed: 0.0,
                        scene_curvature: 0.0,
                        violation: false,
                        max_knot_dev: 0.0,
                        benign_obj: 0.0,
                        adv_obj: 0.0,
                        baseline_obj: None,
                        queries: 0,
                        x_adv: Vec::new(),
                    },
                };
                if let Ok(json) = serde_json::to_string_pretty(&record) {
                    if let Err(e) = std::fs::write(&path, json) {
                        eprintln!("warning: record write failed for {}: {e}", scene.id);
                    }
                }
                record
            })
            .collect()
    });

    let report = aggregate(&records, &hash, cfg.seed, &cfg.model.describe());
    let report_path = cfg.out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    emit_plots(&cfg.out_dir, &records)?;
    let failures = report.failures;
    Ok(CampaignOutcome {
        report,
        report_path,
        failures,
    })
}

/// Aggregate per-scene records into the campaign report. Records arrive
/// sorted by scene id; all means are over the successful scenes.
pub fn aggregate(records: &[SceneRecord], hash: &str, seed: u64, model: &str) -> EvalReport {
    let ok: Vec<&SceneRecord> = records.iter().filter(|r| r.ok).collect();
    let n = ok.len().max(1) as f64;
    let mean_set = |f: &dyn Fn(&SceneRecord) -> MetricSet| -> MetricSet {
        let mut acc = MetricSet::default();
        for r in &ok {
            let m = f(r);
            acc.ade += m.ade;
            acc.fde += m.fde;
            acc.mr += m.mr;
            acc.orr += m.orr;
        }
        MetricSet {
            ade: acc.ade / n,
            fde: acc.fde / n,
            mr: acc.mr / n,
            orr: acc.orr / n,
        }
    };
    let mean_pa = |f: &dyn Fn(&SceneRecord) -> PlanningAware| -> PlanningAware {
        let mut acc = PlanningAware::default();
        for r in &ok {
            let m = f(r);
            acc.pi_ade += m.pi_ade;
            acc.pi_fde += m.pi_fde;
            acc.pi_mr += m.pi_mr;
            acc.pi_orr += m.pi_orr;
            acc.uniform_fallback |= m.uniform_fallback;
        }
        PlanningAware {
            pi_ade: acc.pi_ade / n,
            pi_fde: acc.pi_fde / n,
            pi_mr: acc.pi_mr / n,
            pi_orr: acc.pi_orr / n,
            uniform_fallback: acc.uniform_fallback,
        }
    };
    let mean_of = |f: &dyn Fn(&SceneRecord) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / n;

    let mean_similarity = if ok.iter().all(|r| r.similarity.is_some()) && !ok.is_empty() {
        Some(Similarity {
            dtw: mean_of(&|r| r.similarity.unwrap().dtw),
            frechet: mean_of(&|r| r.similarity.unwrap().frechet),
            pcm: mean_of(&|r| r.similarity.unwrap().pcm),
            area: mean_of(&|r| r.similarity.unwrap().area),
            curve_length: mean_of(&|r| r.similarity.unwrap().curve_length),
        })
    } else {
        None
    };
    let baselines: Vec<f64> = ok.iter().filter_map(|r| r.baseline_obj).collect();
    let mean_baseline_obj = if baselines.is_empty() {
        None
    } else {
        Some(baselines.iter().sum::<f64>() / baselines.len() as f64)
    };

    let speed_bins = bin_stats(&ok, &|r| r.scene_speed, &[4.0, 7.0], "m/s");
    let curvature_bins = bin_stats(&ok, &|r| r.scene_curvature, &[0.02, 0.06], "1/m");

    let failures = records.len() - ok.len();
    EvalReport {
        format: REPORT_FORMAT.into(),
        config_hash: hash.to_string(),
        seed,
        model: model.to_string(),
        scene_count: records.len(),
        failures,
        partial: failures > 0,
        benign: mean_set(&|r| r.benign),
        adversarial: mean_set(&|r| r.adversarial),
        pi_benign: mean_pa(&|r| r.pi_benign),
        pi_adversarial: mean_pa(&|r| r.pi_adversarial),
        violation_rate: ok.iter().filter(|r| r.violation).count() as f64 / n,
        mean_delta_sensitivity: mean_of(&|r| r.delta_sensitivity),
        mean_similarity,
        mean_motion: mean_of(&|r| r.motion),
        mean_interaction: {
            let vals: Vec<f64> = ok.iter().filter_map(|r| r.interaction).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        },
        mean_benign_obj: mean_of(&|r| r.benign_obj),
        mean_adv_obj: mean_of(&|r| r.adv_obj),
        mean_baseline_obj,
        speed_bins,
        curvature_bins,
        scenes: records
            .iter()
            .map(|r| SceneSummary {
                scene_id: r.scene_id.clone(),
                ok: r.ok,
                benign_ade: r.benign.ade,
                adversarial_ade: r.adversarial.ade,
                violation: r.violation,
            })
            .collect(),
    }
}

fn bin_stats(
    ok: &[&SceneRecord],
    key: &dyn Fn(&SceneRecord) -> f64,
    edges: &[f64],
    unit: &str,
) -> Vec<BinStat> {
    let mut bins: Vec<(String, Vec<&SceneRecord>)> = Vec::new();
    for i in 0..=edges.len() {
        let label = match (i == 0, i == edges.len()) {
            (true, _) => format!("<{} {unit}", edges[0]),
            (_, true) => format!(">={} {unit}", edges[edges.len() - 1]),
            _ => format!("{}..{} {unit}", edges[i - 1], edges[i]),
        };
        bins.push((label, Vec::new()));
    }
    for r in ok {
        let v = key(r);
        let mut slot = edges.len();
        for (i, e) in edges.iter().enumerate() {
            if v < *e {
                slot = i;
                break;
            }
        }
        bins[slot].1.push(r);
    }
    bins.into_iter()
        .map(|(label, rs)| {
            let n = rs.len().max(1) as f64;
            BinStat {
                label,
                count: rs.len(),
                benign_ade: rs.iter().map(|r| r.benign.ade).sum::<f64>() / n,
                adversarial_ade: rs.iter().map(|r| r.adversarial.ade).sum::<f64>() / n,
                benign_mr: rs.iter().map(|r| r.benign.mr).sum::<f64>() / n,
                adversarial_mr: rs.iter().map(|r| r.adversarial.mr).sum::<f64>() / n,
            }
        })
        .collect()
}

fn emit_plots(out_dir: &Path, records: &[SceneRecord]) -> Result<()> {
    let ok: Vec<&SceneRecord> = records.iter().filter(|r| r.ok).collect();
    let plots = out_dir.join("plots");
    let benign: Vec<(f64, f64)> = ok
        .iter()
        .enumerate()
        .map(|(i, r)| (i as f64, r.benign.ade))
        .collect();
    let adv: Vec<(f64, f64)> = ok
        .iter()
        .enumerate()
        .map(|(i, r)| (i as f64, r.adversarial.ade))
        .collect();
    write_plot(
        &plots.join("ade_per_scene.svg"),
        "ADE per scene (benign vs adversarial)",
        &[
            Series {
                name: "benign".into(),
                points: benign,
            },
            Series {
                name: "adversarial".into(),
                points: adv,
            },
        ],
    )?;
    // Miss rate against scene speed and curvature.
    let mut by_speed: Vec<(f64, f64, f64)> = ok
        .iter()
        .map(|r| (r.scene_speed, r.benign.mr, r.adversarial.mr))
        .collect();
    by_speed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    write_plot(
        &plots.join("mr_vs_speed.svg"),
        "Miss rate vs scene speed",
        &[
            Series {
                name: "benign".into(),
                points: by_speed.iter().map(|(s, b, _)| (*s, *b)).collect(),
            },
            Series {
                name: "adversarial".into(),
                points: by_speed.iter().map(|(s, _, a)| (*s, *a)).collect(),
            },
        ],
    )?;
    let mut by_curv: Vec<(f64, f64, f64)> = ok
        .iter()
        .map(|r| (r.scene_curvature, r.benign.mr, r.adversarial.mr))
        .collect();
    by_curv.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    write_plot(
        &plots.join("mr_vs_curvature.svg"),
        "Miss rate vs scene curvature",
        &[
            Series {
                name: "benign".into(),
                points: by_curv.iter().map(|(s, b, _)| (*s, *b)).collect(),
            },
            Series {
                name: "adversarial".into(),
                points: by_curv.iter().map(|(s, _, a)| (*s, *a)).collect(),
            },
        ],
    )?;
    Ok(())
}

/// Transfer matrix entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferCell {
    pub source: String,
    pub target: String,
    /// Transfer rate, or the reason it is undefined.
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub undefined: Option<String>,
}

/// Transfer campaign output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub models: Vec<String>,
    /// Cells in row-major (target-major) order: cell (i, j) holds
    /// adversarial trajectories generated against model j evaluated on
    /// model i.
    pub cells: Vec<TransferCell>,
}

/// Cross-model transferability: attack each scene against every source
/// model, evaluate every target model on the attacked scenes, and report
/// the transfer-rate matrix.
pub fn run_transfer(
    cfg: &CampaignConfig,
    models: &[ModelChoice],
) -> Result<(TransferReport, PathBuf)> {
    if models.len() < 2 {
        return Err(Error::Config("transfer needs at least two models".into()));
    }
    let scenario = load_scenario(&cfg.scenario)?;
    let map = resolve_map(cfg, &scenario)?;
    let built: Vec<Box<dyn PredictionModel>> =
        models.iter().map(|m| m.build()).collect::<Result<_>>()?;
    let mut scenes: Vec<&Scene> = scenario.scenes.iter().collect();
    scenes.sort_by(|a, b| a.id.cmp(&b.id));

    // benign[i] and attacked[j][i]: metrics of model i on benign scenes
    // and on scenes attacked against model j.
    let mut benign = vec![MetricSet::default(); models.len()];
    let mut attacked = vec![vec![MetricSet::default(); models.len()]; models.len()];
    let mut count = 0usize;
    for scene in &scenes {
        let mut adv_scenes = Vec::with_capacity(models.len());
        for model in &built {
            let result = attack_single(scene, model.as_ref(), &cfg.attack, &cfg.recon)?;
            adv_scenes.push(scene.with_adv_history(result.x_adv));
        }
        for (i, model) in built.iter().enumerate() {
            let pred = model.predict(scene)?;
            let (set, _) = eval_prediction(scene, &pred, &map, &cfg.metrics)?;
            add_metrics(&mut benign[i], &set);
            for (j, adv_scene) in adv_scenes.iter().enumerate() {
                let pred = model.predict(adv_scene)?;
                let (set, _) = eval_prediction(adv_scene, &pred, &map, &cfg.metrics)?;
                add_metrics(&mut attacked[j][i], &set);
            }
        }
        count += 1;
    }
    let scale = 1.0 / count.max(1) as f64;
    for set in benign.iter_mut() {
        scale_metrics(set, scale);
    }
    for row in attacked.iter_mut() {
        for set in row.iter_mut() {
            scale_metrics(set, scale);
        }
    }

    let names: Vec<String> = models.iter().map(|m| m.describe()).collect();
    let mut cells = Vec::new();
    for i in 0..models.len() {
        for j in 0..models.len() {
            let cell = match crate::metrics::transfer_rate(
                &benign[j],
                &attacked[j][j],
                &benign[i],
                &attacked[j][i],
            ) {
                Ok(rate) => TransferCell {
                    source: names[j].clone(),
                    target: names[i].clone(),
                    rate: Some(rate),
                    undefined: None,
                },
                Err(e) => TransferCell {
                    source: names[j].clone(),
                    target: names[i].clone(),
                    rate: None,
                    undefined: Some(e.to_string()),
                },
            };
            cells.push(cell);
        }
    }
    let report = TransferReport {
        format: "advdo-transfer/1".into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        models: names,
        cells,
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("transfer.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    // Raw matrix as TSV alongside.
    let mut tsv = String::from("target\\source");
    for name in &report.models {
        tsv.push('\t');
        tsv.push_str(name);
    }
    tsv.push('\n');
    for i in 0..report.models.len() {
        tsv.push_str(&report.models[i]);
        for j in 0..report.models.len() {
            let cell = &report.cells[i * report.models.len() + j];
            tsv.push('\t');
            match cell.rate {
                Some(r) => tsv.push_str(&format!("{r:.4}")),
                None => tsv.push_str("n/a"),
            }
        }
        tsv.push('\n');
    }
    std::fs::write(cfg.out_dir.join("transfer.tsv"), tsv)?;
    Ok((report, path))
}

fn add_metrics(acc: &mut MetricSet, m: &MetricSet) {
    acc.ade += m.ade;
    acc.fde += m.fde;
    acc.mr += m.mr;
    acc.orr += m.orr;
}

fn scale_metrics(m: &mut MetricSet, s: f64) {
    m.ade *= s;
    m.fde *= s;
    m.mr *= s;
    m.orr *= s;
}
