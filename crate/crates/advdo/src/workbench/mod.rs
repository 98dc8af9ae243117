//! Scenario and map files, scene synthesis, and campaign configuration.
//!
//! Scenario and map files are human-diffable JSON with an explicit
//! `format` version field; dense trajectories produced by campaigns are
//! persisted as compact binary sidecars next to their JSON records.

pub mod campaign;
pub mod report;

pub use campaign::{run_campaign, run_transfer, CampaignConfig, CampaignOutcome, ModelChoice};
pub use report::{config_hash, EvalReport};

use crate::dynamics::{rollout, ControlAction, ControlSequence, DynState};
use crate::error::{Error, Result};
use crate::planning::{Lane, MapModel, Polygon};
use crate::recon::subsample;
use crate::scene::{AgentTrack, Scene};
use crate::vec2::Vec2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCENARIO_FORMAT: &str = "advdo-scenario/1";
pub const MAP_FORMAT: &str = "advdo-map/1";

/// A set of scenes sharing a sampling interval and a map reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub format: String,
    /// Sampling interval shared by every scene, seconds.
    pub dt: f64,
    /// Map file referenced by the scenes (relative to the scenario file).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<String>,
    pub scenes: Vec<Scene>,
}

impl ScenarioFile {
    pub fn validate(&self) -> Result<()> {
        if self.format != SCENARIO_FORMAT {
            return Err(Error::invalid(format!(
                "unsupported scenario format {:?}",
                self.format
            )));
        }
        if self.scenes.is_empty() {
            return Err(Error::invalid("scenario has no scenes"));
        }
        let mut ids: Vec<&str> = self.scenes.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.scenes.len() {
            return Err(Error::invalid("duplicate scene ids"));
        }
        for scene in &self.scenes {
            if (scene.dt - self.dt).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "scene {} dt {} differs from scenario dt {}",
                    scene.id, scene.dt, self.dt
                )));
            }
            scene.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    format: String,
    drivable: Vec<Polygon>,
    lanes: Vec<Lane>,
}

/// Load and validate a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    })?;
    file.validate().map_err(|e| Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if let Some(map_ref) = &file.map {
        let map_path = path.parent().unwrap_or(Path::new(".")).join(map_ref);
        if !map_path.exists() {
            return Err(Error::Parse {
                file: path.display().to_string(),
                detail: format!("referenced map {map_ref:?} does not exist"),
            });
        }
    }
    Ok(file)
}

/// Persist a scenario file.
pub fn save_scenario(path: &Path, scenario: &ScenarioFile) -> Result<()> {
    scenario.validate()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(scenario)?)?;
    Ok(())
}

/// Load and validate a map file.
pub fn load_map(path: &Path) -> Result<MapModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let file: MapFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if file.format != MAP_FORMAT {
        return Err(Error::Parse {
            file: path.display().to_string(),
            detail: format!("unsupported map format {:?}", file.format),
        });
    }
    let map = MapModel {
        drivable: file.drivable,
        lanes: file.lanes,
    };
    map.validate().map_err(|e| Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(map)
}

/// Persist a map file.
pub fn save_map(path: &Path, map: &MapModel) -> Result<()> {
    map.validate()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = MapFile {
        format: MAP_FORMAT.into(),
        drivable: map.drivable.clone(),
        lanes: map.lanes.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Scene templates supported by the synthesizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneTemplate {
    /// Lane-following traffic on the east-west road.
    Straight,
    /// Constant-curvature arcs.
    Turning,
    /// North-south traffic crossing the ego's road.
    Crossing,
    /// Uniform mixture of the above.
    Mixed,
}

impl std::str::FromStr for SceneTemplate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(SceneTemplate::Straight),
            "turning" => Ok(SceneTemplate::Turning),
            "crossing" => Ok(SceneTemplate::Crossing),
            "mixed" => Ok(SceneTemplate::Mixed),
            other => Err(Error::Config(format!("unknown scene template: {other}"))),
        }
    }
}

/// Synthesis settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub template: SceneTemplate,
    /// Observed steps per agent.
    pub history_len: usize,
    /// Future steps per agent.
    pub future_len: usize,
    /// Sampling interval, seconds.
    pub dt: f64,
    /// Dense substep factor for the generating rollouts.
    pub factor: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            template: SceneTemplate::Mixed,
            history_len: 4,
            future_len: 12,
            dt: 0.5,
            factor: 5,
        }
    }
}

/// The crossroads map shared by synthesized scenarios: an east-west and a
/// north-south road with two lanes each.
pub fn synth_map() -> MapModel {
    let half = 250.0;
    let road_half = 7.0;
    MapModel {
        drivable: vec![
            Polygon::new(vec![
                Vec2::new(-half, -road_half),
                Vec2::new(half, -road_half),
                Vec2::new(half, road_half),
                Vec2::new(-half, road_half),
            ])
            .unwrap(),
            Polygon::new(vec![
                Vec2::new(-road_half, -half),
                Vec2::new(road_half, -half),
                Vec2::new(road_half, half),
                Vec2::new(-road_half, half),
            ])
            .unwrap(),
        ],
        lanes: vec![
            Lane {
                centerline: vec![Vec2::new(-half, -1.75), Vec2::new(half, -1.75)],
                width: 3.5,
            },
            Lane {
                centerline: vec![Vec2::new(half, 1.75), Vec2::new(-half, 1.75)],
                width: 3.5,
            },
            Lane {
                centerline: vec![Vec2::new(-1.75, -half), Vec2::new(-1.75, half)],
                width: 3.5,
            },
            Lane {
                centerline: vec![Vec2::new(1.75, half), Vec2::new(1.75, -half)],
                width: 3.5,
            },
        ],
    }
}

/// Generate one agent track from an in-bound dense bicycle rollout.
fn synth_track(
    rng: &mut ChaCha8Rng,
    start: Vec2,
    heading: f64,
    speed: f64,
    kappa: f64,
    steps: usize,
    dt: f64,
    factor: usize,
) -> Vec<Vec2> {
    let dt_dense = dt / factor as f64;
    let s0 = DynState::new(start, heading, speed).unwrap();
    let n_dense = factor * (steps - 1);
    let mut k = kappa;
    let mut a: f64 = 0.0;
    let mut v = speed;
    let mut actions = Vec::with_capacity(n_dense);
    for _ in 0..n_dense {
        a = 0.9 * a + rng.random_range(-0.15..0.15);
        let accel = a.clamp(-1.0, 1.0).clamp((1.5 - v) / dt_dense, (20.0 - v) / dt_dense);
        k = 0.98 * k + 0.02 * kappa + rng.random_range(-0.002..0.002);
        let kmax = (0.5 / v.max(1.0)).min(0.12);
        actions.push(ControlAction::new(accel, k.clamp(-kmax, kmax)));
        v += accel * dt_dense;
    }
    let controls = ControlSequence::new(dt_dense, actions).unwrap();
    let states = rollout(&s0, &controls).unwrap();
    let dense: Vec<Vec2> = states.iter().map(|s| s.position).collect();
    subsample(&dense, factor)
}

/// Synthesize a deterministic scenario of `count` scenes.
///
/// Agent tracks are in-bound bicycle rollouts following the template:
/// lane-following, constant-curvature turning, or crossing traffic.
/// Ground-truth futures are the continued rollouts.
pub fn synthesize_scenes(spec: &SynthSpec, count: usize, seed: u64) -> Result<ScenarioFile> {
    if count == 0 {
        return Err(Error::invalid("scene count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = spec.history_len + spec.future_len;
    let h = spec.history_len;
    let mut scenes = Vec::with_capacity(count);
    for idx in 0..count {
        let template = match spec.template {
            SceneTemplate::Mixed => match idx % 3 {
                0 => SceneTemplate::Straight,
                1 => SceneTemplate::Turning,
                _ => SceneTemplate::Crossing,
            },
            t => t,
        };
        let n_agents = rng.random_range(3..6usize);
        let mut agents = Vec::with_capacity(n_agents);
        // Ego drives east in the right lane.
        let ego_speed = rng.random_range(5.0..9.0);
        let ego_x = rng.random_range(-60.0..-30.0);
        let ego = synth_track(&mut rng, Vec2::new(ego_x, -1.75), 0.0, ego_speed, 0.0, steps, spec.dt, spec.factor);
        agents.push(("ego".to_string(), ego));
        for a in 1..n_agents {
            let speed = rng.random_range(4.0..9.0);
            let track = match template {
                SceneTemplate::Straight => {
                    // Same road, either direction, staggered along x.
                    let westbound = rng.random_range(0.0..1.0) < 0.4;
                    let (y, heading) = if westbound { (1.75, std::f64::consts::PI) } else { (-1.75, 0.0) };
                    let x = rng.random_range(-70.0..40.0);
                    synth_track(&mut rng, Vec2::new(x, y), heading, speed, 0.0, steps, spec.dt, spec.factor)
                }
                SceneTemplate::Turning => {
                    let kappa = rng.random_range(0.02..0.07) * if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { -1.0 };
                    let x = rng.random_range(-70.0..30.0);
                    let y = rng.random_range(-3.0..3.0);
                    let heading = rng.random_range(-0.4..0.4);
                    synth_track(&mut rng, Vec2::new(x, y), heading, speed, kappa, steps, spec.dt, spec.factor)
                }
                SceneTemplate::Crossing => {
                    // North- or southbound through the junction.
                    let northbound = rng.random_range(0.0..1.0) < 0.5;
                    let (x, heading) = if northbound {
                        (-1.75, std::f64::consts::FRAC_PI_2)
                    } else {
                        (1.75, -std::f64::consts::FRAC_PI_2)
                    };
                    let y = if northbound {
                        rng.random_range(-60.0..-20.0)
                    } else {
                        rng.random_range(20.0..60.0)
                    };
                    synth_track(&mut rng, Vec2::new(x, y), heading, speed, 0.0, steps, spec.dt, spec.factor)
                }
                SceneTemplate::Mixed => unreachable!(),
            };
            agents.push((format!("agent{a}"), track));
        }
        let tracks: Vec<AgentTrack> = agents
            .into_iter()
            .map(|(id, track)| AgentTrack {
                id,
                history: track[..h].to_vec(),
                future: track[h..].to_vec(),
                footprint: None,
            })
            .collect();
        scenes.push(Scene {
            id: format!("scene-{idx:04}"),
            dt: spec.dt,
            agents: tracks,
            adv: 1,
            ego: 0,
            map_ref: None,
        });
    }
    let file = ScenarioFile {
        format: SCENARIO_FORMAT.into(),
        dt: spec.dt,
        map: None,
        scenes,
    };
    file.validate()?;
    Ok(file)
}

/// Simulation fixture set: scenarios whose benign closed-loop episodes
/// are incident-free for both planners while the crossing or slowing
/// adversarial agent sits exactly on the ego's time-space path, so a
/// successfully misled predictor has consequences.
///
/// Scenes carry one extra observed step (the sequential attack anchors
/// one step before its oldest prediction window) and 18 future steps
/// (enough replay for a 6 s episode plus the prediction horizon).
pub fn synthesize_sim_fixtures(count: usize, seed: u64) -> Result<ScenarioFile> {
    if count == 0 {
        return Err(Error::invalid("fixture count must be >= 1"));
    }
    let dt = 0.5;
    let h = 5;
    let future = 18;
    let steps = h + future;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Constant-velocity line sampled backward from time 0 at `start`.
    let line = |start: Vec2, dir: Vec2, speed: f64| -> Vec<Vec2> {
        (0..steps)
            .map(|i| start + dir * (speed * dt * (i as f64 - (h - 1) as f64)))
            .collect()
    };
    let mut scenes = Vec::with_capacity(count);
    for idx in 0..count {
        let v_e = rng.random_range(6.5..8.0);
        let crossing = idx % 3 != 0;
        let mut tracks: Vec<(String, Vec<Vec2>)> = Vec::new();
        if crossing {
            // The adversarial agent approaches head-on in the opposite
            // lane and passes harmlessly: the benign episode needs no
            // braking. An attacked history bends its predicted path, and
            // a bend toward the ego lane is a closing-speed phantom right
            // on the ego's arrival times. The same-speed follower close
            // behind turns the phantom yield into a rear-end.
            let ego_x0 = rng.random_range(-40.0..-25.0);
            let v_a = rng.random_range(5.0..6.5);
            let ahead = rng.random_range(26.0..36.0);
            tracks.push((
                "ego".into(),
                line(Vec2::new(ego_x0, -1.75), Vec2::new(1.0, 0.0), v_e),
            ));
            tracks.push((
                "adv".into(),
                line(Vec2::new(ego_x0 + ahead, 1.75), Vec2::new(-1.0, 0.0), v_a),
            ));
            let gap = rng.random_range(10.0..12.5);
            tracks.push((
                "follower".into(),
                line(Vec2::new(ego_x0 - gap, -1.75), Vec2::new(1.0, 0.0), v_e),
            ));
        } else {
            // Slow crawler in the ego lane ahead.
            let gap = rng.random_range(22.0..28.0);
            let ego_x0 = rng.random_range(-45.0..-30.0);
            let crawl = rng.random_range(0.8..1.4);
            tracks.push((
                "ego".into(),
                line(Vec2::new(ego_x0, -1.75), Vec2::new(1.0, 0.0), v_e),
            ));
            tracks.push((
                "adv".into(),
                line(Vec2::new(ego_x0 + gap, -1.75), Vec2::new(1.0, 0.0), crawl),
            ));
        }
        // Background traffic that never conflicts: an oncoming car in the
        // opposite lane.
        let ego_x0 = tracks[0].1[h - 1].x;
        tracks.push((
            "oncoming".into(),
            line(
                Vec2::new(ego_x0 + rng.random_range(45.0..60.0), 1.75),
                Vec2::new(-1.0, 0.0),
                rng.random_range(5.0..7.0),
            ),
        ));
        let agents: Vec<AgentTrack> = tracks
            .into_iter()
            .map(|(id, track)| AgentTrack {
                id,
                history: track[..h].to_vec(),
                future: track[h..].to_vec(),
                footprint: None,
            })
            .collect();
        scenes.push(Scene {
            id: format!("sim-{idx:02}"),
            dt,
            agents,
            adv: 1,
            ego: 0,
            map_ref: None,
        });
    }
    let file = ScenarioFile {
        format: SCENARIO_FORMAT.into(),
        dt,
        map: None,
        scenes,
    };
    file.validate()?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{inverse, DynamicBounds, DynParams};

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec::default();
        let a = synthesize_scenes(&spec, 5, 7).unwrap();
        let b = synthesize_scenes(&spec, 5, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn straight_template_has_zero_curvature() {
        let spec = SynthSpec {
            template: SceneTemplate::Straight,
            ..SynthSpec::default()
        };
        let file = synthesize_scenes(&spec, 3, 11).unwrap();
        for scene in &file.scenes {
            let (_, kappa) = crate::metrics::scene_stats(scene).unwrap();
            assert!(kappa < 0.02, "scene {} curvature {kappa}", scene.id);
        }
    }

    #[test]
    fn synthesized_scenes_pass_invariants_with_zero_violations() {
        let spec = SynthSpec::default();
        let file = synthesize_scenes(&spec, 100, 3).unwrap();
        let bounds = DynamicBounds::default();
        for scene in &file.scenes {
            scene.validate().unwrap();
            for agent in &scene.agents {
                let params = inverse(&agent.history, scene.dt).unwrap();
                let p = DynParams {
                    slow_steps: vec![],
                    ..params
                };
                assert!(
                    !p.violates(&bounds),
                    "scene {} agent {} violates bounds",
                    scene.id,
                    agent.id
                );
            }
        }
    }

    #[test]
    fn scenario_save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("advdo-scn-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let spec = SynthSpec::default();
        let file = synthesize_scenes(&spec, 3, 5).unwrap();
        let path = dir.join("s.json");
        save_scenario(&path, &file).unwrap();
        let loaded = load_scenario(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&file).unwrap(),
            serde_json::to_string(&loaded).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_rejects_invalid_history() {
        let dir = std::env::temp_dir().join(format!("advdo-badscn-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let spec = SynthSpec::default();
        let mut file = synthesize_scenes(&spec, 1, 5).unwrap();
        for a in file.scenes[0].agents.iter_mut() {
            a.history.truncate(1);
        }
        let path = dir.join("bad.json");
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let err = load_scenario(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("history length"), "unhelpful error: {msg}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_rejects_dangling_map_reference() {
        let dir = std::env::temp_dir().join(format!("advdo-dangle-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let spec = SynthSpec::default();
        let mut file = synthesize_scenes(&spec, 1, 5).unwrap();
        file.map = Some("missing-map.json".into());
        let path = dir.join("s.json");
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(load_scenario(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn map_save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("advdo-map-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let map = synth_map();
        let path = dir.join("m.json");
        save_map(&path, &map).unwrap();
        let loaded = load_map(&path).unwrap();
        assert_eq!(map.drivable.len(), loaded.drivable.len());
        assert_eq!(map.lanes.len(), loaded.lanes.len());
        std::fs::remove_dir_all(&dir).ok();
    }
}
