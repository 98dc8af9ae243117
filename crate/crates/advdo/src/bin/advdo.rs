//! Command-line workbench driver.

use advdo::attack::{
    attack_sequential, attack_single, generate_augmentation, AttackConfig, AttackVariant, ModeRule,
};
use advdo::error::Error;
use advdo::planning::{PlannerKind, SimConfig, SimMode};
use advdo::predict::{save_model, train_surrogate, SurrogateKind, SurrogateSpec};
use advdo::recon::{reconstruct_at, ReconConfig};
use advdo::vec2::Vec2;
use advdo::workbench::{
    self, campaign, load_scenario, run_campaign, run_transfer, save_map, save_scenario,
    synthesize_scenes, CampaignConfig, ModelChoice, SceneTemplate, SynthSpec,
};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "advdo",
    about = "Trajectory-prediction robustness workbench",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Scenario file.
    #[arg(long, env = "ADVDO_SCENARIO")]
    scenario: Option<PathBuf>,
    /// Map file (overrides the scenario's reference).
    #[arg(long, env = "ADVDO_MAP")]
    map: Option<PathBuf>,
    /// Predictor: constant-velocity | kinematic | social-mlp | oracle, or
    /// a model file path.
    #[arg(long, env = "ADVDO_MODEL", default_value = "constant-velocity")]
    model: String,
    /// External predictor command line (overrides --model).
    #[arg(long, env = "ADVDO_BRIDGE_CMD")]
    bridge_cmd: Option<String>,
    /// History steps the bridge model consumes.
    #[arg(long, default_value_t = 4)]
    bridge_history: usize,
    /// Future steps the bridge model emits.
    #[arg(long, default_value_t = 12)]
    bridge_horizon: usize,
    /// Whether the bridge implements the grad command.
    #[arg(long, default_value_t = false)]
    bridge_grad: bool,
    /// Output file or directory.
    #[arg(long, env = "ADVDO_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "ADVDO_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = available parallelism).
    #[arg(long, env = "ADVDO_WORKERS", default_value_t = 0)]
    workers: usize,
}

impl CommonOpts {
    fn model_choice(&self) -> Result<ModelChoice, Error> {
        if let Some(cmd) = &self.bridge_cmd {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(Error::Config("empty --bridge-cmd".into()));
            }
            return Ok(ModelChoice::Bridge {
                cmd: argv,
                history_len: self.bridge_history,
                horizon: self.bridge_horizon,
                grad_supported: self.bridge_grad,
            });
        }
        if self.model.ends_with(".json") || self.model.contains('/') {
            return Ok(ModelChoice::File(PathBuf::from(&self.model)));
        }
        Ok(ModelChoice::Builtin(SurrogateKind::from_str(&self.model)?))
    }

    fn scenario(&self) -> Result<PathBuf, Error> {
        self.scenario
            .clone()
            .ok_or_else(|| Error::Config("--scenario is required".into()))
    }

    fn out(&self) -> Result<PathBuf, Error> {
        self.out
            .clone()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }
}

#[derive(Args, Clone)]
struct AttackOpts {
    /// Anchor variant.
    #[arg(long, env = "ADVDO_VARIANT", default_value = "opt-init")]
    variant: String,
    /// Collision weight.
    #[arg(long, env = "ADVDO_ALPHA", default_value_t = 0.3)]
    alpha: f64,
    /// Deviation weight.
    #[arg(long, env = "ADVDO_BETA", default_value_t = 0.1)]
    beta: f64,
    /// Dynamics weight.
    #[arg(long, env = "ADVDO_GAMMA", default_value_t = 1.0)]
    gamma: f64,
    /// Knot deviation budget, meters.
    #[arg(long, env = "ADVDO_EPS", default_value_t = 1.0)]
    eps: f64,
    /// PGD step count.
    #[arg(long, env = "ADVDO_STEPS", default_value_t = 30)]
    steps: usize,
    /// Consecutive prediction frames for the sequential attack.
    #[arg(long, env = "ADVDO_LP", default_value_t = 1)]
    lp: usize,
    /// Dense upsampling factor.
    #[arg(long, default_value_t = 5)]
    factor: usize,
    /// Reconstruction optimizer steps.
    #[arg(long, default_value_t = 5)]
    recon_steps: usize,
    /// Attack the minimum-error mode instead of the most likely one.
    #[arg(long, default_value_t = false)]
    min_error_mode: bool,
}

impl AttackOpts {
    fn attack_config(&self, seed: u64) -> Result<AttackConfig, Error> {
        let cfg = AttackConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            eps: self.eps,
            pgd_steps: self.steps,
            variant: AttackVariant::from_str(&self.variant)?,
            l_p: self.lp,
            factor: self.factor,
            mode_rule: if self.min_error_mode {
                ModeRule::MinError
            } else {
                ModeRule::HighestProbability
            },
            seed,
            ..AttackConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            steps: self.recon_steps,
            factor: self.factor,
            ..ReconConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a deterministic scenario (and its map).
    Synth {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value = "mixed")]
        template: String,
        /// Observed steps per agent.
        #[arg(long, default_value_t = 4)]
        history: usize,
        /// Future steps per agent.
        #[arg(long, default_value_t = 12)]
        future: usize,
        /// Also write the crossroads map here and reference it.
        #[arg(long)]
        map_out: Option<PathBuf>,
    },
    /// Reconstruct dense trajectories for every scene's adversarial agent.
    Reconstruct {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 5)]
        recon_steps: usize,
        #[arg(long, default_value_t = 5)]
        factor: usize,
    },
    /// Generate adversarial histories and write the attacked scenario.
    Attack {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        attack: AttackOpts,
    },
    /// Full evaluation campaign: reconstruct, attack, measure, report.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        attack: AttackOpts,
        /// Also run the random-search baseline.
        #[arg(long, default_value_t = false)]
        baseline: bool,
    },
    /// Open- or closed-loop planner simulation, optionally under attack.
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        attack: AttackOpts,
        /// rule | mpc
        #[arg(long, default_value = "mpc")]
        planner: String,
        /// open | closed
        #[arg(long, default_value = "closed")]
        mode: String,
        /// Attach the sequential attack before every prediction.
        #[arg(long, default_value_t = false)]
        attacked: bool,
        #[arg(long, default_value_t = 6.0)]
        duration: f64,
        #[arg(long, default_value_t = 0.5)]
        replan_interval: f64,
    },
    /// Generate deviated (augmentation) variants of every scene.
    Augment {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        attack: AttackOpts,
    },
    /// Train the learnable surrogate on a scenario.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
    },
    /// Adversarially train the learnable surrogate.
    Advtrain {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        attack: AttackOpts,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
    },
    /// Cross-model transfer-rate matrix.
    Transfer {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        attack: AttackOpts,
        /// Comma-separated model list (kinds or file paths).
        #[arg(long)]
        models: String,
    },
    /// Re-aggregate an output directory from its per-scene records.
    Report {
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Synth {
            common,
            count,
            template,
            history,
            future,
            map_out,
        } => {
            let out = common.out()?;
            let spec = SynthSpec {
                template: SceneTemplate::from_str(&template)?,
                history_len: history,
                future_len: future,
                ..SynthSpec::default()
            };
            let mut scenario = synthesize_scenes(&spec, count, common.seed)?;
            if let Some(map_path) = &map_out {
                save_map(map_path, &workbench::synth_map())?;
                let rel = map_path
                    .file_name()
                    .map(|n| n.to_string_lossy().to_string());
                scenario.map = rel;
            }
            save_scenario(&out, &scenario)?;
            println!("wrote {} scenes to {}", count, out.display());
            Ok(0)
        }
        Command::Reconstruct {
            common,
            recon_steps,
            factor,
        } => {
            let scenario = load_scenario(&common.scenario()?)?;
            let out = common.out()?;
            std::fs::create_dir_all(&out)?;
            let cfg = ReconConfig {
                steps: recon_steps,
                factor,
                ..ReconConfig::default()
            };
            let mut rows = Vec::new();
            for scene in &scenario.scenes {
                let rec = reconstruct_at(&scene.agents[scene.adv].history, scene.dt, &cfg)?;
                workbench::report::write_traj_bin(
                    &out.join(format!("{}.traj.bin", scene.id)),
                    &rec.dense.positions,
                )?;
                rows.push(json!({
                    "scene_id": scene.id,
                    "knot_mse": rec.knot_mse,
                    "violation": rec.params.violates(&cfg.bounds),
                    "loss_trace": rec.loss_trace,
                }));
            }
            let path = out.join("reconstruction.json");
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&json!({
                    "format": "advdo-recon/1",
                    "seed": common.seed,
                    "scenes": rows,
                }))?,
            )?;
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::Attack { common, attack } => {
            let scenario_path = common.scenario()?;
            let mut scenario = load_scenario(&scenario_path)?;
            let out = common.out()?;
            let model = common.model_choice()?.build()?;
            let cfg = attack.attack_config(common.seed)?;
            let recon = attack.recon_config();
            let mut records = Vec::new();
            for scene in scenario.scenes.iter_mut() {
                let result = if cfg.l_p > 1 {
                    attack_sequential(scene, model.as_ref(), &cfg, &recon)?
                } else {
                    attack_single(scene, model.as_ref(), &cfg, &recon)?
                };
                records.push(json!({
                    "scene_id": scene.id,
                    "best": result.best,
                    "violation": result.violation,
                    "max_knot_dev": result.max_knot_dev,
                    "queries": result.queries,
                }));
                scene.agents[scene.adv].history = result.x_adv;
            }
            save_scenario(&out, &scenario)?;
            let record_path = out.with_extension("attack.json");
            std::fs::write(
                &record_path,
                serde_json::to_string_pretty(&json!({
                    "format": "advdo-attack/1",
                    "seed": common.seed,
                    "scenes": records,
                }))?,
            )?;
            println!("wrote {} and {}", out.display(), record_path.display());
            Ok(0)
        }
        Command::Eval {
            common,
            attack,
            baseline,
        } => {
            let cfg = CampaignConfig {
                scenario: common.scenario()?,
                map: common.map.clone(),
                model: common.model_choice()?,
                attack: attack.attack_config(common.seed)?,
                recon: attack.recon_config(),
                metrics: Default::default(),
                out_dir: common.out()?,
                seed: common.seed,
                workers: common.workers,
                baseline,
            };
            let outcome = run_campaign(&cfg)?;
            println!(
                "report: {} (benign ADE {:.3}, adversarial ADE {:.3}, VR {:.1}%)",
                outcome.report_path.display(),
                outcome.report.benign.ade,
                outcome.report.adversarial.ade,
                outcome.report.violation_rate * 100.0
            );
            Ok(if outcome.failures > 0 { 1 } else { 0 })
        }
        Command::Simulate {
            common,
            attack,
            planner,
            mode,
            attacked,
            duration,
            replan_interval,
        } => {
            let scenario = load_scenario(&common.scenario()?)?;
            let map = match &common.map {
                Some(p) => workbench::load_map(p)?,
                None => workbench::synth_map(),
            };
            let out = common.out()?;
            std::fs::create_dir_all(&out)?;
            let model = common.model_choice()?.build()?;
            let planner = PlannerKind::from_str(&planner)?;
            let sim_cfg = SimConfig {
                mode: match mode.as_str() {
                    "open" => SimMode::OpenLoop,
                    "closed" => SimMode::ClosedLoop,
                    other => {
                        return Err(Error::Config(format!("unknown sim mode: {other}")));
                    }
                },
                duration,
                replan_interval,
                seed: common.seed,
                ..SimConfig::default()
            };
            let attack_cfg = attack.attack_config(common.seed)?;
            let recon = attack.recon_config();
            let mut incidents = 0usize;
            let mut outcomes = Vec::new();
            for scene in &scenario.scenes {
                let attach = attacked.then_some(advdo::planning::SimAttack {
                    attack: &attack_cfg,
                    recon: &recon,
                });
                let outcome =
                    advdo::planning::simulate(scene, &map, model.as_ref(), planner, &sim_cfg, attach)?;
                if outcome.had_incident() {
                    incidents += 1;
                }
                outcomes.push(json!({
                    "scene_id": scene.id,
                    "collisions": outcome.collisions,
                    "offroad_steps": outcome.offroad_steps,
                    "replan_count": outcome.replan_count,
                    "truncated": outcome.truncated,
                }));
            }
            let path = out.join("simulation.json");
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&json!({
                    "format": "advdo-sim/1",
                    "seed": common.seed,
                    "planner": planner,
                    "mode": sim_cfg.mode,
                    "attacked": attacked,
                    "incident_scenes": incidents,
                    "scenes": outcomes,
                }))?,
            )?;
            println!(
                "wrote {} ({incidents}/{} scenes with incidents)",
                path.display(),
                scenario.scenes.len()
            );
            Ok(0)
        }
        Command::Augment { common, attack } => {
            let mut scenario = load_scenario(&common.scenario()?)?;
            let out = common.out()?;
            let cfg = attack.attack_config(common.seed)?;
            let recon = attack.recon_config();
            let mut augmented = Vec::new();
            for (i, scene) in scenario.scenes.iter().enumerate() {
                // Deterministic direction choice per scene, expressed in
                // the adversarial agent's heading frame.
                let hist = &scene.agents[scene.adv].history;
                let d = *hist.last().unwrap() - hist[hist.len() - 2];
                let heading = if d.norm() > 1e-9 { d.angle() } else { 0.0 };
                let local = match (common.seed as usize + i) % 4 {
                    0 => Vec2::new(1.0, 0.0),
                    1 => Vec2::new(-1.0, 0.0),
                    2 => Vec2::new(0.0, 1.0),
                    _ => Vec2::new(0.0, -1.0),
                };
                let direction = local.rotated(heading);
                let result = generate_augmentation(scene, direction, &cfg, &recon)?;
                if result.violation {
                    return Err(Error::invalid(format!(
                        "augmentation produced a violating trajectory in {}",
                        scene.id
                    )));
                }
                let mut aug = scene.with_adv_history(result.x_adv);
                aug.id = format!("{}-aug", scene.id);
                augmented.push(aug);
            }
            scenario.scenes.extend(augmented);
            save_scenario(&out, &scenario)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Train { common, epochs, lr } => {
            let scenario = load_scenario(&common.scenario()?)?;
            let out = common.out()?;
            let spec = SurrogateSpec::social_mlp(4, 12, common.seed);
            let report = train_surrogate(&scenario.scenes, &spec, epochs, lr)?;
            save_model(&out, &report.spec, report.weights.as_ref())?;
            println!(
                "trained {} epochs (loss {:.4} -> {:.4}), wrote {}",
                epochs,
                report.trace.first().unwrap_or(&f64::NAN),
                report.trace.last().unwrap_or(&f64::NAN),
                out.display()
            );
            Ok(0)
        }
        Command::Advtrain {
            common,
            attack,
            epochs,
            lr,
        } => {
            let scenario = load_scenario(&common.scenario()?)?;
            let out = common.out()?;
            let spec = SurrogateSpec::social_mlp(4, 12, common.seed);
            let cfg = attack.attack_config(common.seed)?;
            let recon = attack.recon_config();
            let report = advdo::predict::adversarial_train(
                &spec,
                &scenario.scenes,
                &cfg,
                &recon,
                epochs,
                lr,
            )?;
            save_model(&out, &report.spec, report.weights.as_ref())?;
            println!("adversarially trained {} epochs, wrote {}", epochs, out.display());
            Ok(0)
        }
        Command::Transfer {
            common,
            attack,
            models,
        } => {
            let choices: Vec<ModelChoice> = models
                .split(',')
                .map(|m| {
                    let m = m.trim();
                    if m.ends_with(".json") || m.contains('/') {
                        Ok(ModelChoice::File(PathBuf::from(m)))
                    } else {
                        Ok(ModelChoice::Builtin(SurrogateKind::from_str(m)?))
                    }
                })
                .collect::<Result<_, Error>>()?;
            let cfg = CampaignConfig {
                scenario: common.scenario()?,
                map: common.map.clone(),
                model: choices
                    .first()
                    .cloned()
                    .ok_or_else(|| Error::Config("empty --models".into()))?,
                attack: attack.attack_config(common.seed)?,
                recon: attack.recon_config(),
                metrics: Default::default(),
                out_dir: common.out()?,
                seed: common.seed,
                workers: common.workers,
                baseline: false,
            };
            let (report, path) = run_transfer(&cfg, &choices)?;
            println!("wrote {} ({} models)", path.display(), report.models.len());
            Ok(0)
        }
        Command::Report { common } => {
            let out = common.out()?;
            let scenes_dir = out.join("scenes");
            let mut records = Vec::new();
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&scenes_dir)
                .map_err(|e| Error::Config(format!("{}: {e}", scenes_dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            entries.sort();
            for path in entries {
                let text = std::fs::read_to_string(&path)?;
                records.push(serde_json::from_str(&text).map_err(|e| Error::Parse {
                    file: path.display().to_string(),
                    detail: e.to_string(),
                })?);
            }
            if records.is_empty() {
                return Err(Error::Config("no per-scene records found".into()));
            }
            let hash = records
                .first()
                .map(|r: &workbench::report::SceneRecord| r.config_hash.clone())
                .unwrap_or_default();
            let report = campaign::aggregate(&records, &hash, common.seed, "reaggregated");
            let path = out.join("report.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!("wrote {}", path.display());
            Ok(if report.failures > 0 { 1 } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Parse { .. } => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
