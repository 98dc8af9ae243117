//! Adversarial history generation.
//!
//! The adversarial agent's reconstructed dense trajectory is perturbed by
//! projected gradient descent over its control actions. Controls are
//! clamped to the dynamic bounds after every step, and every accepted
//! iterate must keep all knot deviations inside the epsilon ball and all
//! dynamic parameters inside bounds, so results are realistic by
//! construction (violation rate 0). Two anchoring variants are supported:
//! `opt-init` fixes the earliest dense state and rolls forward, `opt-end`
//! fixes the current (t = 0) state and rolls backward in reverse time.

use crate::dynamics::{
    l_dyn, l_dyn_term_grad, reverse_rollout, reverse_rollout_vjp, rollout, rollout_vjp,
    ControlAction, ControlSequence, DynParams, DynState, DynamicBounds, RolloutGrad,
    StateCotangent,
};
use crate::error::{Error, Result};
use crate::predict::{model_pullback, PredCotangent, Prediction, PredictionModel};
use crate::recon::{reconstruct_at, ReconConfig};
use crate::scene::Scene;
use crate::vec2::Vec2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which dense state the attack anchors (keeps bit-exact).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackVariant {
    /// Fix the earliest dense state; roll forward.
    OptInit,
    /// Fix the current (t = 0) state; roll backward in reverse time.
    OptEnd,
}

impl std::str::FromStr for AttackVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opt-init" => Ok(AttackVariant::OptInit),
            "opt-end" => Ok(AttackVariant::OptEnd),
            other => Err(Error::Config(format!("unknown attack variant: {other}"))),
        }
    }
}

/// How the attacked mode is selected from a multi-modal prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeRule {
    /// Attack the highest-probability mode.
    HighestProbability,
    /// Attack the mode closest to the ground truth.
    MinError,
}

/// Attack hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Collision-avoidance weight.
    pub alpha: f64,
    /// Deviation (behavior) weight.
    pub beta: f64,
    /// Dynamic-bound weight.
    pub gamma: f64,
    /// Knot deviation budget, meters.
    pub eps: f64,
    /// PGD iterations.
    pub pgd_steps: usize,
    /// Signed-step size as a fraction of the control range divided by the
    /// step count.
    pub pgd_step_scale: f64,
    pub variant: AttackVariant,
    /// Consecutive prediction frames attacked by the sequential variant.
    pub l_p: usize,
    /// Dense upsampling factor.
    pub factor: usize,
    pub bounds: DynamicBounds,
    pub mode_rule: ModeRule,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            alpha: 0.3,
            beta: 0.1,
            gamma: 1.0,
            eps: 1.0,
            pgd_steps: 30,
            pgd_step_scale: 0.5,
            variant: AttackVariant::OptInit,
            l_p: 1,
            factor: 5,
            bounds: DynamicBounds::default(),
            mode_rule: ModeRule::HighestProbability,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("attack weights must be nonnegative".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.l_p == 0 {
            return Err(Error::Config("l_p must be >= 1".into()));
        }
        if self.factor == 0 {
            return Err(Error::Config("factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// One evaluated loss with its unweighted terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `-l_obj + alpha*l_col + beta*l_bh + gamma*l_dyn`.
    pub total: f64,
    pub l_obj: f64,
    pub l_col: f64,
    pub l_bh: f64,
    pub l_dyn: f64,
}

impl LossBreakdown {
    fn zero() -> Self {
        LossBreakdown {
            total: 0.0,
            l_obj: 0.0,
            l_col: 0.0,
            l_bh: 0.0,
            l_dyn: 0.0,
        }
    }

    fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.l_obj += other.l_obj;
        self.l_col += other.l_col;
        self.l_bh += other.l_bh;
        self.l_dyn += other.l_dyn;
    }
}

/// Output of an attack run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    /// Dense adversarial positions in forward time order.
    pub dense_positions: Vec<Vec2>,
    /// Anchored state (earliest for opt-init, current for opt-end).
    pub anchor: DynState,
    /// Optimized dense controls.
    pub controls: ControlSequence,
    pub variant: AttackVariant,
    /// Dense upsampling factor.
    pub factor: usize,
    /// Adversarial sparse history (knot subsample of the dense positions).
    pub x_adv: Vec<Vec2>,
    /// Canonical dynamic parameters of the adversarial trajectory.
    pub params: DynParams,
    /// Loss at every accepted iterate, starting with the initialization.
    pub trace: Vec<LossBreakdown>,
    /// Best (lowest-total) feasible iterate, the one returned.
    pub best: LossBreakdown,
    /// Per-frame decomposition of the best iterate (one entry per
    /// attacked prediction frame).
    pub per_frame: Vec<LossBreakdown>,
    /// True when any dynamic parameter of the result is out of bounds.
    pub violation: bool,
    /// Largest knot deviation from the original history, meters.
    pub max_knot_dev: f64,
    /// Predictor queries spent.
    pub queries: usize,
    pub seed: u64,
}

/// Prediction-error objective: mean over future steps of the Euclidean
/// distance between ground truth and the selected predicted mode,
/// averaged over agents. Returns the value and the selected mode.
pub fn l_obj(futures: &[Vec<Vec2>], pred: &Prediction, rule: ModeRule) -> Result<(f64, usize)> {
    let n = futures.len();
    if n == 0 || pred.n_agents() != n {
        return Err(Error::invalid("l_obj: agent count mismatch"));
    }
    let t_len = pred.horizon().min(futures[0].len());
    if t_len == 0 {
        return Err(Error::invalid("l_obj: empty horizon"));
    }
    let value_of = |k: usize| -> f64 {
        let mut acc = 0.0;
        for (i, y) in futures.iter().enumerate() {
            for (t, yt) in y.iter().enumerate().take(t_len) {
                acc += pred.modes[k][i][t].dist(*yt);
            }
        }
        acc / (n * t_len) as f64
    };
    let k = match rule {
        ModeRule::HighestProbability => pred.best_mode(),
        ModeRule::MinError => {
            let mut best = 0;
            let mut best_v = f64::INFINITY;
            for k in 0..pred.k() {
                let v = value_of(k);
                if v < best_v {
                    best_v = v;
                    best = k;
                }
            }
            best
        }
    };
    Ok((value_of(k), k))
}

/// Commonsense collision proximity: mean over non-adversarial agents and
/// dense steps of `1/(dist + 1)`. In `(0, 1]`, higher when closer; 0 when
/// there are no other agents.
pub fn l_col(d_adv: &[Vec2], others: &[Vec<Vec2>]) -> f64 {
    if others.is_empty() {
        return 0.0;
    }
    let steps = d_adv.len();
    let mut acc = 0.0;
    for other in others {
        let mut per_agent = 0.0;
        for (p, o) in d_adv.iter().zip(other) {
            per_agent += 1.0 / (p.dist(*o) + 1.0);
        }
        acc += per_agent / steps as f64;
    }
    acc / others.len() as f64
}

/// Behavior deviation penalty: per-step `soft_clip(dist/eps)` averaged
/// over dense steps. Zero exactly when the trajectories coincide.
pub fn l_bh(d_adv: &[Vec2], d_orig: &[Vec2], eps: f64) -> f64 {
    let mut acc = 0.0;
    for (p, o) in d_adv.iter().zip(d_orig) {
        acc += crate::dynamics::soft_clip(p.dist(*o) / eps);
    }
    acc / d_adv.len().min(d_orig.len()).max(1) as f64
}

/// Piecewise-linear upsample of sparse knots onto the dense grid (plain
/// position interpolation, used to align other agents to the adversary's
/// dense steps).
pub fn lerp_upsample(knots: &[Vec2], factor: usize) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(factor * (knots.len().saturating_sub(1)) + 1);
    for t in 0..knots.len().saturating_sub(1) {
        for j in 0..factor {
            let w = j as f64 / factor as f64;
            out.push(knots[t] * (1.0 - w) + knots[t + 1] * w);
        }
    }
    if let Some(last) = knots.last() {
        out.push(*last);
    }
    out
}

/// The trajectory carrier: materializes dense states from the anchored
/// state plus controls, in the direction the variant dictates.
#[derive(Debug, Clone)]
struct Carrier {
    anchor: DynState,
    variant: AttackVariant,
}

impl Carrier {
    fn materialize(&self, u: &ControlSequence) -> Result<Vec<DynState>> {
        match self.variant {
            AttackVariant::OptInit => rollout(&self.anchor, u),
            AttackVariant::OptEnd => reverse_rollout(&self.anchor, u),
        }
    }

    fn vjp(&self, u: &ControlSequence, cots: &[StateCotangent]) -> Result<RolloutGrad> {
        match self.variant {
            AttackVariant::OptInit => rollout_vjp(&self.anchor, u, cots),
            AttackVariant::OptEnd => reverse_rollout_vjp(&self.anchor, u, cots),
        }
    }
}

/// A prediction frame of the (possibly sequential) attack: the knot range
/// `[knot_start ..= knot_start + h - 1]` of the dense trajectory is the
/// model input window; `scene` carries the other agents and the
/// ground-truth futures for this frame.
struct Frame {
    scene: Scene,
    knot_start: usize,
    h: usize,
    /// Other agents' histories of this frame upsampled to the dense grid.
    others_dense: Vec<Vec<Vec2>>,
}

/// Everything fixed across PGD iterations.
struct Problem<'a> {
    predictor: &'a dyn PredictionModel,
    cfg: &'a AttackConfig,
    carrier: Carrier,
    frames: Vec<Frame>,
    /// Benign dense reference (reconstructed original).
    d_orig: Vec<Vec2>,
    /// Original sparse knots the epsilon ball is anchored to.
    x_orig: Vec<Vec2>,
    /// Either the prediction-error objective or an augmentation deviation
    /// objective.
    objective: Objective,
}

enum Objective {
    /// Maximize prediction error (standard attack).
    PredictionError,
    /// Push the trajectory along a unit direction (data augmentation).
    Deviate(Vec2),
}

#[derive(Clone)]
struct Evaluated {
    breakdown: LossBreakdown,
    per_frame: Vec<LossBreakdown>,
    grad: Vec<ControlAction>,
    queries: usize,
}

impl Problem<'_> {
    fn factor(&self) -> usize {
        self.cfg.factor
    }

    fn knots_of(&self, states: &[DynState]) -> Vec<Vec2> {
        states
            .iter()
            .step_by(self.factor())
            .map(|s| s.position)
            .collect()
    }

    fn feasible(&self, states: &[DynState], u: &ControlSequence) -> bool {
        let f = self.factor();
        for (k, x) in self.x_orig.iter().enumerate() {
            if states[k * f].position.dist(*x) > self.cfg.eps {
                return false;
            }
        }
        let params = DynParams::from_rollout(states, u);
        !params.violates(&self.cfg.bounds)
    }

    /// Loss, per-frame decomposition, and control gradient at `u`.
    fn evaluate(&self, u: &ControlSequence) -> Result<Evaluated> {
        let f = self.factor();
        let states = self.carrier.materialize(u)?;
        let positions: Vec<Vec2> = states.iter().map(|s| s.position).collect();
        let knots = self.knots_of(&states);
        let mut cots = vec![StateCotangent::default(); states.len()];
        let mut direct = vec![ControlAction::default(); u.len()];
        let mut per_frame = Vec::with_capacity(self.frames.len());
        let mut total = LossBreakdown::zero();
        let mut queries = 0;
        for frame in &self.frames {
            let seg_start = frame.knot_start * f;
            let seg_end = (frame.knot_start + frame.h - 1) * f;
            let seg = &positions[seg_start..=seg_end];
            let seg_len = seg.len();

            // Objective term.
            let (obj_value, obj_sign) = match &self.objective {
                Objective::PredictionError => {
                    let window_hist = knots[frame.knot_start..frame.knot_start + frame.h].to_vec();
                    let attacked = frame.scene.with_adv_history(window_hist);
                    let pred = self.predictor.predict(&attacked)?;
                    queries += 1;
                    let futures = frame.scene.futures();
                    let (value, mode) = l_obj(&futures, &pred, self.cfg.mode_rule)?;
                    // d(total)/d(Y_hat) for the selected mode; total carries
                    // -l_obj, so the sign flips here.
                    let n = futures.len();
                    let t_len = pred.horizon().min(futures[0].len());
                    let mut cot: PredCotangent = pred
                        .modes
                        .iter()
                        .map(|m| m.iter().map(|a| vec![Vec2::ZERO; a.len()]).collect())
                        .collect();
                    for (i, y) in futures.iter().enumerate() {
                        for (t, yt) in y.iter().enumerate().take(t_len) {
                            let diff = pred.modes[mode][i][t] - *yt;
                            let d = diff.norm();
                            if d > 1e-12 {
                                cot[mode][i][t] = diff * (-1.0 / (d * (n * t_len) as f64));
                            }
                        }
                    }
                    let gx = model_pullback(self.predictor, &attacked, &cot, true)?;
                    let adv_row = &gx[frame.scene.adv];
                    // The model may consume fewer knots than the frame
                    // provides; its window is the tail of the frame window.
                    let hm = adv_row.len();
                    for (s, g) in adv_row.iter().enumerate() {
                        let knot = frame.knot_start + frame.h - hm + s;
                        cots[knot * f].position += *g;
                    }
                    (value, -1.0)
                }
                Objective::Deviate(dir) => {
                    // L_d = mean_t (orig - adv) . dir ; gradient on adv is
                    // -dir / len.
                    let orig_seg = &self.d_orig[seg_start..=seg_end];
                    let mut acc = 0.0;
                    for (p, o) in seg.iter().zip(orig_seg) {
                        acc += (*o - *p).dot(*dir);
                    }
                    let value = acc / seg_len as f64;
                    let g = -*dir / seg_len as f64;
                    for idx in seg_start..=seg_end {
                        cots[idx].position += g;
                    }
                    (value, 1.0)
                }
            };

            // Collision proximity term.
            let mut col = 0.0;
            if self.cfg.alpha > 0.0 && !frame.others_dense.is_empty() {
                let n_others = frame.others_dense.len() as f64;
                for other in &frame.others_dense {
                    let mut per_agent = 0.0;
                    for (j, (p, o)) in seg.iter().zip(other).enumerate() {
                        let d = p.dist(*o);
                        per_agent += 1.0 / (d + 1.0);
                        if d > 1e-9 {
                            let w = self.cfg.alpha / (n_others * seg_len as f64);
                            let g = (*p - *o) * (-1.0 / (d * (d + 1.0) * (d + 1.0))) * w;
                            cots[seg_start + j].position += g;
                        }
                    }
                    col += per_agent / seg_len as f64;
                }
                col /= n_others;
            }

            // Behavior deviation term.
            let mut bh = 0.0;
            if self.cfg.beta > 0.0 {
                let orig_seg = &self.d_orig[seg_start..=seg_end];
                for (j, (p, o)) in seg.iter().zip(orig_seg).enumerate() {
                    let d = p.dist(*o);
                    let z = d / self.cfg.eps;
                    bh += crate::dynamics::soft_clip(z);
                    if d > 1e-12 {
                        let g = (*p - *o)
                            * (crate::dynamics::soft_clip_grad(z)
                                / (d * self.cfg.eps * seg_len as f64))
                            * self.cfg.beta;
                        cots[seg_start + j].position += g;
                    }
                }
                bh /= seg_len as f64;
            }

            // Dynamic-bound term on the frame's sub-trajectory.
            let sub_params = slice_params(&states, u, seg_start, seg_end);
            let dyn_value = l_dyn(&sub_params, &self.cfg.bounds);
            if self.cfg.gamma > 0.0 {
                for t in seg_start..seg_end {
                    cots[t].speed +=
                        self.cfg.gamma * l_dyn_term_grad(states[t].speed, self.cfg.bounds.v);
                }
                for t in seg_start..seg_end.saturating_sub(1) {
                    let v = states[t].speed;
                    let kap = u.actions[t].curvature;
                    direct[t].accel += self.cfg.gamma
                        * l_dyn_term_grad(u.actions[t].accel, self.cfg.bounds.a);
                    direct[t].curvature +=
                        self.cfg.gamma * l_dyn_term_grad(kap, self.cfg.bounds.kappa);
                    let g_dth = self.cfg.gamma * l_dyn_term_grad(v * kap, self.cfg.bounds.dtheta);
                    direct[t].curvature += g_dth * v;
                    cots[t].speed += g_dth * kap;
                }
            }

            let frame_loss = LossBreakdown {
                total: obj_sign * obj_value
                    + self.cfg.alpha * col
                    + self.cfg.beta * bh
                    + self.cfg.gamma * dyn_value,
                l_obj: if matches!(self.objective, Objective::PredictionError) {
                    obj_value
                } else {
                    0.0
                },
                l_col: col,
                l_bh: bh,
                l_dyn: dyn_value,
            };
            total.add(&frame_loss);
            per_frame.push(frame_loss);
        }
        let grad = self.carrier.vjp(u, &cots)?;
        let mut g = grad.controls;
        for (gi, d) in g.iter_mut().zip(&direct) {
            gi.accel += d.accel;
            gi.curvature += d.curvature;
        }
        Ok(Evaluated {
            breakdown: total,
            per_frame,
            grad: g,
            queries,
        })
    }
}

/// Canonical parameters of the dense sub-trajectory `[start..=end]`.
fn slice_params(states: &[DynState], u: &ControlSequence, start: usize, end: usize) -> DynParams {
    let theta: Vec<f64> = states[start..end].iter().map(|s| s.heading).collect();
    let v: Vec<f64> = states[start..end].iter().map(|s| s.speed).collect();
    let a: Vec<f64> = u.actions[start..end.saturating_sub(1)]
        .iter()
        .map(|c| c.accel)
        .collect();
    let kappa: Vec<f64> = u.actions[start..end.saturating_sub(1)]
        .iter()
        .map(|c| c.curvature)
        .collect();
    let dtheta: Vec<f64> = v
        .iter()
        .zip(&kappa)
        .map(|(vv, kk)| vv * kk)
        .collect();
    DynParams {
        theta,
        v,
        a,
        kappa,
        dtheta,
        slow_steps: Vec::new(),
    }
}

/// Full adversarial loss of a candidate dense trajectory, with its
/// unweighted per-term breakdown. The breakdown always recomposes to the
/// total as `-l_obj + alpha*l_col + beta*l_bh + gamma*l_dyn`.
pub fn adv_loss(
    scene: &Scene,
    predictor: &dyn PredictionModel,
    d_adv: &[Vec2],
    params: &DynParams,
    d_orig: &[Vec2],
    cfg: &AttackConfig,
) -> Result<LossBreakdown> {
    let x_adv: Vec<Vec2> = d_adv.iter().step_by(cfg.factor).copied().collect();
    let attacked = scene.with_adv_history(x_adv);
    let pred = predictor.predict(&attacked)?;
    let (obj, _) = l_obj(&scene.futures(), &pred, cfg.mode_rule)?;
    let others: Vec<Vec<Vec2>> = scene
        .agents
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != scene.adv)
        .map(|(_, a)| lerp_upsample(&a.history, cfg.factor))
        .collect();
    let col = l_col(d_adv, &others);
    let bh = l_bh(d_adv, d_orig, cfg.eps);
    let dynv = l_dyn(params, &cfg.bounds);
    Ok(LossBreakdown {
        total: -obj + cfg.alpha * col + cfg.beta * bh + cfg.gamma * dynv,
        l_obj: obj,
        l_col: col,
        l_bh: bh,
        l_dyn: dynv,
    })
}

fn clamp_controls(u: &mut ControlSequence, bounds: &DynamicBounds) {
    for act in u.actions.iter_mut() {
        act.accel = act.accel.clamp(bounds.a.0, bounds.a.1);
        act.curvature = act.curvature.clamp(bounds.kappa.0, bounds.kappa.1);
    }
}

/// Reconstruct the adversarial history, retrying with more optimizer
/// steps when the quick default leaves the start infeasible.
fn reconstruct_feasible(
    history: &[Vec2],
    dt: f64,
    recon: &ReconConfig,
    cfg: &AttackConfig,
) -> Result<crate::recon::Reconstruction> {
    let starts_feasible = |r: &crate::recon::Reconstruction| {
        let knots = r.dense.knots();
        let dev_ok = knots
            .iter()
            .zip(history)
            .all(|(k, x)| k.dist(*x) <= cfg.eps);
        dev_ok && !r.params.violates(&cfg.bounds)
    };
    let mut rec = reconstruct_at(history, dt, recon)?;
    if !starts_feasible(&rec) && recon.steps < 100 {
        let deeper = ReconConfig {
            steps: 100,
            ..recon.clone()
        };
        rec = reconstruct_at(history, dt, &deeper)?;
    }
    if !starts_feasible(&rec) {
        return Err(Error::invalid(
            "reconstruction of the adversarial history is not dynamically feasible",
        ));
    }
    Ok(rec)
}

fn build_carrier(
    rec: &crate::recon::Reconstruction,
    x_orig_last: Vec2,
    variant: AttackVariant,
) -> (Carrier, ControlSequence) {
    match variant {
        AttackVariant::OptInit => (
            Carrier {
                anchor: rec.dense.start,
                variant,
            },
            rec.dense.controls.clone(),
        ),
        AttackVariant::OptEnd => {
            let states = rec.dense.states();
            let last = states.last().unwrap();
            // Snap the anchored position to the raw observed point so the
            // current position is preserved bit-exactly.
            let anchor = DynState {
                position: x_orig_last,
                heading: last.heading,
                speed: last.speed,
            };
            (Carrier { anchor, variant }, rec.dense.controls.clone())
        }
    }
}

/// Blend `from` toward `to`, halving `lambda` until the candidate lies in
/// the feasible set; `None` when even the smallest blend fails.
fn project_toward(
    problem: &Problem,
    from: &ControlSequence,
    to: &ControlSequence,
) -> Result<Option<ControlSequence>> {
    let mut lambda = 1.0;
    for _ in 0..20 {
        let actions: Vec<ControlAction> = from
            .actions
            .iter()
            .zip(&to.actions)
            .map(|(a, b)| ControlAction {
                accel: a.accel + lambda * (b.accel - a.accel),
                curvature: a.curvature + lambda * (b.curvature - a.curvature),
            })
            .collect();
        let cand = ControlSequence::new(from.dt, actions)?;
        let states = problem.carrier.materialize(&cand)?;
        if problem.feasible(&states, &cand) {
            return Ok(Some(cand));
        }
        lambda *= 0.5;
    }
    Ok(None)
}

/// Signed-step size reference: steps are sized against the standard
/// 30-iteration schedule regardless of the configured budget, so a longer
/// run strictly extends a shorter one (best-iterate monotonicity).
const PGD_REFERENCE_STEPS: f64 = 30.0;
/// Iterations per restart block: the first block refines the benign
/// initialization; every later block spends one evaluation on a random
/// feasible draw and refines it for the rest of the block.
const PGD_BLOCK: usize = 5;

/// Run the shared PGD engine: momentum signed-gradient iterations with
/// periodic random feasible restarts on a fixed block schedule, all
/// within a `pgd_steps + 1` objective-evaluation budget (query parity
/// with the random-search baseline).
fn run_pgd(problem: &Problem, init: ControlSequence) -> Result<AttackResult> {
    let cfg = problem.cfg;
    let mut u0 = init;
    clamp_controls(&mut u0, &cfg.bounds);
    let states = problem.carrier.materialize(&u0)?;
    if !problem.feasible(&states, &u0) {
        return Err(Error::invalid(
            "attack initialization violates the feasible set",
        ));
    }
    let eval0 = problem.evaluate(&u0)?;
    let mut queries = eval0.queries;
    if !eval0.breakdown.total.is_finite() {
        return Err(Error::OptimizationDiverged {
            trace: vec![eval0.breakdown.total],
            last_finite: None,
        });
    }
    let step_a = cfg.pgd_step_scale * (cfg.bounds.a.1 - cfg.bounds.a.0) / PGD_REFERENCE_STEPS;
    let step_k =
        cfg.pgd_step_scale * (cfg.bounds.kappa.1 - cfg.bounds.kappa.0) / PGD_REFERENCE_STEPS;
    let range_a = cfg.pgd_step_scale * (cfg.bounds.a.1 - cfg.bounds.a.0);
    let range_k = cfg.pgd_step_scale * (cfg.bounds.kappa.1 - cfg.bounds.kappa.0);

    let mut trace = vec![eval0.breakdown];
    let mut best_u = u0.clone();
    let mut best = eval0.breakdown;
    let mut best_frames = eval0.per_frame.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // `free` accumulates unprojected signed steps inside the control box;
    // the evaluated iterate is its retraction onto the feasible set along
    // the ray from the benign initialization, so progress tangential to
    // the feasibility boundary is not lost.
    let mut u = u0.clone();
    let mut eval = eval0;
    let mut free = u0.clone();
    let mut momentum = vec![ControlAction::default(); u.len()];

    for slot in 0..cfg.pgd_steps {
        let fresh_block = slot % PGD_BLOCK == 0 && slot > 0;
        if fresh_block {
            // Random feasible draw around the benign initialization; this
            // consumes the slot's evaluation.
            let mut draw = u0.clone();
            for act in draw.actions.iter_mut() {
                act.accel += rng.random_range(-range_a..range_a);
                act.curvature += rng.random_range(-range_k..range_k);
            }
            clamp_controls(&mut draw, &cfg.bounds);
            let Some(start) = project_toward(problem, &u0, &draw)? else {
                trace.push(best);
                continue;
            };
            momentum.iter_mut().for_each(|m| *m = ControlAction::default());
            free = draw;
            u = start;
            eval = problem.evaluate(&u)?;
            queries += eval.queries;
            trace.push(eval.breakdown);
            if eval.breakdown.total < best.total {
                best = eval.breakdown;
                best_u = u.clone();
                best_frames = eval.per_frame.clone();
            }
            continue;
        }
        for (m, g) in momentum.iter_mut().zip(&eval.grad) {
            m.accel = 0.5 * m.accel + g.accel;
            m.curvature = 0.5 * m.curvature + g.curvature;
        }
        for (act, m) in free.actions.iter_mut().zip(&momentum) {
            act.accel -= step_a * m.accel.signum();
            act.curvature -= step_k * m.curvature.signum();
        }
        clamp_controls(&mut free, &cfg.bounds);
        let Some(next) = project_toward(problem, &u0, &free)? else {
            trace.push(eval.breakdown);
            momentum.iter_mut().for_each(|m| *m = ControlAction::default());
            continue;
        };
        u = next;
        eval = problem.evaluate(&u)?;
        queries += eval.queries;
        if !eval.breakdown.total.is_finite() {
            return Err(Error::OptimizationDiverged {
                trace: trace.iter().map(|b| b.total).collect(),
                last_finite: Some(best.total),
            });
        }
        trace.push(eval.breakdown);
        if eval.breakdown.total < best.total {
            best = eval.breakdown;
            best_u = u.clone();
            best_frames = eval.per_frame.clone();
        }
    }

    let states = problem.carrier.materialize(&best_u)?;
    let positions: Vec<Vec2> = states.iter().map(|s| s.position).collect();
    let params = DynParams::from_rollout(&states, &best_u);
    let x_adv: Vec<Vec2> = positions.iter().step_by(cfg.factor).copied().collect();
    let max_knot_dev = x_adv
        .iter()
        .zip(&problem.x_orig)
        .map(|(a, b)| a.dist(*b))
        .fold(0.0, f64::max);
    Ok(AttackResult {
        dense_positions: positions,
        anchor: problem.carrier.anchor,
        controls: best_u,
        variant: cfg.variant,
        factor: cfg.factor,
        x_adv,
        violation: params.violates(&cfg.bounds),
        params,
        trace,
        best,
        per_frame: best_frames,
        max_knot_dev,
        queries,
        seed: cfg.seed,
    })
}

fn single_frame_problem<'a>(
    scene: &Scene,
    predictor: &'a dyn PredictionModel,
    cfg: &'a AttackConfig,
    objective: Objective,
    recon: &ReconConfig,
) -> Result<(Problem<'a>, ControlSequence)> {
    cfg.validate()?;
    scene.validate()?;
    let h = scene.history_len();
    let x_orig = scene.agents[scene.adv].history.clone();
    let mut recon_cfg = recon.clone();
    recon_cfg.factor = cfg.factor;
    recon_cfg.bounds = cfg.bounds;
    let rec = reconstruct_feasible(&x_orig, scene.dt, &recon_cfg, cfg)?;
    let (carrier, init) = build_carrier(&rec, *x_orig.last().unwrap(), cfg.variant);
    let others_dense: Vec<Vec<Vec2>> = scene
        .agents
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != scene.adv)
        .map(|(_, a)| lerp_upsample(&a.history, cfg.factor))
        .collect();
    let frame = Frame {
        scene: scene.clone(),
        knot_start: 0,
        h,
        others_dense,
    };
    Ok((
        Problem {
            predictor,
            cfg,
            carrier,
            frames: vec![frame],
            d_orig: rec.dense.positions.clone(),
            x_orig,
            objective,
        },
        init,
    ))
}

/// Attack a single prediction frame.
///
/// Reconstructs the adversarial agent's dense history, then runs PGD on
/// its controls to maximize the prediction error while every accepted
/// iterate keeps knot deviations within `eps` and dynamic parameters in
/// bounds. Deterministic given the configuration.
pub fn attack_single(
    scene: &Scene,
    predictor: &dyn PredictionModel,
    cfg: &AttackConfig,
    recon: &ReconConfig,
) -> Result<AttackResult> {
    let (problem, init) =
        single_frame_problem(scene, predictor, cfg, Objective::PredictionError, recon)?;
    run_pgd(&problem, init)
}

/// Attack `l_p` consecutive prediction frames with one trajectory.
///
/// The scene must expose `H + l_p` observed steps, where `H` is the
/// frame history length (`history_len - l_p`). One control sequence over
/// the whole span is optimized against the sum of the per-frame losses;
/// every length-`H` window of the result is the attack input at its
/// frame.
pub fn attack_sequential(
    scene: &Scene,
    predictor: &dyn PredictionModel,
    cfg: &AttackConfig,
    recon: &ReconConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    scene.validate()?;
    let l_p = cfg.l_p;
    let h_total = scene.history_len();
    if h_total < l_p + 2 {
        return Err(Error::invalid(format!(
            "sequential attack needs at least {} observed steps, scene has {h_total}",
            l_p + 2
        )));
    }
    let h = h_total - l_p;
    let t_len = predictor.horizon();
    if scene.future_len() < t_len {
        return Err(Error::invalid(
            "sequential attack needs futures covering the prediction horizon",
        ));
    }
    let x_orig = scene.agents[scene.adv].history.clone();
    let mut recon_cfg = recon.clone();
    recon_cfg.factor = cfg.factor;
    recon_cfg.bounds = cfg.bounds;
    let rec = reconstruct_feasible(&x_orig, scene.dt, &recon_cfg, cfg)?;
    let (carrier, init) = build_carrier(&rec, *x_orig.last().unwrap(), cfg.variant);
    let mut frames = Vec::with_capacity(l_p);
    for j in 0..l_p {
        // Frame j's window ends at knot j + h; futures replay the log.
        let end = j + h;
        let frame_scene = scene.window(end, h, t_len)?;
        let others_dense: Vec<Vec<Vec2>> = frame_scene
            .agents
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != frame_scene.adv)
            .map(|(_, a)| lerp_upsample(&a.history, cfg.factor))
            .collect();
        frames.push(Frame {
            scene: frame_scene,
            knot_start: j + 1,
            h,
            others_dense,
        });
    }
    let problem = Problem {
        predictor,
        cfg,
        carrier,
        frames,
        d_orig: rec.dense.positions.clone(),
        x_orig,
        objective: Objective::PredictionError,
    };
    run_pgd(&problem, init)
}

/// Generate a realistic deviated trajectory for data augmentation: the
/// objective pushes the dense trajectory along the unit direction
/// `direction` (weighted against the collision term by `gamma`), under
/// the same epsilon-ball and dynamic-bound projection as the attack.
pub fn generate_augmentation(
    scene: &Scene,
    direction: Vec2,
    cfg: &AttackConfig,
    recon: &ReconConfig,
) -> Result<AttackResult> {
    if (direction.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("augmentation direction must be a unit vector"));
    }
    // The deviation objective replaces the prediction term; collision
    // keeps its weight through gamma per the augmentation objective.
    let aug_cfg = AttackConfig {
        alpha: cfg.gamma,
        beta: 0.0,
        gamma: cfg.gamma,
        ..cfg.clone()
    };
    let (problem, init) = single_frame_problem(
        scene,
        predictor_stub(),
        &aug_cfg,
        Objective::Deviate(direction),
        recon,
    )?;
    run_pgd(&problem, init)
}

/// Augmentation needs no predictor; a zero-horizon stub satisfies the
/// problem plumbing without ever being queried.
fn predictor_stub() -> &'static dyn PredictionModel {
    struct Stub;
    impl PredictionModel for Stub {
        fn name(&self) -> String {
            "none".into()
        }
        fn history_len(&self) -> usize {
            2
        }
        fn horizon(&self) -> usize {
            0
        }
        fn predict(&self, _scene: &Scene) -> Result<Prediction> {
            Err(Error::Capability("augmentation stub cannot predict".into()))
        }
    }
    static STUB: Stub = Stub;
    &STUB
}

/// Random-search baseline with the same feasible set and query budget as
/// PGD: `pgd_steps` uniformly sampled control perturbations, each
/// projected toward the benign initialization until feasible, scored by
/// the same total loss. Returns the best sample found.
pub fn random_search_attack(
    scene: &Scene,
    predictor: &dyn PredictionModel,
    cfg: &AttackConfig,
    recon: &ReconConfig,
) -> Result<AttackResult> {
    let (problem, init) =
        single_frame_problem(scene, predictor, cfg, Objective::PredictionError, recon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut u = init.clone();
    clamp_controls(&mut u, &cfg.bounds);
    let states = problem.carrier.materialize(&u)?;
    if !problem.feasible(&states, &u) {
        return Err(Error::invalid(
            "attack initialization violates the feasible set",
        ));
    }
    let mut eval = problem.evaluate(&u)?;
    let mut queries = eval.queries;
    let mut best_u = u.clone();
    let mut best = eval.breakdown;
    let mut best_frames = eval.per_frame.clone();
    let mut trace = vec![eval.breakdown];
    let range_a = cfg.pgd_step_scale * (cfg.bounds.a.1 - cfg.bounds.a.0);
    let range_k = cfg.pgd_step_scale * (cfg.bounds.kappa.1 - cfg.bounds.kappa.0);
    for _ in 0..cfg.pgd_steps {
        let mut cand = init.clone();
        for act in cand.actions.iter_mut() {
            act.accel += rng.random_range(-range_a..range_a);
            act.curvature += rng.random_range(-range_k..range_k);
        }
        clamp_controls(&mut cand, &cfg.bounds);
        // Project toward the benign initialization until feasible.
        let mut lambda = 1.0;
        let mut feasible_cand = None;
        for _ in 0..20 {
            let actions: Vec<ControlAction> = init
                .actions
                .iter()
                .zip(&cand.actions)
                .map(|(a, b)| ControlAction {
                    accel: a.accel + lambda * (b.accel - a.accel),
                    curvature: a.curvature + lambda * (b.curvature - a.curvature),
                })
                .collect();
            let c = ControlSequence::new(init.dt, actions)?;
            let s = problem.carrier.materialize(&c)?;
            if problem.feasible(&s, &c) {
                feasible_cand = Some(c);
                break;
            }
            lambda *= 0.5;
        }
        let Some(c) = feasible_cand else {
            trace.push(best);
            continue;
        };
        eval = problem.evaluate(&c)?;
        queries += eval.queries;
        trace.push(eval.breakdown);
        if eval.breakdown.total < best.total {
            best = eval.breakdown;
            best_u = c;
            best_frames = eval.per_frame.clone();
        }
    }
    let states = problem.carrier.materialize(&best_u)?;
    let positions: Vec<Vec2> = states.iter().map(|s| s.position).collect();
    let params = DynParams::from_rollout(&states, &best_u);
    let x_adv: Vec<Vec2> = positions.iter().step_by(cfg.factor).copied().collect();
    let max_knot_dev = x_adv
        .iter()
        .zip(&problem.x_orig)
        .map(|(a, b)| a.dist(*b))
        .fold(0.0, f64::max);
    Ok(AttackResult {
        dense_positions: positions,
        anchor: problem.carrier.anchor,
        controls: best_u,
        variant: cfg.variant,
        factor: cfg.factor,
        x_adv,
        violation: params.violates(&cfg.bounds),
        params,
        trace,
        best,
        per_frame: best_frames,
        max_knot_dev,
        queries,
        seed: cfg.seed,
    })
}

impl AttackResult {
    /// Re-materialize the dense states from the stored anchor and
    /// controls (exact reproduction of `dense_positions`).
    pub fn materialize(&self) -> Result<Vec<DynState>> {
        match self.variant {
            AttackVariant::OptInit => rollout(&self.anchor, &self.controls),
            AttackVariant::OptEnd => reverse_rollout(&self.anchor, &self.controls),
        }
    }
}
