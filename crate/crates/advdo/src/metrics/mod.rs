//! Evaluation metrics: displacement errors, miss/off-road/violation
//! rates, planning-aware weighting, sensitivity, similarity, transfer
//! rate, motion/interaction split, and scene statistics.

pub mod similarity;

pub use similarity::{trajectory_similarity, Similarity};

use crate::attack::AttackResult;
use crate::dynamics::{inverse, DynamicBounds};
use crate::error::{Error, Result};
use crate::planning::{interaction_potential_grad_mag, MapModel};
use crate::predict::Prediction;
use crate::scene::Scene;
use crate::vec2::Vec2;
use serde::{Deserialize, Serialize};

/// Metric thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Miss-rate displacement threshold, meters.
    pub miss_threshold: f64,
    /// Radius for aggregated sensitivity, meters.
    pub sensitivity_radius: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            miss_threshold: 2.0,
            sensitivity_radius: 5.0,
        }
    }
}

/// The four prediction metrics aggregated over a set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSet {
    pub ade: f64,
    pub fde: f64,
    pub mr: f64,
    pub orr: f64,
}

/// Per-agent average and final displacement error, minimized over modes.
pub fn displacement_errors(pred: &Prediction, futures: &[Vec<Vec2>]) -> Result<Vec<(f64, f64)>> {
    let n = futures.len();
    if pred.n_agents() != n {
        return Err(Error::invalid("displacement_errors: agent count mismatch"));
    }
    let mut out = Vec::with_capacity(n);
    for (i, y) in futures.iter().enumerate() {
        let t_len = pred.horizon().min(y.len());
        if t_len == 0 {
            return Err(Error::invalid("displacement_errors: empty horizon"));
        }
        let mut best = (f64::INFINITY, f64::INFINITY);
        for k in 0..pred.k() {
            let mut acc = 0.0;
            for t in 0..t_len {
                acc += pred.modes[k][i][t].dist(y[t]);
            }
            let ade = acc / t_len as f64;
            let fde = pred.modes[k][i][t_len - 1].dist(y[t_len - 1]);
            if ade < best.0 {
                best.0 = ade;
            }
            if fde < best.1 {
                best.1 = fde;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Per-agent miss flags: an agent is missed when its best mode's maximum
/// pointwise displacement still exceeds the threshold.
pub fn miss_flags(pred: &Prediction, futures: &[Vec<Vec2>], threshold: f64) -> Result<Vec<bool>> {
    if threshold <= 0.0 {
        return Err(Error::invalid("miss threshold must be positive"));
    }
    let n = futures.len();
    if pred.n_agents() != n {
        return Err(Error::invalid("miss_rate: agent count mismatch"));
    }
    let mut flags = Vec::with_capacity(n);
    for (i, y) in futures.iter().enumerate() {
        let t_len = pred.horizon().min(y.len());
        let best_max = (0..pred.k())
            .map(|k| {
                (0..t_len)
                    .map(|t| pred.modes[k][i][t].dist(y[t]))
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        flags.push(best_max > threshold);
    }
    Ok(flags)
}

/// Fraction of agents missed.
pub fn miss_rate(pred: &Prediction, futures: &[Vec<Vec2>], threshold: f64) -> Result<f64> {
    let flags = miss_flags(pred, futures, threshold)?;
    Ok(flags.iter().filter(|m| **m).count() as f64 / flags.len() as f64)
}

/// Per-agent off-road flags of the most likely mode: true when any
/// predicted waypoint leaves the drivable region.
pub fn offroad_flags(pred: &Prediction, map: &MapModel) -> Result<Vec<bool>> {
    map.validate()?;
    let best = pred.best_mode();
    Ok(pred.modes[best]
        .iter()
        .map(|traj| traj.iter().any(|p| !map.is_drivable(*p)))
        .collect())
}

/// Fraction of predicted trajectories leaving the drivable region.
pub fn offroad_rate(pred: &Prediction, map: &MapModel) -> Result<f64> {
    let flags = offroad_flags(pred, map)?;
    Ok(flags.iter().filter(|f| **f).count() as f64 / flags.len().max(1) as f64)
}

/// Fraction of attack results with any out-of-bound dynamic parameter.
pub fn violation_rate(results: &[AttackResult], bounds: &DynamicBounds) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("violation_rate needs a nonempty set"));
    }
    let violating = results
        .iter()
        .filter(|r| r.params.violates(bounds))
        .count();
    Ok(violating as f64 / results.len() as f64)
}

/// Sensitivity (PI) of an agent trajectory to an ego plan: the L2 norm of
/// the planner interaction-cost gradient with respect to the agent's
/// waypoints, averaged over the aligned horizon.
pub fn sensitivity(agent: &[Vec2], ego_plan: &[Vec2]) -> f64 {
    let t = agent.len().min(ego_plan.len());
    if t == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..t {
        acc += interaction_potential_grad_mag(agent[i].dist(ego_plan[i]));
    }
    acc / t as f64
}

/// Minimum pointwise distance between two aligned trajectories.
fn trajectory_distance(a: &[Vec2], b: &[Vec2]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| p.dist(*q))
        .fold(f64::INFINITY, f64::min)
}

/// Mean PI of `adv` against every other trajectory within `rho`; 0 when
/// none is nearby.
pub fn aggregated_sensitivity(adv: &[Vec2], others: &[Vec<Vec2>], rho: f64) -> f64 {
    let mut acc = 0.0;
    let mut m = 0usize;
    for other in others {
        if trajectory_distance(adv, other) < rho {
            acc += sensitivity(adv, other);
            m += 1;
        }
    }
    if m == 0 {
        0.0
    } else {
        acc / m as f64
    }
}

/// Behavior-alteration proxy: aggregated sensitivity of the adversarial
/// trajectory minus the benign one (may be negative).
pub fn delta_sensitivity(
    benign: &[Vec2],
    adversarial: &[Vec2],
    others: &[Vec<Vec2>],
    rho: f64,
) -> f64 {
    aggregated_sensitivity(adversarial, others, rho) - aggregated_sensitivity(benign, others, rho)
}

/// Sensitivity-weighted mean; falls back to the unweighted mean (flagged)
/// when every weight is zero.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> (f64, bool) {
    debug_assert_eq!(values.len(), weights.len());
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        return (mean, true);
    }
    let acc: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    (acc / wsum, false)
}

/// Planning-aware metrics: per-agent values weighted by per-agent
/// sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanningAware {
    pub pi_ade: f64,
    pub pi_fde: f64,
    pub pi_mr: f64,
    pub pi_orr: f64,
    /// True when all sensitivities were zero and the unweighted mean was
    /// used.
    pub uniform_fallback: bool,
}

/// Compose the planning-aware metric family from per-agent displacement
/// errors, miss/off-road flags, and sensitivities.
pub fn planning_aware(
    errors: &[(f64, f64)],
    missed: &[bool],
    offroad: &[bool],
    sensitivities: &[f64],
) -> Result<PlanningAware> {
    let n = errors.len();
    if missed.len() != n || offroad.len() != n || sensitivities.len() != n {
        return Err(Error::invalid("planning_aware: length mismatch"));
    }
    let ades: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let fdes: Vec<f64> = errors.iter().map(|e| e.1).collect();
    let miss_v: Vec<f64> = missed.iter().map(|m| *m as u8 as f64).collect();
    let or_v: Vec<f64> = offroad.iter().map(|m| *m as u8 as f64).collect();
    let (pi_ade, f1) = weighted_mean(&ades, sensitivities);
    let (pi_fde, f2) = weighted_mean(&fdes, sensitivities);
    let (pi_mr, f3) = weighted_mean(&miss_v, sensitivities);
    let (pi_orr, f4) = weighted_mean(&or_v, sensitivities);
    Ok(PlanningAware {
        pi_ade,
        pi_fde,
        pi_mr,
        pi_orr,
        uniform_fallback: f1 || f2 || f3 || f4,
    })
}

/// Success degree of an attack: the mean relative increase over the four
/// metrics, clamped at zero. Metrics whose benign value is ~0 carry no
/// signal and are skipped.
pub fn success_degree(benign: &MetricSet, attacked: &MetricSet) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (b, a) in [
        (benign.ade, attacked.ade),
        (benign.fde, attacked.fde),
        (benign.mr, attacked.mr),
        (benign.orr, attacked.orr),
    ] {
        if b > 1e-12 {
            acc += ((a - b) / b).max(0.0);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Transfer rate: the target model's success degree relative to the
/// source model's, both evaluated on the same scene set.
pub fn transfer_rate(
    source_benign: &MetricSet,
    source_attacked: &MetricSet,
    target_benign: &MetricSet,
    target_attacked: &MetricSet,
) -> Result<f64> {
    let src = success_degree(source_benign, source_attacked);
    if src <= 0.0 {
        return Err(Error::UndefinedTransfer);
    }
    let tgt = success_degree(target_benign, target_attacked);
    Ok(tgt / src)
}

/// Prediction-change split: mean displacement between the benign and
/// adversarial best-mode predictions for the adversarial agent (motion)
/// and averaged over all other agents (interaction; `None` for
/// single-agent scenes).
pub fn motion_interaction_split(
    adv: usize,
    benign: &Prediction,
    adversarial: &Prediction,
) -> Result<(f64, Option<f64>)> {
    let n = benign.n_agents();
    if adversarial.n_agents() != n || adv >= n {
        return Err(Error::invalid("motion_interaction_split: shape mismatch"));
    }
    let kb = benign.best_mode();
    let ka = adversarial.best_mode();
    let change = |i: usize| -> f64 {
        let t = benign.modes[kb][i].len().min(adversarial.modes[ka][i].len());
        (0..t)
            .map(|s| benign.modes[kb][i][s].dist(adversarial.modes[ka][i][s]))
            .sum::<f64>()
            / t.max(1) as f64
    };
    let motion = change(adv);
    let interaction = if n == 1 {
        None
    } else {
        Some(
            (0..n)
                .filter(|i| *i != adv)
                .map(change)
                .sum::<f64>()
                / (n - 1) as f64,
        )
    };
    Ok((motion, interaction))
}

/// Scene-level aggregate speed and absolute curvature, from the inverse
/// dynamics of every agent's history, averaged over agents.
pub fn scene_stats(scene: &Scene) -> Result<(f64, f64)> {
    if scene.history_len() < 3 {
        return Err(Error::invalid("scene_stats needs histories of >= 3 points"));
    }
    let mut speed = 0.0;
    let mut curvature = 0.0;
    for a in &scene.agents {
        let params = inverse(&a.history, scene.dt)?;
        speed += params.v.iter().map(|v| v.abs()).sum::<f64>() / params.v.len() as f64;
        curvature +=
            params.kappa.iter().map(|k| k.abs()).sum::<f64>() / params.kappa.len().max(1) as f64;
    }
    let n = scene.n_agents() as f64;
    Ok((speed / n, curvature / n))
}
