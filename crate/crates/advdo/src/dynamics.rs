//! Differentiable kinematic bicycle model.
//!
//! Forward rollout integrates the discrete recurrence
//!
//! ```text
//! v'      = v + a * dt
//! dtheta  = v * kappa            (heading rate, rad/s)
//! theta'  = theta + dtheta * dt
//! p'      = p + v * (cos theta, sin theta) * dt
//! ```
//!
//! driven by control actions `u = {a, kappa}`. [`inverse`] recovers the
//! per-step dynamic parameters `{theta, v, a, kappa}` from a bare position
//! sequence, [`rollout_vjp`] / [`rollout_pullback`] provide exact
//! reverse-mode derivatives of the rollout, and [`l_dyn`] is the soft
//! penalty that keeps parameters inside hard physical bounds. All
//! functions are pure; nothing here holds state.

use crate::error::{Error, Result};
use crate::vec2::Vec2;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// Wrap an angle to `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta % TAU;
    if a <= -PI {
        a += TAU;
    } else if a > PI {
        a -= TAU;
    }
    a
}

/// Smallest signed angle taking `from` to `to`, in `(-pi, pi]`.
pub fn angle_diff(to: f64, from: f64) -> f64 {
    normalize_angle(to - from)
}

/// Speed below which curvature is unobservable; `inverse` zeroes kappa and
/// flags the step instead of dividing by a vanishing speed.
pub const V_EPS: f64 = 0.05;

/// Vehicle kinematic state: position, heading, longitudinal speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynState {
    /// Position in meters.
    pub position: Vec2,
    /// Heading in radians, normalized to `(-pi, pi]`.
    pub heading: f64,
    /// Speed in m/s.
    pub speed: f64,
}

impl DynState {
    /// Build a state, normalizing the heading. Errors on non-finite input.
    pub fn new(position: Vec2, heading: f64, speed: f64) -> Result<Self> {
        if !position.is_finite() || !heading.is_finite() || !speed.is_finite() {
            return Err(Error::invalid("DynState fields must be finite"));
        }
        Ok(DynState {
            position,
            heading: normalize_angle(heading),
            speed,
        })
    }
}

/// One control action: longitudinal acceleration and path curvature.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlAction {
    /// Acceleration in m/s^2.
    pub accel: f64,
    /// Curvature in 1/m (inverse turning radius, positive = left).
    pub curvature: f64,
}

impl ControlAction {
    pub fn new(accel: f64, curvature: f64) -> Self {
        ControlAction { accel, curvature }
    }

    pub fn is_finite(&self) -> bool {
        self.accel.is_finite() && self.curvature.is_finite()
    }
}

/// A uniformly sampled sequence of control actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    /// Time step between actions, seconds (> 0).
    pub dt: f64,
    /// Ordered actions; `actions[t]` drives the transition `t -> t+1`.
    pub actions: Vec<ControlAction>,
}

impl ControlSequence {
    pub fn new(dt: f64, actions: Vec<ControlAction>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("control sequence dt must be positive"));
        }
        if actions.is_empty() {
            return Err(Error::invalid("control sequence must be nonempty"));
        }
        if actions.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("control actions must be finite"));
        }
        Ok(ControlSequence { dt, actions })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Hard lower/upper bounds for each dynamic parameter, SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicBounds {
    /// Speed bounds, m/s.
    pub v: (f64, f64),
    /// Acceleration bounds, m/s^2.
    pub a: (f64, f64),
    /// Curvature bounds, 1/m.
    pub kappa: (f64, f64),
    /// Heading-rate bounds, rad/s.
    pub dtheta: (f64, f64),
}

impl DynamicBounds {
    pub fn new(v: (f64, f64), a: (f64, f64), kappa: (f64, f64), dtheta: (f64, f64)) -> Result<Self> {
        for (name, (lb, ub)) in [("v", v), ("a", a), ("kappa", kappa), ("dtheta", dtheta)] {
            if !(lb.is_finite() && ub.is_finite() && lb < ub) {
                return Err(Error::invalid(format!(
                    "bounds for {name} must satisfy lb < ub, got ({lb}, {ub})"
                )));
            }
        }
        Ok(DynamicBounds { v, a, kappa, dtheta })
    }
}

impl Default for DynamicBounds {
    /// Road-vehicle envelope: |a| <= 10 m/s^2, v in [0, 40] m/s,
    /// |kappa| <= 0.3 1/m, |dtheta| <= 1.0 rad/s.
    fn default() -> Self {
        DynamicBounds {
            v: (0.0, 40.0),
            a: (-10.0, 10.0),
            kappa: (-0.3, 0.3),
            dtheta: (-1.0, 1.0),
        }
    }
}

/// Per-step dynamic parameters of a trajectory with `L` positions.
///
/// Canonical alignment: `theta` and `v` describe the `L-1` displacements;
/// `a`, `kappa`, and `dtheta` are one shorter again (`L-2`), being
/// differences of consecutive displacement quantities. `slow_steps` flags
/// the indices where the speed fell below [`V_EPS`] and kappa was zeroed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynParams {
    /// Heading of each displacement, rad, length `L-1`.
    pub theta: Vec<f64>,
    /// Speed over each displacement, m/s, length `L-1`.
    pub v: Vec<f64>,
    /// Acceleration, m/s^2, length `L-2`.
    pub a: Vec<f64>,
    /// Curvature, 1/m, length `L-2`.
    pub kappa: Vec<f64>,
    /// Heading rate, rad/s, length `L-2`.
    pub dtheta: Vec<f64>,
    /// Indices (into `kappa`) where the zero-speed rule fired.
    pub slow_steps: Vec<usize>,
}

impl DynParams {
    /// Extract the canonical parameter alignment from a forward rollout.
    ///
    /// The last control's `a`/`kappa` only influence the speed and heading
    /// *after* the final position and are therefore not part of the
    /// observable parameters; they are truncated to match [`inverse`].
    pub fn from_rollout(states: &[DynState], controls: &ControlSequence) -> DynParams {
        let l = states.len();
        debug_assert_eq!(l, controls.len() + 1);
        let theta: Vec<f64> = states[..l - 1].iter().map(|s| s.heading).collect();
        let v: Vec<f64> = states[..l - 1].iter().map(|s| s.speed).collect();
        let a: Vec<f64> = controls.actions[..l.saturating_sub(2)]
            .iter()
            .map(|u| u.accel)
            .collect();
        let kappa: Vec<f64> = controls.actions[..l.saturating_sub(2)]
            .iter()
            .map(|u| u.curvature)
            .collect();
        let dtheta: Vec<f64> = (0..l.saturating_sub(2)).map(|t| v[t] * kappa[t]).collect();
        DynParams {
            theta,
            v,
            a,
            kappa,
            dtheta,
            slow_steps: Vec::new(),
        }
    }

    /// True when any parameter lies outside `bounds`.
    pub fn violates(&self, bounds: &DynamicBounds) -> bool {
        let out = |xs: &[f64], (lb, ub): (f64, f64)| xs.iter().any(|&x| x < lb || x > ub);
        out(&self.v, bounds.v)
            || out(&self.a, bounds.a)
            || out(&self.kappa, bounds.kappa)
            || out(&self.dtheta, bounds.dtheta)
    }
}

/// Roll the bicycle model forward from `s0` under `u`.
///
/// Returns `|u| + 1` states beginning with `s0`. Deterministic and pure.
pub fn rollout(s0: &DynState, u: &ControlSequence) -> Result<Vec<DynState>> {
    if !s0.position.is_finite() || !s0.heading.is_finite() || !s0.speed.is_finite() {
        return Err(Error::invalid("rollout start state must be finite"));
    }
    if u.actions.iter().any(|a| !a.is_finite()) {
        return Err(Error::invalid("rollout controls must be finite"));
    }
    let dt = u.dt;
    let mut states = Vec::with_capacity(u.len() + 1);
    states.push(*s0);
    let mut cur = *s0;
    for act in &u.actions {
        let next = DynState {
            position: cur.position + cur.speed * dt * Vec2::from_angle(cur.heading),
            heading: normalize_angle(cur.heading + cur.speed * act.curvature * dt),
            speed: cur.speed + act.accel * dt,
        };
        states.push(next);
        cur = next;
    }
    Ok(states)
}

/// Roll the bicycle model *backward in time* from an anchored final state.
///
/// `anchor` is the state at the last index; `u.actions[t]` still drives the
/// forward transition `t -> t+1`. The recurrence is the exact algebraic
/// inverse of [`rollout`]:
///
/// ```text
/// v_t     = v_{t+1} - a_t * dt
/// theta_t = theta_{t+1} - v_t * kappa_t * dt
/// p_t     = p_{t+1} - v_t * (cos theta_t, sin theta_t) * dt
/// ```
///
/// Returns `|u| + 1` states in forward time order, ending with `anchor`.
pub fn reverse_rollout(anchor: &DynState, u: &ControlSequence) -> Result<Vec<DynState>> {
    if u.actions.iter().any(|a| !a.is_finite()) {
        return Err(Error::invalid("reverse rollout controls must be finite"));
    }
    let dt = u.dt;
    let n = u.len();
    let mut states = vec![*anchor; n + 1];
    for t in (0..n).rev() {
        let next = states[t + 1];
        let act = u.actions[t];
        let v = next.speed - act.accel * dt;
        let theta = normalize_angle(next.heading - v * act.curvature * dt);
        let p = next.position - v * dt * Vec2::from_angle(theta);
        states[t] = DynState {
            position: p,
            heading: theta,
            speed: v,
        };
    }
    Ok(states)
}

/// Recover per-step dynamic parameters from a position sequence.
///
/// Heading is the quadrant-aware angle of each displacement. Where the
/// speed falls below [`V_EPS`] the curvature is set to 0 and the step index
/// is recorded in `slow_steps`.
pub fn inverse(positions: &[Vec2], dt: f64) -> Result<DynParams> {
    if positions.len() < 3 {
        return Err(Error::invalid(format!(
            "inverse needs at least 3 positions, got {}",
            positions.len()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid("inverse dt must be positive"));
    }
    if positions.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("inverse positions must be finite"));
    }
    let l = positions.len();
    let mut theta = Vec::with_capacity(l - 1);
    let mut v = Vec::with_capacity(l - 1);
    let mut last_theta = 0.0;
    for t in 0..l - 1 {
        let d = positions[t + 1] - positions[t];
        let speed = d.norm() / dt;
        // A stationary segment has no displacement direction; carry the
        // previous heading so dtheta stays well defined.
        let th = if speed > V_EPS { d.angle() } else { last_theta };
        theta.push(th);
        v.push(speed);
        last_theta = th;
    }
    let mut a = Vec::with_capacity(l - 2);
    let mut kappa = Vec::with_capacity(l - 2);
    let mut dtheta = Vec::with_capacity(l - 2);
    let mut slow_steps = Vec::new();
    for t in 0..l - 2 {
        a.push((v[t + 1] - v[t]) / dt);
        let rate = angle_diff(theta[t + 1], theta[t]) / dt;
        dtheta.push(rate);
        if v[t] > V_EPS {
            kappa.push(rate / v[t]);
        } else {
            kappa.push(0.0);
            slow_steps.push(t);
        }
    }
    Ok(DynParams {
        theta,
        v,
        a,
        kappa,
        dtheta,
        slow_steps,
    })
}

/// Cotangent on one rollout state, matching [`DynState`] fields.
#[derive(Debug, Clone, Copy, Default)]
pub struct StateCotangent {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
}

impl StateCotangent {
    pub fn position_only(position: Vec2) -> Self {
        StateCotangent {
            position,
            heading: 0.0,
            speed: 0.0,
        }
    }
}

/// Gradient of a rollout-composed scalar with respect to controls and the
/// start (or anchor) state.
#[derive(Debug, Clone)]
pub struct RolloutGrad {
    /// d(loss)/d(action[t]), same length as the control sequence.
    pub controls: Vec<ControlAction>,
    /// d(loss)/d(anchor state).
    pub state: StateCotangent,
}

/// Exact reverse-mode derivative of [`rollout`].
///
/// `cotangents[t]` is d(loss)/d(state t) for each of the `|u|+1` output
/// states; the result is linear in the cotangents.
pub fn rollout_vjp(
    s0: &DynState,
    u: &ControlSequence,
    cotangents: &[StateCotangent],
) -> Result<RolloutGrad> {
    let states = rollout(s0, u)?;
    if cotangents.len() != states.len() {
        return Err(Error::invalid(format!(
            "cotangent length {} does not match rollout length {}",
            cotangents.len(),
            states.len()
        )));
    }
    let dt = u.dt;
    let n = u.len();
    let mut grads = vec![ControlAction::default(); n];
    // Running cotangent on the state being swept backward.
    let mut cp = cotangents[n].position;
    let mut cth = cotangents[n].heading;
    let mut cv = cotangents[n].speed;
    for t in (0..n).rev() {
        let s = states[t];
        let act = u.actions[t];
        let (sin_t, cos_t) = s.heading.sin_cos();
        // Transition t -> t+1:
        //   p' = p + v*dt*(cos, sin);  theta' = theta + v*kappa*dt;  v' = v + a*dt
        grads[t].accel = cv * dt;
        grads[t].curvature = cth * s.speed * dt;
        let cv_new = cv + cth * act.curvature * dt + dt * (cp.x * cos_t + cp.y * sin_t);
        let cth_new = cth + s.speed * dt * (-cp.x * sin_t + cp.y * cos_t);
        cv = cv_new + cotangents[t].speed;
        cth = cth_new + cotangents[t].heading;
        cp += cotangents[t].position;
    }
    Ok(RolloutGrad {
        controls: grads,
        state: StateCotangent {
            position: cp,
            heading: cth,
            speed: cv,
        },
    })
}

/// Position-only pullback through [`rollout`].
///
/// `position_cotangents[t]` is d(loss)/d(position t); heading and speed
/// cotangents are zero. Returns the gradient with respect to the controls
/// and the start state.
pub fn rollout_pullback(
    s0: &DynState,
    u: &ControlSequence,
    position_cotangents: &[Vec2],
) -> Result<RolloutGrad> {
    let cots: Vec<StateCotangent> = position_cotangents
        .iter()
        .map(|&p| StateCotangent::position_only(p))
        .collect();
    rollout_vjp(s0, u, &cots)
}

/// Exact reverse-mode derivative of [`reverse_rollout`].
///
/// Cotangents are given per output state in forward time order (index
/// `|u|` is the anchor). Returns gradients on the controls and the anchor.
pub fn reverse_rollout_vjp(
    anchor: &DynState,
    u: &ControlSequence,
    cotangents: &[StateCotangent],
) -> Result<RolloutGrad> {
    let states = reverse_rollout(anchor, u)?;
    if cotangents.len() != states.len() {
        return Err(Error::invalid(format!(
            "cotangent length {} does not match rollout length {}",
            cotangents.len(),
            states.len()
        )));
    }
    let dt = u.dt;
    let n = u.len();
    let mut grads = vec![ControlAction::default(); n];
    // The reverse recurrence computes state t from state t+1, sweeping t
    // from n-1 down to 0; its adjoint therefore sweeps t upward, carrying
    // the cotangent of the state about to be consumed.
    let mut cp = cotangents[0].position;
    let mut cth = cotangents[0].heading;
    let mut cv = cotangents[0].speed;
    for t in 0..n {
        let s = states[t];
        let act = u.actions[t];
        let (sin_t, cos_t) = s.heading.sin_cos();
        // p_t = p_{t+1} - v_t*dt*(cos theta_t, sin theta_t)
        let mut cth_total = cth + (-s.speed * dt) * (-cp.x * sin_t + cp.y * cos_t);
        let mut cv_total = cv - dt * (cp.x * cos_t + cp.y * sin_t);
        // theta_t = theta_{t+1} - v_t*kappa_t*dt
        grads[t].curvature = -s.speed * dt * cth_total;
        cv_total += -act.curvature * dt * cth_total;
        // v_t = v_{t+1} - a_t*dt
        grads[t].accel = -dt * cv_total;
        // Hand off to state t+1, folding in its direct cotangent.
        cp += cotangents[t + 1].position;
        cth_total += cotangents[t + 1].heading;
        cv_total += cotangents[t + 1].speed;
        cth = cth_total;
        cv = cv_total;
    }
    Ok(RolloutGrad {
        controls: grads,
        state: StateCotangent {
            position: cp,
            heading: cth,
            speed: cv,
        },
    })
}

/// The soft-clip term `z - sigmoid(z) + 0.5`.
///
/// Smooth, strictly increasing, zero at `z = 0`; close to linear for large
/// `z`. Shared by the dynamic-bound and deviation penalties.
pub fn soft_clip(z: f64) -> f64 {
    z - sigmoid(z) + 0.5
}

/// Derivative of [`soft_clip`]: `1 - sigmoid'(z)`, in `[0.75, 1)`.
pub fn soft_clip_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    1.0 - s * (1.0 - s)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Normalized bound violation of `x` against `(lb, ub)`: 0 inside the
/// band, `(x - ub)/(ub - lb)` above it, `(lb - x)/(ub - lb)` below.
pub fn bound_violation(x: f64, (lb, ub): (f64, f64)) -> f64 {
    let w = ub - lb;
    if x > ub {
        (x - ub) / w
    } else if x < lb {
        (lb - x) / w
    } else {
        0.0
    }
}

/// Signed derivative of [`bound_violation`] with respect to `x` (0 inside
/// the band, +-1/(ub-lb) outside).
fn bound_violation_grad(x: f64, (lb, ub): (f64, f64)) -> f64 {
    let w = ub - lb;
    if x > ub {
        1.0 / w
    } else if x < lb {
        -1.0 / w
    } else {
        0.0
    }
}

/// Soft dynamic-bound loss: sum over parameters and timesteps of
/// `soft_clip(z)` where `z` is the normalized violation of the parameter
/// against its bound band. Exactly 0 when every parameter is in bounds,
/// strictly increasing in each violation.
pub fn l_dyn(params: &DynParams, bounds: &DynamicBounds) -> f64 {
    let term = |xs: &[f64], b: (f64, f64)| -> f64 {
        xs.iter().map(|&x| soft_clip(bound_violation(x, b))).sum()
    };
    term(&params.v, bounds.v)
        + term(&params.a, bounds.a)
        + term(&params.kappa, bounds.kappa)
        + term(&params.dtheta, bounds.dtheta)
}

/// d[`l_dyn`]/dx for one parameter value.
pub fn l_dyn_term_grad(x: f64, b: (f64, f64)) -> f64 {
    soft_clip_grad(bound_violation(x, b)) * bound_violation_grad(x, b)
}
