//! Planners and closed-loop simulation.
//!
//! Two planners consume predictions: a rule-based lane follower that
//! brakes for predicted blockers, and a conformal-lattice planner that
//! samples laterally offset candidate paths, scores them against
//! predictions and the map, and tracks the winner with a short-horizon
//! MPC over the bicycle model. [`simulate`] rolls an ego vehicle through
//! a logged scene in open or closed loop, optionally substituting the
//! adversarial agent's history with a sequential attack before every
//! prediction.

pub mod geometry;

pub use geometry::{Lane, MapModel, Obb, Polygon};

use crate::attack::{attack_sequential, AttackConfig};
use crate::dynamics::{
    normalize_angle, rollout, rollout_vjp, ControlAction, ControlSequence, DynState,
    DynamicBounds, StateCotangent,
};
use crate::error::{Error, Result};
use crate::predict::PredictionModel;
use crate::recon::ReconConfig;
use crate::scene::{Footprint, Scene};
use crate::vec2::Vec2;
use serde::{Deserialize, Serialize};

/// Which planner drives the ego vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlannerKind {
    RuleBased,
    LatticeMpc,
}

impl std::str::FromStr for PlannerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rule" | "rule-based" => Ok(PlannerKind::RuleBased),
            "mpc" | "lattice-mpc" => Ok(PlannerKind::LatticeMpc),
            other => Err(Error::Config(format!("unknown planner: {other}"))),
        }
    }
}

/// A planned ego trajectory over a horizon, representable by in-bound
/// controls by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Plan {
    /// Timestamped states; `states[0]` is the current state.
    pub states: Vec<DynState>,
    pub dt: f64,
    /// The in-bound controls whose rollout reproduces `states`.
    pub controls: ControlSequence,
    pub planner: PlannerKind,
    /// Planner-internal cost of the selected trajectory.
    pub cost: f64,
    /// Set when every lattice candidate collided and the planner fell
    /// back to emergency braking.
    pub emergency: bool,
}

/// Interaction potential between an ego plan point and a predicted agent
/// point: `1/(1 + d)`. Shared by the lattice collision cost and the
/// sensitivity metric.
pub fn interaction_potential(dist: f64) -> f64 {
    1.0 / (1.0 + dist)
}

/// Magnitude of the potential's derivative with respect to the agent
/// point: `1/(1 + d)^2`.
pub fn interaction_potential_grad_mag(dist: f64) -> f64 {
    let s = 1.0 + dist;
    1.0 / (s * s)
}

/// Collision-avoidance cost of an ego trajectory against predicted agent
/// trajectories, and its analytic gradient with respect to the agent
/// waypoints.
pub fn interaction_cost(ego: &[Vec2], agent: &[Vec2]) -> f64 {
    ego.iter()
        .zip(agent)
        .map(|(e, a)| interaction_potential(e.dist(*a)))
        .sum()
}

/// d[`interaction_cost`]/d(agent waypoint).
pub fn interaction_cost_grad(ego: &[Vec2], agent: &[Vec2]) -> Vec<Vec2> {
    ego.iter()
        .zip(agent)
        .map(|(e, a)| {
            let d = a.dist(*e);
            if d < 1e-12 {
                Vec2::ZERO
            } else {
                (*a - *e) * (-1.0 / ((1.0 + d) * (1.0 + d) * d))
            }
        })
        .collect()
}

/// Longitudinal acceleration command: P-control toward the cruise speed,
/// overridden by braking when a predicted blocker's time-to-collision
/// falls under 3 s.
fn speed_command(v: f64, cruise: f64, gap: Option<f64>, bounds: &DynamicBounds) -> f64 {
    const TTC_TRIGGER: f64 = 3.0;
    const COMFORT_BRAKE: f64 = 3.0;
    if let Some(gap) = gap {
        if gap <= 0.5 {
            return bounds.a.0.max(-8.0);
        }
        let ttc = gap / v.max(0.1);
        if ttc < TTC_TRIGGER {
            let required = v * v / (2.0 * gap.max(0.1));
            return (-COMFORT_BRAKE.max(required)).max(bounds.a.0);
        }
    }
    ((cruise - v).clamp(-2.0, 1.5)).clamp(bounds.a.0, bounds.a.1)
}

/// Distance along the path to the nearest predicted space-time conflict
/// ahead of the ego, minus a vehicle-length margin.
///
/// A predicted position blocks when it occupies the corridor ahead *at
/// about the time the ego would arrive there*: a same-speed leader keeps
/// clearing each cell before the ego reaches it and never triggers, a
/// stopped or crossing vehicle does. `lateral_of` maps a projected
/// (s, lateral) pair to its offset from the intended path, letting the
/// lattice planner reuse the rule with offset candidates.
fn blocking_gap(
    lane: &Lane,
    corridor_half_width: f64,
    s_ego: f64,
    v_ego: f64,
    plan_time: f64,
    dt: f64,
    predictions: &[Vec<Vec2>],
    lateral_of: &dyn Fn(f64, f64) -> f64,
) -> Option<f64> {
    const MARGIN: f64 = 5.0;
    const TIME_MARGIN: f64 = 1.2;
    let mut best: Option<f64> = None;
    for traj in predictions {
        for (tau, p) in traj.iter().enumerate() {
            let abs_time = (tau + 1) as f64 * dt;
            if abs_time + TIME_MARGIN < plan_time {
                continue;
            }
            let (s, lat) = lane.project(*p);
            if lateral_of(s, lat).abs() > corridor_half_width || s <= s_ego {
                continue;
            }
            let t_reach = (s - s_ego) / v_ego.max(0.5) + plan_time;
            // The final predicted position persists past the horizon, so a
            // stopped vehicle keeps blocking arbitrarily late arrivals.
            let conflict = if tau + 1 == traj.len() {
                t_reach >= abs_time - TIME_MARGIN
            } else {
                (t_reach - abs_time).abs() <= TIME_MARGIN
            };
            if conflict {
                let gap = s - s_ego - MARGIN;
                if best.map_or(true, |b| gap < b) {
                    best = Some(gap);
                }
            }
        }
    }
    best
}

fn clamp_action(a: f64, k: f64, v: f64, bounds: &DynamicBounds) -> ControlAction {
    let mut kap = k.clamp(bounds.kappa.0, bounds.kappa.1);
    // Respect the heading-rate bound at the current speed.
    if v > 0.1 {
        let k_rate = bounds.dtheta.1 / v;
        kap = kap.clamp(-k_rate, k_rate);
    }
    ControlAction::new(a.clamp(bounds.a.0, bounds.a.1), kap)
}

/// Pure-pursuit curvature toward a target point.
fn pursuit_curvature(state: &DynState, target: Vec2) -> f64 {
    let to_target = target - state.position;
    let dist = to_target.norm();
    if dist < 1e-6 {
        return 0.0;
    }
    let alpha = normalize_angle(to_target.angle() - state.heading);
    2.0 * alpha.sin() / dist
}

/// Track the lane centerline, braking behind predicted blockers.
///
/// The plan follows the middle of the lane by pure pursuit and never
/// commands a lateral offset; the speed profile stops the ego behind any
/// predicted agent blocking the lane within a 3 s time-to-collision.
pub fn rule_planner(
    ego: DynState,
    lane: &Lane,
    predictions: &[Vec<Vec2>],
    horizon_steps: usize,
    dt: f64,
    cruise: f64,
    bounds: &DynamicBounds,
) -> Result<Plan> {
    lane.validate()?;
    let (_, lat) = lane.project(ego.position);
    if lat.abs() > lane.width * 2.0 {
        return Err(Error::Planner(format!(
            "ego is {:.1} m from the lane, no association",
            lat.abs()
        )));
    }
    let mut actions = Vec::with_capacity(horizon_steps);
    let mut state = ego;
    for t in 0..horizon_steps {
        let (s, _) = lane.project(state.position);
        let lookahead = (state.speed * 0.8).max(3.0);
        let target = lane.point_at(s + lookahead);
        let kappa = pursuit_curvature(&state, target);
        let gap = blocking_gap(
            lane,
            lane.width / 2.0 + 0.3,
            s,
            state.speed,
            t as f64 * dt,
            dt,
            predictions,
            &|_, lat| lat,
        );
        let accel = speed_command(state.speed, cruise, gap, bounds);
        // Never reverse: stop at zero.
        let accel = if state.speed + accel * dt < 0.0 {
            -state.speed / dt
        } else {
            accel
        };
        let act = clamp_action(accel, kappa, state.speed, bounds);
        actions.push(act);
        state = DynState {
            position: state.position + state.speed * dt * Vec2::from_angle(state.heading),
            heading: normalize_angle(state.heading + state.speed * act.curvature * dt),
            speed: state.speed + act.accel * dt,
        };
    }
    let controls = ControlSequence::new(dt, actions)?;
    let states = rollout(&ego, &controls)?;
    Ok(Plan {
        states,
        dt,
        controls,
        planner: PlannerKind::RuleBased,
        cost: 0.0,
        emergency: false,
    })
}

/// Lateral offsets of the conformal lattice, meters.
const LATTICE_OFFSETS: [f64; 7] = [0.0, 0.75, -0.75, 1.5, -1.5, 2.25, -2.25];
/// Lateral transition length of a candidate, meters.
const TRANSITION_LEN: f64 = 20.0;

/// A candidate path: the lane centerline shifted laterally with a cubic
/// blend from the ego's current offset to the target offset.
struct CandidatePath<'a> {
    lane: &'a Lane,
    s0: f64,
    d0: f64,
    target: f64,
}

impl CandidatePath<'_> {
    fn offset_at(&self, s: f64) -> f64 {
        let xi = ((s - self.s0) / TRANSITION_LEN).clamp(0.0, 1.0);
        let blend = 3.0 * xi * xi - 2.0 * xi * xi * xi;
        self.d0 + (self.target - self.d0) * blend
    }

    fn point_at(&self, s: f64) -> Vec2 {
        self.lane.point_at(s) + self.lane.normal_at(s) * self.offset_at(s)
    }
}

/// Sample laterally offset candidate paths conformal to the reference
/// lane, score them by collision, off-road, offset, and effort costs,
/// and track the best with a short-horizon MPC. Falls back to an
/// emergency-brake plan (flagged) when every candidate collides.
#[allow(clippy::too_many_arguments)]
pub fn lattice_mpc_planner(
    ego: DynState,
    map: &MapModel,
    predictions: &[Vec<Vec2>],
    horizon_steps: usize,
    dt: f64,
    cruise: f64,
    bounds: &DynamicBounds,
) -> Result<Plan> {
    map.validate()?;
    let Some((lane_idx, _)) = map.nearest_lane(ego.position) else {
        return Err(Error::Planner("map has no lanes".into()));
    };
    let lane = &map.lanes[lane_idx];
    let (s0, d0) = lane.project(ego.position);

    const W_COLLISION: f64 = 50.0;
    const W_OFFROAD: f64 = 6.0;
    const W_OFFSET: f64 = 0.5;
    const W_EFFORT: f64 = 0.2;
    const COLLISION_RADIUS: f64 = 2.6;

    let mut best: Option<(f64, &f64, CandidatePath)> = None;
    for target in &LATTICE_OFFSETS {
        let cand = CandidatePath {
            lane,
            s0,
            d0,
            target: *target,
        };
        let mut cost = W_OFFSET * target.abs() + W_EFFORT * (target - d0).abs();
        let mut colliding = false;
        let mut s = s0;
        for t in 0..horizon_steps {
            s += ego.speed.max(1.0) * dt;
            let p = cand.point_at(s);
            if !map.is_drivable(p) {
                cost += W_OFFROAD;
            }
            for traj in predictions {
                if traj.is_empty() {
                    continue;
                }
                let a = traj[t.min(traj.len() - 1)];
                let d = p.dist(a);
                cost += W_COLLISION * interaction_potential(d) / horizon_steps as f64;
                if d < COLLISION_RADIUS {
                    colliding = true;
                }
            }
        }
        if colliding {
            continue;
        }
        if best.as_ref().map_or(true, |(c, _, _)| cost < *c) {
            best = Some((cost, target, cand));
        }
    }

    let Some((cand_cost, _, cand)) = best else {
        // Everything collides: brake hard along the current heading while
        // holding the lane direction.
        let mut actions = Vec::with_capacity(horizon_steps);
        let mut state = ego;
        for _ in 0..horizon_steps {
            let accel = if state.speed + bounds.a.0.max(-6.0) * dt < 0.0 {
                -state.speed / dt
            } else {
                bounds.a.0.max(-6.0)
            };
            let (s, _) = lane.project(state.position);
            let target = lane.point_at(s + 4.0);
            let act = clamp_action(accel, pursuit_curvature(&state, target), state.speed, bounds);
            actions.push(act);
            state = DynState {
                position: state.position + state.speed * dt * Vec2::from_angle(state.heading),
                heading: normalize_angle(state.heading + state.speed * act.curvature * dt),
                speed: state.speed + act.accel * dt,
            };
        }
        let controls = ControlSequence::new(dt, actions)?;
        let states = rollout(&ego, &controls)?;
        return Ok(Plan {
            states,
            dt,
            controls,
            planner: PlannerKind::LatticeMpc,
            cost: f64::INFINITY,
            emergency: true,
        });
    };

    // Speed profile along the selected candidate with the same
    // time-to-collision braking rule as the rule planner, except the
    // corridor follows the candidate's lateral offset.
    let mut v = ego.speed;
    let mut s = s0;
    let mut refs = Vec::with_capacity(horizon_steps);
    let mut speeds = Vec::with_capacity(horizon_steps);
    for t in 0..horizon_steps {
        let gap = blocking_gap(
            lane,
            1.9,
            s,
            v,
            t as f64 * dt,
            dt,
            predictions,
            &|sa, lat| lat - cand.offset_at(sa),
        );
        let a = speed_command(v, cruise, gap, bounds);
        let a = if v + a * dt < 0.0 { -v / dt } else { a };
        v += a * dt;
        s += v.max(0.0) * dt;
        refs.push(cand.point_at(s));
        speeds.push(v.max(0.0));
    }

    // Initial controls: pure pursuit along the reference points. The
    // pursued point is the first reference at a speed-scaled lookahead;
    // chasing the per-step reference directly blows the curvature up when
    // the speed profile brakes and the references bunch at the ego.
    let mut actions = Vec::with_capacity(horizon_steps);
    let mut state = ego;
    for t in 0..horizon_steps {
        let lookahead = (state.speed * 0.8).max(3.0);
        let target = refs[t..]
            .iter()
            .find(|r| r.dist(state.position) >= lookahead)
            .copied()
            .unwrap_or_else(|| cand.point_at(lane.project(state.position).0 + lookahead));
        let kappa = pursuit_curvature(&state, target);
        let accel = (speeds[t] - state.speed) / dt;
        let act = clamp_action(accel, kappa, state.speed, bounds);
        actions.push(act);
        state = DynState {
            position: state.position + state.speed * dt * Vec2::from_angle(state.heading),
            heading: normalize_angle(state.heading + state.speed * act.curvature * dt),
            speed: state.speed + act.accel * dt,
        };
    }
    let mut controls = ControlSequence::new(dt, actions)?;

    // Two refinement sweeps: signed-gradient nudges on the tracking cost,
    // re-clamped against each step's actual speed so the heading-rate
    // bound holds, accepted only on improvement.
    let tracking_cost = |u: &ControlSequence| -> Result<(f64, Vec<ControlAction>)> {
        let states = rollout(&ego, u)?;
        let mut cost = 0.0;
        let mut cots = vec![StateCotangent::default(); states.len()];
        for t in 0..horizon_steps {
            let diff = states[t + 1].position - refs[t];
            cost += diff.norm_sq();
            cots[t + 1].position += diff * 2.0;
            let dv = states[t + 1].speed - speeds[t];
            cost += 0.1 * dv * dv;
            cots[t + 1].speed += 0.2 * dv;
        }
        for act in &u.actions {
            cost += 0.01 * act.accel * act.accel + 1.0 * act.curvature * act.curvature;
        }
        let grad = rollout_vjp(&ego, u, &cots)?;
        let mut g = grad.controls;
        for (gi, act) in g.iter_mut().zip(&u.actions) {
            gi.accel += 0.02 * act.accel;
            gi.curvature += 2.0 * act.curvature;
        }
        Ok((cost, g))
    };
    // Rebuild a control sequence stepwise so every action is clamped
    // against the speed it acts at.
    let rebuild = |deltas: &[ControlAction], base: &ControlSequence| -> Result<ControlSequence> {
        let mut state = ego;
        let mut actions = Vec::with_capacity(base.len());
        for (act, d) in base.actions.iter().zip(deltas) {
            let clamped = clamp_action(act.accel + d.accel, act.curvature + d.curvature, state.speed, bounds);
            actions.push(clamped);
            state = DynState {
                position: state.position + state.speed * dt * Vec2::from_angle(state.heading),
                heading: normalize_angle(state.heading + state.speed * clamped.curvature * dt),
                speed: state.speed + clamped.accel * dt,
            };
        }
        ControlSequence::new(dt, actions)
    };
    let (mut cost, mut grad) = tracking_cost(&controls)?;
    for _ in 0..2 {
        let mut step = (0.3, 0.01);
        for _ in 0..4 {
            let deltas: Vec<ControlAction> = grad
                .iter()
                .map(|g| ControlAction::new(-step.0 * g.accel.signum(), -step.1 * g.curvature.signum()))
                .collect();
            let cand_u = rebuild(&deltas, &controls)?;
            let (c2, g2) = tracking_cost(&cand_u)?;
            if c2 <= cost {
                controls = cand_u;
                cost = c2;
                grad = g2;
                break;
            }
            step = (step.0 * 0.5, step.1 * 0.5);
        }
    }

    let states = rollout(&ego, &controls)?;
    Ok(Plan {
        states,
        dt,
        controls,
        planner: PlannerKind::LatticeMpc,
        cost: cand_cost + cost,
        emergency: false,
    })
}

/// A collision between the ego and a replayed agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionEvent {
    /// Executed simulation step (1-based: step 1 is the first motion).
    pub step: usize,
    pub agent: String,
}

/// A replayed (logged) agent for event detection.
pub struct ReplayAgent {
    pub id: String,
    /// Positions aligned with the ego state timeline.
    pub positions: Vec<Vec2>,
    pub footprint: Footprint,
}

fn replay_heading(positions: &[Vec2], idx: usize) -> f64 {
    // Displacement heading, falling back to the nearest moving segment.
    let n = positions.len();
    if n < 2 {
        return 0.0;
    }
    let mut i = idx.min(n - 1);
    loop {
        let (a, b) = if i == 0 {
            (positions[0], positions[1])
        } else {
            (positions[i - 1], positions[i])
        };
        let d = b - a;
        if d.norm() > 1e-9 {
            return d.angle();
        }
        if i == 0 {
            return 0.0;
        }
        i -= 1;
    }
}

/// Oriented-rectangle overlap per step between the ego trajectory and
/// every replayed agent. Events are ordered by step.
pub fn detect_collisions(
    ego: &[DynState],
    ego_footprint: Footprint,
    others: &[ReplayAgent],
) -> Vec<CollisionEvent> {
    let mut events = Vec::new();
    for (step, state) in ego.iter().enumerate().skip(1) {
        let ego_box = Obb::from_footprint(state.position, state.heading, ego_footprint);
        for agent in others {
            if step >= agent.positions.len() {
                continue;
            }
            let heading = replay_heading(&agent.positions, step);
            let other_box = Obb::from_footprint(agent.positions[step], heading, agent.footprint);
            if ego_box.overlaps(&other_box) {
                events.push(CollisionEvent {
                    step,
                    agent: agent.id.clone(),
                });
            }
        }
    }
    events
}

/// Steps (1-based) at which the ego center leaves every drivable polygon.
pub fn detect_offroad(ego: &[DynState], map: &MapModel) -> Vec<usize> {
    ego.iter()
        .enumerate()
        .skip(1)
        .filter(|(_, s)| !map.is_drivable(s.position))
        .map(|(i, _)| i)
        .collect()
}

/// Open- versus closed-loop execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    OpenLoop,
    ClosedLoop,
}

/// Simulation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: SimMode,
    /// Episode length, seconds.
    pub duration: f64,
    /// Closed-loop replanning interval, seconds.
    pub replan_interval: f64,
    /// Plan horizon, seconds.
    pub horizon: f64,
    /// Ego cruise speed; defaults to the ego's current speed.
    pub cruise_speed: Option<f64>,
    pub bounds: DynamicBounds,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mode: SimMode::ClosedLoop,
            duration: 6.0,
            replan_interval: 0.5,
            horizon: 6.0,
            cruise_speed: None,
            bounds: DynamicBounds::default(),
            seed: 0,
        }
    }
}

/// Attack attachment for [`simulate`].
pub struct SimAttack<'a> {
    pub attack: &'a AttackConfig,
    pub recon: &'a ReconConfig,
}

/// Episode outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimOutcome {
    /// Ego states over the executed episode; index 0 is the start.
    pub ego_states: Vec<DynState>,
    pub collisions: Vec<CollisionEvent>,
    /// Executed steps at which the ego center was off every drivable
    /// polygon.
    pub offroad_steps: Vec<usize>,
    pub replan_count: usize,
    /// Set when a planner error truncated the episode.
    pub truncated: Option<String>,
    pub planner: PlannerKind,
    pub mode: SimMode,
    pub seed: u64,
}

impl SimOutcome {
    pub fn had_incident(&self) -> bool {
        !self.collisions.is_empty() || !self.offroad_steps.is_empty()
    }
}

/// Roll the ego through a logged scene.
///
/// Other agents replay their logged tracks; the ego follows plans from
/// the selected planner, recomputing predictions at every replan. With an
/// attack attached, the adversarial agent's observed track is replaced by
/// a sequential attack result before any prediction is made. The episode
/// is deterministic given the configuration.
pub fn simulate(
    scene: &Scene,
    map: &MapModel,
    predictor: &dyn PredictionModel,
    planner: PlannerKind,
    cfg: &SimConfig,
    attack: Option<SimAttack>,
) -> Result<SimOutcome> {
    scene.validate()?;
    map.validate()?;
    let dt = scene.dt;
    let h_obs = scene.history_len();
    let h_model = predictor.history_len();
    let t_model = predictor.horizon();
    let total_steps = (cfg.duration / dt).round() as usize;
    let steps_per_replan = (cfg.replan_interval / dt).round() as usize;
    if steps_per_replan == 0 || total_steps % steps_per_replan != 0 {
        return Err(Error::Config(
            "replan interval must divide the duration in whole steps".into(),
        ));
    }
    if h_obs < h_model + 1 {
        return Err(Error::invalid(format!(
            "simulation scene needs at least {} observed steps",
            h_model + 1
        )));
    }

    // Replay tracks; the adversarial prefix is replaced when attacking.
    let mut tracks: Vec<Vec<Vec2>> = scene.agents.iter().map(|a| a.track()).collect();
    if let Some(sim_attack) = &attack {
        let l_p = sim_attack.attack.l_p;
        let end = h_obs - 1 + l_p - 1;
        let window = scene.window(end, h_model + l_p, t_model)?;
        let result = attack_sequential(&window, predictor, sim_attack.attack, sim_attack.recon)?;
        let start = end + 1 - (h_model + l_p);
        for (offset, p) in result.x_adv.iter().enumerate() {
            tracks[scene.adv][start + offset] = *p;
        }
    }

    // Ego starts from its logged current state.
    let ego_hist = &scene.agents[scene.ego].history;
    let d = ego_hist[h_obs - 1] - ego_hist[h_obs - 2];
    let mut ego_state = DynState::new(ego_hist[h_obs - 1], d.angle(), d.norm() / dt)?;
    let cruise = cfg.cruise_speed.unwrap_or(ego_state.speed);
    let mut ego_log: Vec<Vec2> = ego_hist.clone();
    let mut ego_states = vec![ego_state];
    let horizon_steps = (cfg.horizon / dt).round() as usize;

    let replans = match cfg.mode {
        SimMode::OpenLoop => 1,
        SimMode::ClosedLoop => total_steps / steps_per_replan,
    };
    let mut truncated = None;
    let mut replan_count = 0;

    'episode: for k in 0..replans {
        let now_idx = h_obs - 1 + k * steps_per_replan;
        // Assemble the prediction scene at this replan.
        let mut agents = Vec::with_capacity(scene.n_agents());
        for (i, a) in scene.agents.iter().enumerate() {
            let history = if i == scene.ego {
                ego_log[ego_log.len() - h_model..].to_vec()
            } else {
                let track = &tracks[i];
                if now_idx + 1 < h_model || now_idx >= track.len() {
                    return Err(Error::invalid(format!(
                        "scene {} track for agent {} too short for replan {k}",
                        scene.id, a.id
                    )));
                }
                track[now_idx + 1 - h_model..=now_idx].to_vec()
            };
            let future = vec![*history.last().unwrap(); 1];
            agents.push(crate::scene::AgentTrack {
                id: a.id.clone(),
                history,
                future,
                footprint: a.footprint,
            });
        }
        let pred_scene = Scene {
            id: format!("{}#r{k}", scene.id),
            dt,
            agents,
            adv: scene.adv,
            ego: scene.ego,
            map_ref: scene.map_ref.clone(),
        };
        let pred = predictor.predict(&pred_scene)?;
        let best = pred.best_mode();
        let others_pred: Vec<Vec<Vec2>> = (0..scene.n_agents())
            .filter(|i| *i != scene.ego)
            .map(|i| pred.modes[best][i].clone())
            .collect();

        let plan = match planner {
            PlannerKind::RuleBased => {
                let Some((lane_idx, lane_dist)) = map.nearest_lane(ego_state.position) else {
                    truncated = Some("no lane in map".to_string());
                    break 'episode;
                };
                let lane = &map.lanes[lane_idx];
                if lane_dist > lane.width * 2.0 {
                    truncated = Some("ego lost lane association".to_string());
                    break 'episode;
                }
                rule_planner(
                    ego_state,
                    lane,
                    &others_pred,
                    horizon_steps,
                    dt,
                    cruise,
                    &cfg.bounds,
                )
            }
            PlannerKind::LatticeMpc => lattice_mpc_planner(
                ego_state,
                map,
                &others_pred,
                horizon_steps,
                dt,
                cruise,
                &cfg.bounds,
            ),
        };
        let plan = match plan {
            Ok(p) => p,
            Err(e) => {
                truncated = Some(e.to_string());
                break 'episode;
            }
        };
        replan_count += 1;

        let exec = match cfg.mode {
            SimMode::OpenLoop => total_steps,
            SimMode::ClosedLoop => steps_per_replan,
        };
        for j in 1..=exec.min(plan.states.len() - 1) {
            ego_state = plan.states[j];
            ego_states.push(ego_state);
            ego_log.push(ego_state.position);
        }
    }

    // Event detection over the executed timeline.
    let executed = ego_states.len();
    let others: Vec<ReplayAgent> = scene
        .agents
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != scene.ego)
        .map(|(i, a)| {
            let mut positions = Vec::with_capacity(executed);
            for step in 0..executed {
                let idx = h_obs - 1 + step;
                let track = &tracks[i];
                positions.push(if idx < track.len() {
                    track[idx]
                } else {
                    *track.last().unwrap()
                });
            }
            ReplayAgent {
                id: a.id.clone(),
                positions,
                footprint: a.footprint_or_default(),
            }
        })
        .collect();
    let ego_fp = scene.agents[scene.ego].footprint_or_default();
    let collisions = detect_collisions(&ego_states, ego_fp, &others);
    let offroad_steps = detect_offroad(&ego_states, map);

    Ok(SimOutcome {
        ego_states,
        collisions,
        offroad_steps,
        replan_count,
        truncated,
        planner,
        mode: cfg.mode,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predict::{ConstantVelocity, GroundTruthOracle};
    use crate::scene::AgentTrack;

    pub(crate) fn straight_map(half: f64) -> MapModel {
        MapModel {
            drivable: vec![Polygon::new(vec![
                Vec2::new(-half, -7.0),
                Vec2::new(half, -7.0),
                Vec2::new(half, 7.0),
                Vec2::new(-half, 7.0),
            ])
            .unwrap()],
            lanes: vec![
                Lane {
                    centerline: vec![Vec2::new(-half, 0.0), Vec2::new(half, 0.0)],
                    width: 3.5,
                },
                Lane {
                    centerline: vec![Vec2::new(half, 3.5), Vec2::new(-half, 3.5)],
                    width: 3.5,
                },
            ],
        }
    }

    fn straight_track(x0: f64, y: f64, speed: f64, dt: f64, len: usize) -> Vec<Vec2> {
        (0..len)
            .map(|i| Vec2::new(x0 + speed * dt * i as f64, y))
            .collect()
    }

    /// Ego driving an empty straight road.
    fn empty_road_scene() -> Scene {
        let dt = 0.5;
        let ego_track = straight_track(-20.0, 0.0, 8.0, dt, 35);
        // A distant parked car far off the lane keeps N >= 2.
        let parked = vec![Vec2::new(0.0, 200.0); 35];
        Scene {
            id: "empty".into(),
            dt,
            agents: vec![
                AgentTrack {
                    id: "ego".into(),
                    history: ego_track[..5].to_vec(),
                    future: ego_track[5..].to_vec(),
                    footprint: None,
                },
                AgentTrack {
                    id: "parked".into(),
                    history: parked[..5].to_vec(),
                    future: parked[5..].to_vec(),
                    footprint: None,
                },
            ],
            adv: 1,
            ego: 0,
            map_ref: None,
        }
    }

    #[test]
    fn rule_planner_tracks_empty_lane() {
        let map = straight_map(200.0);
        let ego = DynState::new(Vec2::new(-20.0, 0.0), 0.0, 8.0).unwrap();
        let plan = rule_planner(
            ego,
            &map.lanes[0],
            &[],
            12,
            0.5,
            8.0,
            &DynamicBounds::default(),
        )
        .unwrap();
        assert_eq!(plan.states.len(), 13);
        for s in &plan.states {
            assert!(s.position.y.abs() < 0.1, "lateral deviation {}", s.position.y);
        }
        // Feasibility: the plan is its own controls' rollout.
        let rebuilt = rollout(&plan.states[0], &plan.controls).unwrap();
        for (a, b) in plan.states.iter().zip(&rebuilt) {
            assert_eq!(a.position, b.position);
        }
    }

    #[test]
    fn rule_planner_stops_behind_blocker() {
        let map = straight_map(200.0);
        let ego = DynState::new(Vec2::new(0.0, 0.0), 0.0, 8.0).unwrap();
        // Stopped vehicle 15 m ahead in-lane for the whole horizon.
        let blocker = vec![vec![Vec2::new(15.0, 0.0); 12]];
        let plan = rule_planner(
            ego,
            &map.lanes[0],
            &blocker,
            12,
            0.5,
            8.0,
            &DynamicBounds::default(),
        )
        .unwrap();
        let last = plan.states.last().unwrap();
        assert!(last.speed.abs() < 1e-9, "final speed {}", last.speed);
        // Never reaches the blocker's footprint.
        for s in &plan.states {
            assert!(s.position.x < 15.0 - 2.0, "got too close: {}", s.position.x);
        }
    }

    #[test]
    fn rule_planner_ignores_off_lane_prediction() {
        let map = straight_map(200.0);
        let ego = DynState::new(Vec2::new(0.0, 0.0), 0.0, 8.0).unwrap();
        let off_lane = vec![vec![Vec2::new(15.0, 30.0); 12]];
        let a = rule_planner(ego, &map.lanes[0], &off_lane, 12, 0.5, 8.0, &DynamicBounds::default())
            .unwrap();
        let b = rule_planner(ego, &map.lanes[0], &[], 12, 0.5, 8.0, &DynamicBounds::default())
            .unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x.position, y.position);
        }
    }

    #[test]
    fn rule_planner_requires_lane_association() {
        let map = straight_map(200.0);
        let ego = DynState::new(Vec2::new(0.0, 50.0), 0.0, 8.0).unwrap();
        assert!(rule_planner(
            ego,
            &map.lanes[0],
            &[],
            12,
            0.5,
            8.0,
            &DynamicBounds::default()
        )
        .is_err());
    }

    #[test]
    fn lattice_picks_zero_offset_on_empty_road() {
        let map = straight_map(200.0);
        let ego = DynState::new(Vec2::new(-20.0, 0.0), 0.0, 8.0).unwrap();
        let plan =
            lattice_mpc_planner(ego, &map, &[], 12, 0.5, 8.0, &DynamicBounds::default()).unwrap();
        assert!(!plan.emergency);
        for s in &plan.states {
            assert!(s.position.y.abs() < 0.3, "offset {}", s.position.y);
        }
    }

    #[test]
    fn lattice_swerves_around_blocker() {
        let map = straight_map(200.0);
        let ego = DynState::new(Vec2::new(0.0, 0.0), 0.0, 8.0).unwrap();
        let blocker = vec![vec![Vec2::new(18.0, 0.0); 12]];
        let plan = lattice_mpc_planner(ego, &map, &blocker, 12, 0.5, 8.0, &DynamicBounds::default())
            .unwrap();
        assert!(!plan.emergency);
        let max_lat = plan
            .states
            .iter()
            .map(|s| s.position.y.abs())
            .fold(0.0, f64::max);
        assert!(max_lat > 0.5, "no lateral avoidance: {max_lat}");
        // No footprint overlap with the predicted blocker.
        for s in &plan.states {
            assert!(s.position.dist(Vec2::new(18.0, 0.0)) > 2.0);
        }
    }

    #[test]
    fn lattice_emergency_brakes_when_fully_blocked() {
        let map = straight_map(200.0);
        let ego = DynState::new(Vec2::new(0.0, 0.0), 0.0, 8.0).unwrap();
        // A wall of predicted vehicles across every offset.
        let mut wall = Vec::new();
        for lat in [-3.0, -1.5, 0.0, 1.5, 3.0] {
            for x in [6.0, 10.0, 14.0] {
                wall.push(vec![Vec2::new(x, lat); 12]);
            }
        }
        let plan = lattice_mpc_planner(ego, &map, &wall, 12, 0.5, 8.0, &DynamicBounds::default())
            .unwrap();
        assert!(plan.emergency);
        assert!(plan.states.last().unwrap().speed.abs() < 1e-9);
    }

    #[test]
    fn collision_detection_reference_cases() {
        let fp = Footprint::default();
        let ego = vec![
            DynState::new(Vec2::ZERO, 0.0, 5.0).unwrap(),
            DynState::new(Vec2::new(2.5, 0.0), 0.0, 5.0).unwrap(),
        ];
        // Identical positions collide regardless of heading.
        let hit = ReplayAgent {
            id: "a".into(),
            positions: vec![Vec2::new(-5.0, 0.0), Vec2::new(2.5, 0.0)],
            footprint: fp,
        };
        let events = detect_collisions(&ego, fp, &[hit]);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].step, 1);
        // Separation beyond the diagonal sum never collides.
        let miss = ReplayAgent {
            id: "b".into(),
            positions: vec![Vec2::new(-9.0, 0.0), Vec2::new(9.0, 0.0)],
            footprint: fp,
        };
        assert!(detect_collisions(&ego, fp, &[miss]).is_empty());
    }

    #[test]
    fn open_loop_replans_once_closed_loop_every_interval() {
        let map = straight_map(400.0);
        let scene = empty_road_scene();
        let model = ConstantVelocity::new(4, 12);
        for (mode, expect) in [(SimMode::OpenLoop, 1), (SimMode::ClosedLoop, 12)] {
            let cfg = SimConfig {
                mode,
                ..SimConfig::default()
            };
            let out = simulate(&scene, &map, &model, PlannerKind::RuleBased, &cfg, None).unwrap();
            assert_eq!(out.replan_count, expect);
            assert!(out.truncated.is_none());
            assert!(out.collisions.is_empty());
            assert!(out.offroad_steps.is_empty());
        }
    }

    #[test]
    fn perfect_predictor_benign_closed_loop_is_clean() {
        let map = straight_map(400.0);
        let scene = empty_road_scene();
        let oracle = GroundTruthOracle::new(4, 12);
        // The oracle needs real futures in the replan scenes; use the
        // constant-velocity model for per-replan prediction instead when
        // futures are synthetic. Here tracks are straight so both agree.
        let cfg = SimConfig::default();
        for planner in [PlannerKind::RuleBased, PlannerKind::LatticeMpc] {
            let out = simulate(&scene, &map, &ConstantVelocity::new(4, 12), planner, &cfg, None)
                .unwrap();
            assert!(!out.had_incident(), "planner {planner:?} had incidents");
            assert!(out.truncated.is_none());
        }
        let _ = oracle;
    }

    #[test]
    fn simulation_is_deterministic() {
        let map = straight_map(400.0);
        let scene = empty_road_scene();
        let model = ConstantVelocity::new(4, 12);
        let cfg = SimConfig::default();
        let a = simulate(&scene, &map, &model, PlannerKind::LatticeMpc, &cfg, None).unwrap();
        let b = simulate(&scene, &map, &model, PlannerKind::LatticeMpc, &cfg, None).unwrap();
        assert_eq!(a.ego_states.len(), b.ego_states.len());
        for (x, y) in a.ego_states.iter().zip(&b.ego_states) {
            assert_eq!(x.position, y.position);
            assert_eq!(x.heading, y.heading);
            assert_eq!(x.speed, y.speed);
        }
        assert_eq!(a.collisions, b.collisions);
    }
}
