//! Built-in surrogate predictors.
//!
//! `constant-velocity` and `kinematic-extrapolation` are closed-form
//! single-mode models with analytic pullbacks; `social-mlp` is a small
//! learned model over motion features of the agent and relative features
//! of its nearest neighbors, giving attacks a social pathway to exploit.
//! `oracle` replays the logged future (useful as a perfect predictor in
//! closed-loop checks).

use super::{PredCotangent, Prediction, PredictionModel};
use crate::dynamics::angle_diff;
use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::vec2::Vec2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Surrogate families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateKind {
    ConstantVelocity,
    KinematicExtrapolation,
    SocialMlp,
    Oracle,
}

impl std::str::FromStr for SurrogateKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant-velocity" | "cv" => Ok(SurrogateKind::ConstantVelocity),
            "kinematic-extrapolation" | "kinematic" => Ok(SurrogateKind::KinematicExtrapolation),
            "social-mlp" | "mlp" => Ok(SurrogateKind::SocialMlp),
            "oracle" => Ok(SurrogateKind::Oracle),
            other => Err(Error::Config(format!("unknown surrogate kind: {other}"))),
        }
    }
}

/// Construction recipe for a surrogate, including the feature
/// normalization constants and the weight-init seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    /// History steps consumed.
    pub history_len: usize,
    /// Future steps emitted.
    pub horizon: usize,
    /// Number of modes K.
    pub modes: usize,
    /// Hidden width of the MLP.
    pub hidden: usize,
    /// Weight-init seed.
    pub seed: u64,
    /// Nearest neighbors encoded as social features.
    pub neighbors: usize,
    /// Displacement feature scale, meters.
    pub disp_scale: f64,
    /// Neighbor offset feature scale, meters.
    pub nbr_scale: f64,
    /// Residual output scale, meters.
    pub res_scale: f64,
}

impl SurrogateSpec {
    pub fn constant_velocity(history_len: usize, horizon: usize) -> Self {
        SurrogateSpec {
            kind: SurrogateKind::ConstantVelocity,
            history_len,
            horizon,
            modes: 1,
            hidden: 0,
            seed: 0,
            neighbors: 0,
            disp_scale: 1.0,
            nbr_scale: 1.0,
            res_scale: 1.0,
        }
    }

    pub fn kinematic(history_len: usize, horizon: usize) -> Self {
        SurrogateSpec {
            kind: SurrogateKind::KinematicExtrapolation,
            ..Self::constant_velocity(history_len, horizon)
        }
    }

    pub fn social_mlp(history_len: usize, horizon: usize, seed: u64) -> Self {
        SurrogateSpec {
            kind: SurrogateKind::SocialMlp,
            history_len,
            horizon,
            modes: 3,
            hidden: 48,
            seed,
            neighbors: 4,
            disp_scale: 5.0,
            nbr_scale: 20.0,
            res_scale: 2.0,
        }
    }

    /// Build the model this spec describes.
    pub fn build(&self) -> Box<dyn PredictionModel> {
        match self.kind {
            SurrogateKind::ConstantVelocity => {
                Box::new(ConstantVelocity::new(self.history_len, self.horizon))
            }
            SurrogateKind::KinematicExtrapolation => {
                Box::new(KinematicExtrapolation::new(self.history_len, self.horizon))
            }
            SurrogateKind::SocialMlp => Box::new(SocialMlp::new(self)),
            SurrogateKind::Oracle => Box::new(GroundTruthOracle::new(self.history_len, self.horizon)),
        }
    }
}

fn last_two(history: &[Vec2]) -> Result<(Vec2, Vec2)> {
    if history.len() < 2 {
        return Err(Error::invalid("predictor needs at least 2 history steps"));
    }
    Ok((history[history.len() - 1], history[history.len() - 2]))
}

/// Extrapolates the last observed displacement: the future advances by
/// `x^0 - x^{-1}` every step. Single mode.
#[derive(Debug, Clone)]
pub struct ConstantVelocity {
    history_len: usize,
    horizon: usize,
}

impl ConstantVelocity {
    pub fn new(history_len: usize, horizon: usize) -> Self {
        ConstantVelocity {
            history_len,
            horizon,
        }
    }
}

impl PredictionModel for ConstantVelocity {
    fn name(&self) -> String {
        "constant-velocity".into()
    }

    fn history_len(&self) -> usize {
        self.history_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn predict(&self, scene: &Scene) -> Result<Prediction> {
        let mut agents = Vec::with_capacity(scene.n_agents());
        for a in &scene.agents {
            let (x0, xm1) = last_two(&a.history)?;
            let step = x0 - xm1;
            agents.push((1..=self.horizon).map(|t| x0 + step * t as f64).collect());
        }
        Ok(Prediction {
            modes: vec![agents],
            probs: vec![1.0],
        })
    }

    fn has_exact_gradient(&self) -> bool {
        true
    }

    fn pullback(&self, scene: &Scene, cotangent: &PredCotangent) -> Result<Vec<Vec<Vec2>>> {
        let h = scene.history_len();
        let mut grad = vec![vec![Vec2::ZERO; h]; scene.n_agents()];
        for mode in cotangent {
            for (i, cots) in mode.iter().enumerate() {
                for (ti, c) in cots.iter().enumerate() {
                    let t = (ti + 1) as f64;
                    // y_t = (1 + t) x0 - t x_{-1}
                    grad[i][h - 1] += *c * (1.0 + t);
                    grad[i][h - 2] -= *c * t;
                }
            }
        }
        Ok(grad)
    }
}

/// Continues the history's chord geometry: the last displacement is
/// rotated by the last observed turn angle at every future step, so a
/// constant-curvature history continues exactly on its circle.
#[derive(Debug, Clone)]
pub struct KinematicExtrapolation {
    history_len: usize,
    horizon: usize,
}

impl KinematicExtrapolation {
    pub fn new(history_len: usize, horizon: usize) -> Self {
        KinematicExtrapolation {
            history_len,
            horizon,
        }
    }
}

/// Chord-rotation extrapolation: the last displacement, rotated by the
/// last observed turn angle at every future step. Exact on
/// constant-curvature sampled motion.
pub(crate) fn chord_extrapolate(history: &[Vec2], horizon: usize) -> Result<Vec<Vec2>> {
    if history.len() < 3 {
        return Err(Error::invalid("chord extrapolation needs 3 history steps"));
    }
    let n = history.len();
    let x0 = history[n - 1];
    let d0 = history[n - 1] - history[n - 2];
    let dm = history[n - 2] - history[n - 3];
    let turn = if d0.norm() > 1e-9 && dm.norm() > 1e-9 {
        angle_diff(d0.angle(), dm.angle())
    } else {
        0.0
    };
    let mut pos = x0;
    let mut step = d0;
    let mut traj = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        step = step.rotated(turn);
        pos += step;
        traj.push(pos);
    }
    Ok(traj)
}

/// VJP of [`chord_extrapolate`]: gradients with respect to the last three
/// history points, newest first `[x0, x_{-1}, x_{-2}]`.
pub(crate) fn chord_extrapolate_vjp(history: &[Vec2], cots: &[Vec2]) -> Result<[Vec2; 3]> {
    if history.len() < 3 {
        return Err(Error::invalid("chord extrapolation needs 3 history steps"));
    }
    let n = history.len();
    let d0 = history[n - 1] - history[n - 2];
    let dm = history[n - 2] - history[n - 3];
    let degenerate = d0.norm() <= 1e-9 || dm.norm() <= 1e-9;
    let turn = if degenerate {
        0.0
    } else {
        angle_diff(d0.angle(), dm.angle())
    };
    // y_t = x0 + sum_{j=1..t} R(j*turn) d0, so step j contributes to all
    // t >= j; accumulate the cotangent suffix per step.
    let mut suffix = Vec2::ZERO;
    let mut suffix_list = vec![Vec2::ZERO; cots.len()];
    for t in (0..cots.len()).rev() {
        suffix += cots[t];
        suffix_list[t] = suffix;
    }
    let mut g_x0 = Vec2::ZERO;
    let mut g_d0 = Vec2::ZERO;
    let mut g_turn = 0.0;
    for (j, suffix_c) in suffix_list.iter().enumerate() {
        let jj = (j + 1) as f64;
        let ang = jj * turn;
        g_d0 += suffix_c.rotated(-ang);
        // d(R(j*turn) d0)/d(turn) = j * R(j*turn + pi/2) d0
        let dstep = d0.rotated(ang + std::f64::consts::FRAC_PI_2) * jj;
        g_turn += suffix_c.dot(dstep);
    }
    for c in cots {
        g_x0 += *c;
    }
    let mut g_dm = Vec2::ZERO;
    if !degenerate {
        // turn = angle(d0) - angle(dm); d angle(v)/dv = perp(v)/|v|^2
        g_d0 += d0.perp() * (g_turn / d0.norm_sq());
        g_dm -= dm.perp() * (g_turn / dm.norm_sq());
    }
    Ok([g_x0 + g_d0, g_dm - g_d0, -g_dm])
}

impl PredictionModel for KinematicExtrapolation {
    fn name(&self) -> String {
        "kinematic-extrapolation".into()
    }

    fn history_len(&self) -> usize {
        self.history_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn predict(&self, scene: &Scene) -> Result<Prediction> {
        let mut agents = Vec::with_capacity(scene.n_agents());
        for a in &scene.agents {
            agents.push(chord_extrapolate(&a.history, self.horizon)?);
        }
        Ok(Prediction {
            modes: vec![agents],
            probs: vec![1.0],
        })
    }

    fn has_exact_gradient(&self) -> bool {
        true
    }

    fn pullback(&self, scene: &Scene, cotangent: &PredCotangent) -> Result<Vec<Vec<Vec2>>> {
        let h = scene.history_len();
        let mut grad = vec![vec![Vec2::ZERO; h]; scene.n_agents()];
        for mode in cotangent {
            for (i, cots) in mode.iter().enumerate() {
                let g = chord_extrapolate_vjp(&scene.agents[i].history, cots)?;
                grad[i][h - 1] += g[0];
                grad[i][h - 2] += g[1];
                grad[i][h - 3] += g[2];
            }
        }
        Ok(grad)
    }
}

/// Replays the logged ground-truth future; the perfect predictor.
#[derive(Debug, Clone)]
pub struct GroundTruthOracle {
    history_len: usize,
    horizon: usize,
}

impl GroundTruthOracle {
    pub fn new(history_len: usize, horizon: usize) -> Self {
        GroundTruthOracle {
            history_len,
            horizon,
        }
    }
}

impl PredictionModel for GroundTruthOracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn history_len(&self) -> usize {
        self.history_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn predict(&self, scene: &Scene) -> Result<Prediction> {
        let mut agents = Vec::with_capacity(scene.n_agents());
        for a in &scene.agents {
            if a.future.len() < self.horizon {
                return Err(Error::invalid(format!(
                    "oracle needs {} future steps, scene has {}",
                    self.horizon,
                    a.future.len()
                )));
            }
            agents.push(a.future[..self.horizon].to_vec());
        }
        Ok(Prediction {
            modes: vec![agents],
            probs: vec![1.0],
        })
    }

    fn has_exact_gradient(&self) -> bool {
        true
    }

    fn pullback(&self, scene: &Scene, _cot: &PredCotangent) -> Result<Vec<Vec<Vec2>>> {
        // The replayed future does not depend on the history.
        Ok(vec![vec![Vec2::ZERO; scene.history_len()]; scene.n_agents()])
    }
}

/// Flattened dense layer weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MlpWeights {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Learned surrogate: a one-hidden-layer MLP over motion and social
/// features, predicting K mode residuals on top of the constant-velocity
/// baseline plus mode logits.
#[derive(Debug, Clone)]
pub struct SocialMlp {
    pub spec: SurrogateSpec,
    pub(crate) weights: MlpWeights,
    feat_dim: usize,
    out_dim: usize,
}

pub(crate) struct AgentFeatures {
    pub x: Vec<f64>,
    /// Scene indices of the encoded neighbors, nearest first.
    pub neighbors: Vec<usize>,
}

impl SocialMlp {
    pub fn new(spec: &SurrogateSpec) -> Self {
        let feat_dim = 2 * (spec.history_len - 1) + 4 * spec.neighbors;
        let out_dim = spec.modes * spec.horizon * 2 + spec.modes;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut init = |rows: usize, cols: usize| -> Vec<f64> {
            let s = (6.0 / (rows + cols) as f64).sqrt();
            (0..rows * cols).map(|_| rng.random_range(-s..s)).collect()
        };
        let w1 = init(spec.hidden, feat_dim);
        let w2 = init(out_dim, spec.hidden);
        SocialMlp {
            spec: spec.clone(),
            weights: MlpWeights {
                w1,
                b1: vec![0.0; spec.hidden],
                w2,
                b2: vec![0.0; out_dim],
            },
            feat_dim,
            out_dim,
        }
    }

    pub fn from_weights(spec: &SurrogateSpec, weights: MlpWeights) -> Result<Self> {
        let model = SocialMlp::new(spec);
        if weights.w1.len() != model.weights.w1.len()
            || weights.b1.len() != model.weights.b1.len()
            || weights.w2.len() != model.weights.w2.len()
            || weights.b2.len() != model.weights.b2.len()
        {
            return Err(Error::invalid("MLP weight shape mismatch for spec"));
        }
        if weights
            .w1
            .iter()
            .chain(&weights.b1)
            .chain(&weights.w2)
            .chain(&weights.b2)
            .any(|w| !w.is_finite())
        {
            return Err(Error::invalid("MLP weights must be finite"));
        }
        Ok(SocialMlp {
            weights,
            ..model
        })
    }

    #[allow(dead_code)]
    pub(crate) fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub(crate) fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Motion + social features for agent `i`.
    pub(crate) fn features(&self, scene: &Scene, i: usize) -> AgentFeatures {
        let spec = &self.spec;
        let hist = &scene.agents[i].history;
        let h = hist.len();
        let mut x = Vec::with_capacity(self.feat_dim);
        for t in h - (spec.history_len - 1) - 1..h - 1 {
            let d = (hist[t + 1] - hist[t]) / spec.disp_scale;
            x.push(d.x);
            x.push(d.y);
        }
        let here = hist[h - 1];
        // Nearest neighbors at the current step, stable order.
        let mut order: Vec<usize> = (0..scene.n_agents()).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            let da = scene.agents[a].history[h - 1].dist(here);
            let db = scene.agents[b].history[h - 1].dist(here);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        order.truncate(spec.neighbors);
        for &j in &order {
            let nh = &scene.agents[j].history;
            let rel = (nh[h - 1] - here) / spec.nbr_scale;
            let vel = (nh[h - 1] - nh[h - 2]) / spec.disp_scale;
            x.push(rel.x);
            x.push(rel.y);
            x.push(vel.x);
            x.push(vel.y);
        }
        x.resize(self.feat_dim, 0.0);
        AgentFeatures { x, neighbors: order }
    }

    /// Forward pass; returns (hidden activations, outputs).
    pub(crate) fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = &self.weights;
        let hd = self.spec.hidden;
        let mut hidden = vec![0.0; hd];
        for r in 0..hd {
            let mut z = w.b1[r];
            let row = &w.w1[r * self.feat_dim..(r + 1) * self.feat_dim];
            for (wi, xi) in row.iter().zip(x) {
                z += wi * xi;
            }
            hidden[r] = z.tanh();
        }
        let mut out = vec![0.0; self.out_dim];
        for (r, o) in out.iter_mut().enumerate() {
            let mut z = w.b2[r];
            let row = &w.w2[r * hd..(r + 1) * hd];
            for (wi, hi) in row.iter().zip(&hidden) {
                z += wi * hi;
            }
            *o = z;
        }
        (hidden, out)
    }

    /// Gradient of `<g_out, out>` with respect to the input features.
    pub(crate) fn input_grad(&self, hidden: &[f64], g_out: &[f64]) -> Vec<f64> {
        let w = &self.weights;
        let hd = self.spec.hidden;
        let mut gh = vec![0.0; hd];
        for (r, g) in g_out.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = &w.w2[r * hd..(r + 1) * hd];
            for (ghi, wi) in gh.iter_mut().zip(row) {
                *ghi += g * wi;
            }
        }
        for (ghi, hi) in gh.iter_mut().zip(hidden) {
            *ghi *= 1.0 - hi * hi;
        }
        let mut gx = vec![0.0; self.feat_dim];
        for (r, gz) in gh.iter().enumerate() {
            if *gz == 0.0 {
                continue;
            }
            let row = &w.w1[r * self.feat_dim..(r + 1) * self.feat_dim];
            for (gxi, wi) in gx.iter_mut().zip(row) {
                *gxi += gz * wi;
            }
        }
        gx
    }

    /// Accumulate weight gradients of `<g_out, out>` into `acc`.
    pub(crate) fn accumulate_weight_grads(
        &self,
        x: &[f64],
        hidden: &[f64],
        g_out: &[f64],
        acc: &mut MlpWeights,
    ) {
        let w = &self.weights;
        let hd = self.spec.hidden;
        let mut gh = vec![0.0; hd];
        for (r, g) in g_out.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            acc.b2[r] += g;
            let wrow = &w.w2[r * hd..(r + 1) * hd];
            let arow = &mut acc.w2[r * hd..(r + 1) * hd];
            for c in 0..hd {
                arow[c] += g * hidden[c];
                gh[c] += g * wrow[c];
            }
        }
        for (ghi, hi) in gh.iter_mut().zip(hidden) {
            *ghi *= 1.0 - hi * hi;
        }
        for (r, gz) in gh.iter().enumerate() {
            if *gz == 0.0 {
                continue;
            }
            acc.b1[r] += gz;
            let arow = &mut acc.w1[r * self.feat_dim..(r + 1) * self.feat_dim];
            for (ai, xi) in arow.iter_mut().zip(x) {
                *ai += gz * xi;
            }
        }
    }

    /// Residual output index for (mode, step, coord).
    pub(crate) fn res_idx(&self, k: usize, t: usize, coord: usize) -> usize {
        (k * self.spec.horizon + t) * 2 + coord
    }

    /// Logit output index for mode `k`.
    pub(crate) fn logit_idx(&self, k: usize) -> usize {
        self.spec.modes * self.spec.horizon * 2 + k
    }

    /// Motion carrier the residual heads correct: the chord-rotation
    /// extrapolation of the agent's own history.
    fn baseline(&self, history: &[Vec2]) -> Result<Vec<Vec2>> {
        chord_extrapolate(history, self.spec.horizon)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

impl PredictionModel for SocialMlp {
    fn name(&self) -> String {
        format!("social-mlp/{}", self.spec.seed)
    }

    fn history_len(&self) -> usize {
        self.spec.history_len
    }

    fn horizon(&self) -> usize {
        self.spec.horizon
    }

    fn predict(&self, scene: &Scene) -> Result<Prediction> {
        let k_modes = self.spec.modes;
        let t_len = self.spec.horizon;
        let n = scene.n_agents();
        if scene.history_len() < self.spec.history_len {
            return Err(Error::invalid(format!(
                "social-mlp needs {} history steps, scene has {}",
                self.spec.history_len,
                scene.history_len()
            )));
        }
        let mut modes = vec![vec![vec![Vec2::ZERO; t_len]; n]; k_modes];
        let mut logit_sum = vec![0.0; k_modes];
        for i in 0..n {
            let feats = self.features(scene, i);
            let (_, out) = self.forward(&feats.x);
            let base = self.baseline(&scene.agents[i].history)?;
            for k in 0..k_modes {
                for t in 0..t_len {
                    let r = Vec2::new(
                        out[self.res_idx(k, t, 0)],
                        out[self.res_idx(k, t, 1)],
                    ) * self.spec.res_scale;
                    modes[k][i][t] = base[t] + r;
                }
                logit_sum[k] += out[self.logit_idx(k)];
            }
        }
        for l in logit_sum.iter_mut() {
            *l /= n as f64;
        }
        Ok(Prediction {
            modes,
            probs: softmax(&logit_sum),
        })
    }

    fn has_exact_gradient(&self) -> bool {
        true
    }

    fn pullback(&self, scene: &Scene, cotangent: &PredCotangent) -> Result<Vec<Vec<Vec2>>> {
        let h = scene.history_len();
        let hm = self.spec.history_len;
        let n = scene.n_agents();
        let t_len = self.spec.horizon;
        let mut grad = vec![vec![Vec2::ZERO; h]; n];
        for i in 0..n {
            let feats = self.features(scene, i);
            let (hidden, _) = self.forward(&feats.x);
            let mut g_out = vec![0.0; self.out_dim];
            // The baseline is shared by all K modes: fold every mode's
            // cotangent into one per-step baseline cotangent.
            let mut base_cots = vec![Vec2::ZERO; t_len];
            for (k, mode) in cotangent.iter().enumerate().take(self.spec.modes) {
                for t in 0..t_len {
                    let c = mode[i][t];
                    g_out[self.res_idx(k, t, 0)] += c.x * self.spec.res_scale;
                    g_out[self.res_idx(k, t, 1)] += c.y * self.spec.res_scale;
                    base_cots[t] += c;
                }
            }
            let gb = chord_extrapolate_vjp(&scene.agents[i].history, &base_cots)?;
            grad[i][h - 1] += gb[0];
            grad[i][h - 2] += gb[1];
            grad[i][h - 3] += gb[2];
            let gx = self.input_grad(&hidden, &g_out);
            // Own displacement features cover steps h-hm .. h-2.
            for (d, t) in (h - hm..h - 1).enumerate() {
                let g = Vec2::new(gx[2 * d], gx[2 * d + 1]) / self.spec.disp_scale;
                grad[i][t + 1] += g;
                grad[i][t] -= g;
            }
            let base = 2 * (hm - 1);
            for (s, &j) in feats.neighbors.iter().enumerate() {
                let off = base + 4 * s;
                let g_rel = Vec2::new(gx[off], gx[off + 1]) / self.spec.nbr_scale;
                let g_vel = Vec2::new(gx[off + 2], gx[off + 3]) / self.spec.disp_scale;
                grad[j][h - 1] += g_rel + g_vel;
                grad[i][h - 1] -= g_rel;
                grad[j][h - 2] -= g_vel;
            }
        }
        Ok(grad)
    }
}

/// On-disk model representation.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    spec: SurrogateSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<MlpWeights>,
}

const MODEL_FORMAT: &str = "advdo-model/1";

/// Persist a surrogate spec (and MLP weights, when present) as JSON.
pub fn save_model(path: &Path, spec: &SurrogateSpec, weights: Option<&MlpWeights>) -> Result<()> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        spec: spec.clone(),
        weights: weights.cloned(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Load a model file written by [`save_model`].
pub fn load_model(path: &Path) -> Result<Box<dyn PredictionModel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if file.format != MODEL_FORMAT {
        return Err(Error::Parse {
            file: path.display().to_string(),
            detail: format!("unsupported format {:?}", file.format),
        });
    }
    match (file.spec.kind, file.weights) {
        (SurrogateKind::SocialMlp, Some(w)) => Ok(Box::new(SocialMlp::from_weights(&file.spec, w)?)),
        (SurrogateKind::SocialMlp, None) => Ok(Box::new(SocialMlp::new(&file.spec))),
        (_, _) => Ok(file.spec.build()),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::scene::AgentTrack;

    /// Smooth chord-stepped scene: every agent moves with nonzero speed
    /// and a gentle constant-ish turn, so all surrogate feature maps are
    /// differentiable at the sample point.
    pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize, h: usize, t: usize) -> Scene {
        let mut agents = Vec::with_capacity(n);
        for a in 0..n {
            let mut pos = Vec2::new(rng.random_range(-25.0..25.0), rng.random_range(-25.0..25.0));
            let heading = rng.random_range(-3.0..3.0);
            let speed = rng.random_range(1.5..5.0);
            let turn = rng.random_range(-0.08..0.08);
            let growth = rng.random_range(-0.02..0.02);
            let mut step = Vec2::from_angle(heading) * speed * 0.5;
            let mut track = vec![pos];
            for _ in 0..h + t - 1 {
                step = step.rotated(turn) * (1.0 + growth);
                pos += step;
                track.push(pos);
            }
            agents.push(AgentTrack {
                id: format!("a{a}"),
                history: track[..h].to_vec(),
                future: track[h..].to_vec(),
                footprint: None,
            });
        }
        Scene {
            id: "random".into(),
            dt: 0.5,
            agents,
            adv: 1 % n.max(1),
            ego: 0,
            map_ref: None,
        }
    }

    /// Scene whose tracks are genuine bicycle rollouts at the sparse rate.
    pub(crate) fn scene_from_rollouts(rng: &mut ChaCha8Rng, n: usize, h: usize, t: usize) -> Scene {
        use crate::dynamics::{rollout, ControlAction, ControlSequence, DynState};
        let mut agents = Vec::with_capacity(n);
        for a in 0..n {
            let s0 = DynState::new(
                Vec2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)),
                rng.random_range(-3.0..3.0),
                rng.random_range(2.0..9.0),
            )
            .unwrap();
            let mut k: f64 = rng.random_range(-0.04..0.04);
            let mut actions = Vec::new();
            for _ in 0..h + t - 1 {
                k = 0.95 * k + rng.random_range(-0.005..0.005);
                actions.push(ControlAction::new(rng.random_range(-0.4..0.4), k));
            }
            let u = ControlSequence::new(0.5, actions).unwrap();
            let states = rollout(&s0, &u).unwrap();
            let track: Vec<Vec2> = states.iter().map(|s| s.position).collect();
            agents.push(AgentTrack {
                id: format!("a{a}"),
                history: track[..h].to_vec(),
                future: track[h..].to_vec(),
                footprint: None,
            });
        }
        Scene {
            id: "rollouts".into(),
            dt: 0.5,
            agents,
            adv: 1 % n.max(1),
            ego: 0,
            map_ref: None,
        }
    }

    #[test]
    fn constant_velocity_extrapolates_last_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut scene = random_scene(&mut rng, 2, 4, 12);
        // Force an exact displacement of (0.5, 0) on agent 0.
        let last = scene.agents[0].history[3];
        scene.agents[0].history[2] = last - Vec2::new(0.5, 0.0);
        let model = ConstantVelocity::new(4, 12);
        let pred = model.predict(&scene).unwrap();
        assert_eq!(pred.k(), 1);
        for (t, p) in pred.modes[0][0].iter().enumerate() {
            let expect = last + Vec2::new(0.5, 0.0) * (t + 1) as f64;
            assert!(p.dist(expect) < 1e-12);
        }
    }

    #[test]
    fn constant_velocity_is_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let scene = random_scene(&mut rng, 3, 4, 12);
        let c = Vec2::new(123.4, -77.1);
        let model = ConstantVelocity::new(4, 12);
        let a = model.predict(&scene).unwrap();
        let b = model.predict(&scene.translated(c)).unwrap();
        for (ma, mb) in a.modes.iter().zip(&b.modes) {
            for (aa, ab) in ma.iter().zip(mb) {
                for (pa, pb) in aa.iter().zip(ab) {
                    assert!((*pa + c).dist(*pb) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn constant_velocity_gradient_touches_last_two_steps_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let scene = random_scene(&mut rng, 2, 4, 12);
        let model = ConstantVelocity::new(4, 12);
        let pred = model.predict(&scene).unwrap();
        let mut cot = super::super::zero_cotangent(&pred);
        cot[0][0][5] = Vec2::new(1.0, 0.5);
        let grad = model.pullback(&scene, &cot).unwrap();
        assert_eq!(grad[0][0], Vec2::ZERO);
        assert_eq!(grad[0][1], Vec2::ZERO);
        assert!(grad[0][2].norm() > 0.0);
        assert!(grad[0][3].norm() > 0.0);
        for g in &grad[1] {
            assert_eq!(*g, Vec2::ZERO);
        }
    }

    #[test]
    fn kinematic_continues_circle() {
        // Constant-curvature history: exact circle samples.
        let radius = 20.0;
        let omega: f64 = 0.1; // radians per sample
        let circle = |i: i32| {
            Vec2::new(
                radius * (omega * i as f64).cos(),
                radius * (omega * i as f64).sin(),
            )
        };
        let history: Vec<Vec2> = (0..4).map(circle).collect();
        let scene = Scene {
            id: "circle".into(),
            dt: 0.5,
            agents: vec![
                AgentTrack {
                    id: "a0".into(),
                    history: history.clone(),
                    future: (4..16).map(circle).collect(),
                    footprint: None,
                },
                AgentTrack {
                    id: "a1".into(),
                    history: history.iter().map(|p| *p + Vec2::new(50.0, 0.0)).collect(),
                    future: (4..16).map(|i| circle(i) + Vec2::new(50.0, 0.0)).collect(),
                    footprint: None,
                },
            ],
            adv: 1,
            ego: 0,
            map_ref: None,
        };
        let model = KinematicExtrapolation::new(4, 12);
        let pred = model.predict(&scene).unwrap();
        for (t, p) in pred.modes[0][0].iter().enumerate() {
            let expect = circle(4 + t as i32);
            assert!(
                p.dist(expect) < 1e-3,
                "step {t}: {p:?} vs {expect:?} ({})",
                p.dist(expect)
            );
        }
    }

    #[test]
    fn social_mlp_deterministic_for_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let scene = random_scene(&mut rng, 4, 4, 12);
        let spec = SurrogateSpec::social_mlp(4, 12, 99);
        let a = SocialMlp::new(&spec).predict(&scene).unwrap();
        let b = SocialMlp::new(&spec).predict(&scene).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("advdo-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.json");
        let spec = SurrogateSpec::social_mlp(4, 12, 5);
        let model = SocialMlp::new(&spec);
        save_model(&path, &spec, Some(&model.weights)).unwrap();
        let loaded = load_model(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let scene = random_scene(&mut rng, 3, 4, 12);
        assert_eq!(
            model.predict(&scene).unwrap(),
            loaded.predict(&scene).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }
}
