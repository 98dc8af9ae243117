//! Surrogate training and adversarial training.

use super::surrogates::{softmax, MlpWeights, SocialMlp, SurrogateKind, SurrogateSpec};
use super::PredictionModel;
use crate::attack::{attack_single, AttackConfig};
use crate::error::{Error, Result};
use crate::recon::ReconConfig;
use crate::scene::Scene;

/// Weight on the mode-classification term of the training loss.
const CE_WEIGHT: f64 = 0.1;

/// Outcome of a training run.
pub struct TrainReport {
    pub spec: SurrogateSpec,
    /// Trained weights, present for learnable kinds.
    pub weights: Option<MlpWeights>,
    /// Mean per-sample loss after each epoch.
    pub trace: Vec<f64>,
}

impl TrainReport {
    /// Instantiate the trained model.
    pub fn build(&self) -> Result<Box<dyn PredictionModel>> {
        match (&self.spec.kind, &self.weights) {
            (SurrogateKind::SocialMlp, Some(w)) => {
                Ok(Box::new(SocialMlp::from_weights(&self.spec, w.clone())?))
            }
            _ => Ok(self.spec.build()),
        }
    }

    /// The trained MLP, when the spec is learnable.
    pub fn mlp(&self) -> Result<SocialMlp> {
        match &self.weights {
            Some(w) => SocialMlp::from_weights(&self.spec, w.clone()),
            None => Err(Error::Capability("model has no trainable weights".into())),
        }
    }
}

struct AdamVec {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamVec {
    fn new(n: usize) -> Self {
        AdamVec {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + eps);
        }
    }
}

fn flatten(w: &MlpWeights) -> Vec<f64> {
    let mut out = Vec::with_capacity(w.w1.len() + w.b1.len() + w.w2.len() + w.b2.len());
    out.extend_from_slice(&w.w1);
    out.extend_from_slice(&w.b1);
    out.extend_from_slice(&w.w2);
    out.extend_from_slice(&w.b2);
    out
}

fn unflatten(flat: &[f64], like: &MlpWeights) -> MlpWeights {
    let (a, rest) = flat.split_at(like.w1.len());
    let (b, rest) = rest.split_at(like.b1.len());
    let (c, d) = rest.split_at(like.w2.len());
    MlpWeights {
        w1: a.to_vec(),
        b1: b.to_vec(),
        w2: c.to_vec(),
        b2: d.to_vec(),
    }
}

/// Loss and weight gradient of one scene batch under the current model.
///
/// Per agent: winner-take-all squared error over the K modes plus a small
/// cross-entropy pushing the winning mode's probability up. Returns
/// (summed loss, sample count); gradients accumulate into `acc`.
fn scene_batch(
    model: &SocialMlp,
    scene: &Scene,
    acc: &mut MlpWeights,
    grads_wanted: bool,
) -> Result<(f64, usize)> {
    let spec = &model.spec;
    let t_len = spec.horizon;
    let window = scene.with_history_tail(spec.history_len);
    let pred = model.predict(&window)?;
    let mut total = 0.0;
    for i in 0..window.n_agents() {
        let y = &window.agents[i].future;
        if y.len() < t_len {
            return Err(Error::invalid(format!(
                "training scene {} agent {i} future too short",
                scene.id
            )));
        }
        // Pick the winning mode by mean squared error.
        let mut best_k = 0;
        let mut best_mse = f64::INFINITY;
        for k in 0..spec.modes {
            let mse: f64 = (0..t_len)
                .map(|t| (pred.modes[k][i][t] - y[t]).norm_sq())
                .sum::<f64>()
                / t_len as f64;
            if mse < best_mse {
                best_mse = mse;
                best_k = k;
            }
        }
        let feats = model.features(&window, i);
        let (hidden, out) = model.forward(&feats.x);
        let logits: Vec<f64> = (0..spec.modes).map(|k| out[model.logit_idx(k)]).collect();
        let probs = softmax(&logits);
        let ce = -probs[best_k].max(1e-12).ln();
        total += best_mse + CE_WEIGHT * ce;
        if grads_wanted {
            let mut g_out = vec![0.0; model.out_dim()];
            for t in 0..t_len {
                let d = (pred.modes[best_k][i][t] - y[t]) * (2.0 / t_len as f64);
                g_out[model.res_idx(best_k, t, 0)] = d.x * spec.res_scale;
                g_out[model.res_idx(best_k, t, 1)] = d.y * spec.res_scale;
            }
            for k in 0..spec.modes {
                let onehot = if k == best_k { 1.0 } else { 0.0 };
                g_out[model.logit_idx(k)] = CE_WEIGHT * (probs[k] - onehot);
            }
            model.accumulate_weight_grads(&feats.x, &hidden, &g_out, acc);
        }
    }
    Ok((total, window.n_agents()))
}

fn zero_like(w: &MlpWeights) -> MlpWeights {
    MlpWeights {
        w1: vec![0.0; w.w1.len()],
        b1: vec![0.0; w.b1.len()],
        w2: vec![0.0; w.w2.len()],
        b2: vec![0.0; w.b2.len()],
    }
}

/// Fit a surrogate on a scene dataset.
///
/// Full-batch Adam, deterministic given the spec seed. Analytic kinds
/// have nothing to fit and return unchanged with an empty trace.
pub fn train_surrogate(
    dataset: &[Scene],
    spec: &SurrogateSpec,
    epochs: usize,
    lr: f64,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset must be nonempty"));
    }
    if spec.kind != SurrogateKind::SocialMlp {
        return Ok(TrainReport {
            spec: spec.clone(),
            weights: None,
            trace: Vec::new(),
        });
    }
    let mut model = SocialMlp::new(spec);
    let mut adam = AdamVec::new(flatten(&model.weights).len());
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut acc = zero_like(&model.weights);
        let mut loss = 0.0;
        let mut count = 0usize;
        for scene in dataset {
            let (l, c) = scene_batch(&model, scene, &mut acc, true)?;
            loss += l;
            count += c;
        }
        let mean = loss / count as f64;
        if !mean.is_finite() {
            return Err(Error::Training {
                reason: "non-finite training loss".into(),
                trace,
            });
        }
        trace.push(mean);
        let mut flat = flatten(&model.weights);
        let mut gflat = flatten(&acc);
        for g in gflat.iter_mut() {
            *g /= count as f64;
        }
        adam.step(&mut flat, &gflat, lr);
        model = SocialMlp::from_weights(spec, unflatten(&flat, &model.weights))?;
    }
    Ok(TrainReport {
        spec: spec.clone(),
        weights: Some(model.weights.clone()),
        trace,
    })
}

/// Adversarial training: each epoch regenerates adversarial histories
/// against the current weights and mixes them 50/50 with benign samples.
///
/// With `attack.pgd_steps == 0` the adversarial sample is the benign
/// scene itself and the loop reduces to ordinary training.
pub fn adversarial_train(
    spec: &SurrogateSpec,
    dataset: &[Scene],
    attack: &AttackConfig,
    recon: &ReconConfig,
    epochs: usize,
    lr: f64,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset must be nonempty"));
    }
    if spec.kind != SurrogateKind::SocialMlp {
        return Err(Error::Capability(
            "adversarial training requires a learnable surrogate".into(),
        ));
    }
    let mut model = SocialMlp::new(spec);
    let mut adam = AdamVec::new(flatten(&model.weights).len());
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut acc = zero_like(&model.weights);
        let mut loss = 0.0;
        let mut count = 0usize;
        for scene in dataset {
            let (l, c) = scene_batch(&model, scene, &mut acc, true)?;
            loss += l;
            count += c;
            let adv_scene = if attack.pgd_steps == 0 {
                scene.clone()
            } else {
                let result = attack_single(scene, &model, attack, recon)?;
                scene.with_adv_history(result.x_adv.clone())
            };
            let (l, c) = scene_batch(&model, &adv_scene, &mut acc, true)?;
            loss += l;
            count += c;
        }
        let mean = loss / count as f64;
        if !mean.is_finite() {
            return Err(Error::Training {
                reason: "non-finite adversarial training loss".into(),
                trace,
            });
        }
        trace.push(mean);
        let mut flat = flatten(&model.weights);
        let mut gflat = flatten(&acc);
        for g in gflat.iter_mut() {
            *g /= count as f64;
        }
        adam.step(&mut flat, &gflat, lr);
        model = SocialMlp::from_weights(spec, unflatten(&flat, &model.weights))?;
    }
    Ok(TrainReport {
        spec: spec.clone(),
        weights: Some(model.weights.clone()),
        trace,
    })
}

/// Mean benign ADE of a model over a scene set (best mode per agent).
pub fn benign_ade(model: &dyn PredictionModel, scenes: &[Scene]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for scene in scenes {
        let window = scene.with_history_tail(model.history_len());
        let pred = model.predict(&window)?;
        let t_len = model.horizon();
        for i in 0..window.n_agents() {
            let y = &window.agents[i].future;
            let best = (0..pred.k())
                .map(|k| {
                    (0..t_len)
                        .map(|t| pred.modes[k][i][t].dist(y[t]))
                        .sum::<f64>()
                        / t_len as f64
                })
                .fold(f64::INFINITY, f64::min);
            total += best;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
