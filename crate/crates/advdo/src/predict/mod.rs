//! Prediction-model abstraction and built-in surrogates.
//!
//! A [`PredictionModel`] maps agent histories to `K` weighted future
//! modes and exposes a pullback (vector-Jacobian product) so attacks can
//! differentiate through it. Three surrogate families ship in
//! [`surrogates`]; [`bridge`] attaches external models over a child
//! process; [`train`] fits and robustifies the learned surrogate.

pub mod bridge;
pub mod surrogates;
pub mod train;

pub use bridge::{BridgeConfig, BridgeModel};
pub use surrogates::{
    load_model, save_model, ConstantVelocity, GroundTruthOracle, KinematicExtrapolation,
    SocialMlp, SurrogateKind, SurrogateSpec,
};
pub use train::{adversarial_train, train_surrogate, TrainReport};

use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::vec2::Vec2;

/// `K` weighted future modes for every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `modes[k][i][t]` is agent `i`'s predicted position at future step
    /// `t` under mode `k`.
    pub modes: Vec<Vec<Vec<Vec2>>>,
    /// Mode probabilities, normalized to sum to 1.
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn k(&self) -> usize {
        self.modes.len()
    }

    pub fn n_agents(&self) -> usize {
        self.modes.first().map_or(0, |m| m.len())
    }

    pub fn horizon(&self) -> usize {
        self.modes.first().and_then(|m| m.first()).map_or(0, |t| t.len())
    }

    /// Index of the highest-probability mode (lowest index on ties).
    pub fn best_mode(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    /// Check finiteness and probability normalization.
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.probs.len() != self.modes.len() {
            return Err(Error::invalid("prediction must have K modes and K probs"));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("mode probabilities must be normalized"));
        }
        for mode in &self.modes {
            for agent in mode {
                if agent.iter().any(|p| !p.is_finite()) {
                    return Err(Error::invalid("prediction contains non-finite positions"));
                }
            }
        }
        Ok(())
    }
}

/// Cotangent on a [`Prediction`]'s positions: `K x N x T` of `Vec2`.
pub type PredCotangent = Vec<Vec<Vec<Vec2>>>;

/// Zero cotangent shaped like `pred`.
pub fn zero_cotangent(pred: &Prediction) -> PredCotangent {
    pred.modes
        .iter()
        .map(|m| m.iter().map(|a| vec![Vec2::ZERO; a.len()]).collect())
        .collect()
}

/// A differentiable (or finite-differentiable) trajectory predictor.
///
/// Implementations are immutable once constructed and safe to share
/// across threads.
pub trait PredictionModel: Send + Sync {
    /// Identifier used in reports.
    fn name(&self) -> String;

    /// History length the model consumes (windows are sliced to this).
    fn history_len(&self) -> usize;

    /// Future steps the model emits.
    fn horizon(&self) -> usize;

    /// Predict `K` weighted modes for every agent in the scene. The scene
    /// history may be longer than [`Self::history_len`]; only the most
    /// recent steps are consumed.
    fn predict(&self, scene: &Scene) -> Result<Prediction>;

    /// Whether [`Self::pullback`] returns an exact gradient.
    fn has_exact_gradient(&self) -> bool {
        false
    }

    /// Exact vector-Jacobian product: gradient of
    /// `sum_{k,i,t} <cotangent[k][i][t], Y_hat[k][i][t]>` with respect to
    /// every history position (an `N x H` matrix over the model's history
    /// window). Models without an exact gradient may return
    /// [`Error::Capability`]; callers should go through [`model_pullback`].
    fn pullback(&self, scene: &Scene, cotangent: &PredCotangent) -> Result<Vec<Vec<Vec2>>> {
        let _ = (scene, cotangent);
        Err(Error::Capability(format!(
            "{} does not provide an exact gradient",
            self.name()
        )))
    }
}

/// Gradient of the prediction against the scene histories.
///
/// Uses the model's exact pullback when available, otherwise central
/// finite differences with `h = 1e-4` m per coordinate. With
/// `allow_fd = false` a model without exact gradients is a capability
/// error.
pub fn model_pullback(
    model: &dyn PredictionModel,
    scene: &Scene,
    cotangent: &PredCotangent,
    allow_fd: bool,
) -> Result<Vec<Vec<Vec2>>> {
    let h_model = model.history_len();
    let window = scene.with_history_tail(h_model);
    check_cotangent_shape(model, &window, cotangent)?;
    if model.has_exact_gradient() {
        return model.pullback(&window, cotangent);
    }
    if !allow_fd {
        return Err(Error::Capability(format!(
            "{} has no exact gradient and finite differences are disabled",
            model.name()
        )));
    }
    finite_difference_pullback(model, &window, cotangent, 1e-4)
}

fn check_cotangent_shape(
    model: &dyn PredictionModel,
    scene: &Scene,
    cot: &PredCotangent,
) -> Result<()> {
    let n = scene.n_agents();
    let t = model.horizon();
    for mode in cot {
        if mode.len() != n || mode.iter().any(|a| a.len() != t) {
            return Err(Error::invalid(format!(
                "cotangent shape mismatch: expected K x {n} x {t}"
            )));
        }
    }
    Ok(())
}

/// Central-difference fallback for gradient-free models.
pub fn finite_difference_pullback(
    model: &dyn PredictionModel,
    scene: &Scene,
    cotangent: &PredCotangent,
    h: f64,
) -> Result<Vec<Vec<Vec2>>> {
    let dot = |pred: &Prediction| -> f64 {
        let mut acc = 0.0;
        for (k, mode) in pred.modes.iter().enumerate() {
            if k >= cotangent.len() {
                break;
            }
            for (i, agent) in mode.iter().enumerate() {
                for (t, p) in agent.iter().enumerate() {
                    acc += p.dot(cotangent[k][i][t]);
                }
            }
        }
        acc
    };
    let n = scene.n_agents();
    let h_len = scene.history_len();
    let mut grad = vec![vec![Vec2::ZERO; h_len]; n];
    let mut work = scene.clone();
    for i in 0..n {
        for s in 0..h_len {
            for coord in 0..2 {
                let orig = work.agents[i].history[s];
                let mut plus = orig;
                let mut minus = orig;
                if coord == 0 {
                    plus.x += h;
                    minus.x -= h;
                } else {
                    plus.y += h;
                    minus.y -= h;
                }
                work.agents[i].history[s] = plus;
                let fp = dot(&model.predict(&work)?);
                work.agents[i].history[s] = minus;
                let fm = dot(&model.predict(&work)?);
                work.agents[i].history[s] = orig;
                let g = (fp - fm) / (2.0 * h);
                if coord == 0 {
                    grad[i][s].x = g;
                } else {
                    grad[i][s].y = g;
                }
            }
        }
    }
    Ok(grad)
}
