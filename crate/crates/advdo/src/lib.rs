//! Robustness workbench for trajectory prediction.
//!
//! The crate reconstructs dense, dynamically feasible trajectories from
//! sparse agent histories, perturbs them into realistic adversarial
//! histories by projected gradient descent through a differentiable
//! kinematic bicycle model, and measures the damage with prediction,
//! planning-aware, fidelity, and transfer metrics, including closed-loop
//! planner simulation.
//!
//! Module map:
//!
//! - [`dynamics`] — kinematic bicycle model: rollout, inverse, exact
//!   reverse-mode gradients, soft dynamic-bound loss.
//! - [`recon`] — optimization-based dense trajectory reconstruction.
//! - [`scene`] — multi-agent scene containers and windowing.
//! - [`predict`] — prediction-model abstraction, built-in surrogates,
//!   training, and the external-process bridge.
//! - [`attack`] — single-frame, sequential, and augmentation trajectory
//!   perturbation by PGD over control actions.
//! - [`metrics`] — ADE/FDE/MR/ORR, violation rate, sensitivity and
//!   planning-aware metrics, similarity suite, transfer rate.
//! - [`planning`] — rule-based and lattice+MPC planners, open/closed-loop
//!   simulation, collision and off-road detection.
//! - [`workbench`] — scenario/map I/O, scene synthesis, campaign
//!   orchestration, reports and plots.

pub mod attack;
pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod planning;
pub mod predict;
pub mod recon;
pub mod scene;
pub mod vec2;
pub mod workbench;

pub use error::{Error, Result};
pub use vec2::Vec2;
