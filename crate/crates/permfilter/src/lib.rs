//! Gradient-based weighted particle filter for permutation-invariant
//! sequential learning, with baseline filters, exact Bayesian oracles at
//! desk scale, and a continual-learning benchmark harness.
//!
//! The filter moves every particle by gradient descent with step size
//! `sigma_sq` and multiplies its importance weight by
//! `e^{-(L(x_new)+L(x_old))/2}`, so the weighted ensemble tracks the Bayes
//! posterior over parameters induced by the loss stream. For linear losses
//! the weight ratios match the true posterior exactly; see
//! [`oracles::theorem3_check`].

pub mod baselines;
pub mod bench;
pub mod error;
pub mod filter;
pub mod io;
pub mod losses;
pub mod oracles;

pub use error::{Error, Result};
pub use filter::{init_ensemble, Ensemble, EnsembleConfig, Particle};
pub use losses::{finite_diff_grad, LinearLoss, LossTask, Matrix, MlpLoss, MlpSpec, QuadraticLoss};
