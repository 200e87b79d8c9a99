//! Differentially private optimization with DP-SGD, DP-Adam and DP-Adam whose
//! second-moment estimate is corrected for the variance of the privacy noise.
//!
//! Modules, bottom-up:
//! - [`numerics`]: parameter vectors, seeded Gaussian streams, summary statistics
//! - [`models`]: linear, logistic and one-hidden-layer models with analytic per-example gradients
//! - [`privatizer`]: per-example clipping plus the Gaussian mechanism
//! - [`optimizers`]: SGD, Adam and both DP-Adam variants
//! - [`accountant`]: Renyi-DP accounting for the subsampled Gaussian mechanism
//! - [`moment_lab`]: Monte-Carlo checks of how DP noise shifts Adam's moment estimates
//! - [`harness`]: training loop, sweeps, config files and run logs

pub mod accountant;
pub mod error;
pub mod harness;
pub mod models;
pub mod moment_lab;
pub mod numerics;
pub mod optimizers;
pub mod privatizer;

pub use accountant::{max_steps, PrivacySpend, RdpLedger};
pub use error::{Error, Result};
pub use models::{Dataset, GradientBatch, Labels, Model, ModelKind};
pub use numerics::{ParamVector, SummaryStats};
pub use optimizers::{AdamConfig, AdamMode, OptimizerState, UpdateDirection};
pub use privatizer::{PrivacyConfig, PrivatizedGradient};
