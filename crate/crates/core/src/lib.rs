//! Flow-matching laboratory.
//!
//! Closed-form optimal velocity fields for Gaussian-mixture source/target
//! pairs, a from-scratch MLP velocity model trained with the flow-matching
//! regression objective, fixed-step particle transport, and measurements of
//! how sharply the optimal field changes across the decision boundary
//! compared to what a continuous network learns.
//!
//! Module map:
//! - [`mixture`]: isotropic Gaussian mixtures, log-space responsibilities.
//! - [`oracle`]: conditional paths, time-t marginals, exact optimal velocity.
//! - [`net`]: MLP velocity model, backprop, Adam training, checkpoints.
//! - [`sim`]: velocity-field trait and Euler/RK4 particle transport.
//! - [`analysis`]: jump profiles, error bands, continuity residuals, mode metrics.
//! - [`montecarlo`]: sampling-based check of the closed-form field.

pub mod analysis;
pub mod error;
pub mod mixture;
pub mod montecarlo;
pub mod net;
pub mod oracle;
pub mod rng;
pub mod sim;

pub use error::{FlowError, Result};
pub use mixture::{GaussianMixture, IsotropicGaussian};
pub use net::{Activation, TrainConfig, TrainReport, VelocityNet};
pub use oracle::{Oracle, PathParams, PosteriorSummary, EPS_TIME};
pub use sim::{FieldHandle, Method, VelocityField};
