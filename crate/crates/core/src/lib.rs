//! Tempered (α-) posteriors, their Gaussian mean-field approximations and
//! the expected-KL robustness analysis used to pick the tempering exponent.
//!
//! The crate is organised bottom-up:
//!
//! * [`gauss`]: Gaussian distributions, tabulated grid densities and the
//!   divergences between them (KL, squared Hellinger, total variation).
//! * [`alpha_posterior`]: conjugate and grid-based α-posteriors, their
//!   Gaussian large-sample limit and concentration probes.
//! * [`variational`]: projections onto the diagonal-Gaussian family.
//! * [`robustness`]: expected-KL criteria, their Gaussian surrogates and the
//!   closed-form optimal tempering exponent.
//! * [`regression`]: the omitted-variable Gaussian regression example.
//! * [`experiments`]: seeded replication studies built on the above.
//!
//! Replications run on rayon when the `parallel` feature is enabled (the
//! default) and sequentially otherwise; results are identical either way.

pub mod alpha_posterior;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod gauss;
pub mod linalg;
pub mod optim;
pub mod quadrature;
pub mod regression;
pub mod robustness;
pub mod sampling;
pub mod variational;

pub use error::{Error, Result};
pub use gauss::{GaussianDist, GridAxis, GridDensity};
pub use variational::DiagonalGaussian;
