//! Samplers, exact small-depth oracles and diagnostics for the Gibbs measure
//! of the continuous random energy model (CREM) at high temperature.
//!
//! The covariance and distribution types are generic over the scalar via
//! [`Real`]; the aliases below fix the `f64` instantiation used by the
//! samplers.

pub mod covariance;
pub mod disorder;
pub mod error;
pub mod experiments;
pub mod mcmc;
pub mod numerics;
pub mod oracle;
pub mod partition;
pub mod stats;
pub mod scalar;
pub mod sequential;

pub use covariance::{CovarianceChoice, CovarianceSpec, Thresholds};
pub use disorder::{CremInstance, VertexId};
pub use error::{CremError, Result};
pub use oracle::LeafDistribution;
pub use scalar::Real;

pub type Covariance = CovarianceSpec<f64>;
pub type Covariance32 = CovarianceSpec<f32>;
pub type Thresholds64 = Thresholds<f64>;
pub type Distribution = LeafDistribution<f64>;
