//! Gaussian-process posteriors over state-action inputs.
//!
//! [`GpPosterior`] is the exact posterior (conditioning through a Cholesky
//! factor of `C_n + σ² I`). [`RffModel`] is the finite random-feature
//! approximation whose weight posterior yields explicit function samples; it
//! is what the control loop samples dynamics from.

mod dataset;
mod exact;
mod rff;

pub use dataset::Dataset;
pub use exact::{FiniteGpSampler, GpPosterior};
pub(crate) use exact::cholesky_lower;
pub use rff::{fit_rff, FeatureMap, FunctionSample, ProductFeatureCache, RffModel};

use log::debug;

use crate::error::{Error, Result};

/// Clamps a predicted variance that went slightly negative from cancellation.
pub(crate) fn clamp_variance(v: f64) -> Result<f64> {
    if v > 0.0 {
        Ok(v)
    } else if v >= -1e-10 {
        debug!("clamping predicted variance {v:e} to 1e-12");
        Ok(1e-12)
    } else {
        Err(Error::Numerical(format!("negative predicted variance {v:e}")))
    }
}
