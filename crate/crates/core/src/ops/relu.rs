//! Moment-matched ReLU.
//!
//! The rectified Gaussian `max(0, a)` with `a ~ N(mu, var)` is replaced by the
//! Gaussian sharing its first two moments. Inputs are variances, outputs are
//! second raw moments.

use crate::error::Result;
use crate::ops::dense::require_kind;
use crate::ops::special::{erf, FRAC_1_SQRT_2PI};
use crate::tensor::{GaussianTensor, MomentKind};

/// Below this variance the input is treated as a point mass.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Mean and second raw moment of `max(0, a)`, `a ~ N(mu, var)`.
#[inline]
pub fn relu_moments(mu: f64, var: f64) -> (f64, f64) {
    if var < VARIANCE_FLOOR {
        let r = mu.max(0.0);
        return (r, r * r);
    }
    let sd = var.sqrt();
    let half_cdf = 0.5 * (1.0 + erf(mu / (std::f64::consts::SQRT_2 * sd)));
    let pdf_term = sd * FRAC_1_SQRT_2PI * (-0.5 * mu * mu / var).exp();
    let mean = mu * half_cdf + pdf_term;
    let e2 = (var + mu * mu) * half_cdf + mu * pdf_term;
    (mean.max(0.0), e2.max(mean * mean))
}

pub fn relu(a: &GaussianTensor) -> Result<GaussianTensor> {
    require_kind(a.kind(), MomentKind::MeanVariance, "relu input")?;
    let (mean, e2): (Vec<f32>, Vec<f32>) = a
        .mean()
        .iter()
        .zip(a.spread())
        .map(|(&m, &v)| {
            let (om, oe) = relu_moments(m as f64, v as f64);
            (om as f32, oe as f32)
        })
        .unzip();
    GaussianTensor::new(a.shape().to_vec(), mean, e2, MomentKind::MeanSecondRawMoment)
}
