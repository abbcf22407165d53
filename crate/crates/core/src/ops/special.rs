//! Normal-distribution helpers shared by the moment-matching operators.

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Error function, accurate to a few ulp over the whole real line.
#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal cumulative distribution.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}
