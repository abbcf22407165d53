//! Tensors of independent Gaussian marginals.
//!
//! A [`GaussianTensor`] carries a mean buffer and a spread buffer of equal
//! length. The spread is either the variance or the second raw moment
//! `E[x^2] = mu^2 + var`, selected by [`MomentKind`]. Compute layers prefer the
//! second raw moment on their inputs, activations prefer variances.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{PfpError, Result};

/// Which second-order quantity the spread buffer holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MomentKind {
    #[serde(rename = "mv")]
    MeanVariance,
    #[serde(rename = "me2")]
    MeanSecondRawMoment,
}

impl MomentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MomentKind::MeanVariance => "mv",
            MomentKind::MeanSecondRawMoment => "me2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mv" => Some(MomentKind::MeanVariance),
            "me2" => Some(MomentKind::MeanSecondRawMoment),
            _ => None,
        }
    }
}

impl fmt::Display for MomentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Slack allowed below `mean^2` for a second raw moment.
#[inline]
pub fn me2_slack(mean: f32) -> f32 {
    1e-6 * (mean * mean).max(1.0)
}

#[inline]
pub(crate) fn mv_to_me2(mean: f32, var: f32) -> f32 {
    let m = mean as f64;
    (m * m + var as f64) as f32
}

#[inline]
pub(crate) fn me2_to_mv(mean: f32, e2: f32) -> f32 {
    let m = mean as f64;
    ((e2 as f64 - m * m) as f32).max(0.0)
}

/// Number of elements described by `shape`.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A deterministic (point-valued) tensor, used for network inputs and the
/// sampled forward passes of the Monte-Carlo baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(PfpError::shape(format!(
                "shape {:?} needs {} elements, buffer has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }
}

/// Batched tensor of independent Gaussian marginals, row-major, batch first.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTensor {
    shape: Vec<usize>,
    mean: Vec<f32>,
    spread: Vec<f32>,
    kind: MomentKind,
}

impl GaussianTensor {
    /// Builds a tensor after checking buffer lengths. Value invariants are
    /// checked separately by [`GaussianTensor::assert_valid`].
    pub fn new(shape: Vec<usize>, mean: Vec<f32>, spread: Vec<f32>, kind: MomentKind) -> Result<Self> {
        let n = numel(&shape);
        if mean.len() != n || spread.len() != n {
            return Err(PfpError::shape(format!(
                "shape {:?} needs {} elements, got mean {} / spread {}",
                shape,
                n,
                mean.len(),
                spread.len()
            )));
        }
        Ok(GaussianTensor {
            shape,
            mean,
            spread,
            kind,
        })
    }

    /// Zero-variance tensor holding `t` exactly.
    pub fn deterministic(t: &Tensor, kind: MomentKind) -> Self {
        let mean = t.data().to_vec();
        let spread = match kind {
            MomentKind::MeanVariance => vec![0.0; mean.len()],
            MomentKind::MeanSecondRawMoment => mean.iter().map(|m| m * m).collect(),
        };
        GaussianTensor {
            shape: t.shape().to_vec(),
            mean,
            spread,
            kind,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn spread(&self) -> &[f32] {
        &self.spread
    }

    pub fn kind(&self) -> MomentKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>, Vec<f32>, MomentKind) {
        (self.shape, self.mean, self.spread, self.kind)
    }

    /// Variances regardless of the stored representation.
    pub fn variance(&self) -> Vec<f32> {
        match self.kind {
            MomentKind::MeanVariance => self.spread.clone(),
            MomentKind::MeanSecondRawMoment => self
                .mean
                .iter()
                .zip(&self.spread)
                .map(|(&m, &e2)| me2_to_mv(m, e2))
                .collect(),
        }
    }

    /// Re-expresses the spread buffer in `target` form. Negative variances
    /// from round-off are clamped to zero. Same-kind conversion is a copy.
    pub fn convert(&self, target: MomentKind) -> GaussianTensor {
        let spread = match (self.kind, target) {
            (a, b) if a == b => self.spread.clone(),
            (MomentKind::MeanVariance, MomentKind::MeanSecondRawMoment) => self
                .mean
                .iter()
                .zip(&self.spread)
                .map(|(&m, &v)| mv_to_me2(m, v))
                .collect(),
            _ => self.variance(),
        };
        GaussianTensor {
            shape: self.shape.clone(),
            mean: self.mean.clone(),
            spread,
            kind: target,
        }
    }

    /// Consuming variant of [`GaussianTensor::convert`] that avoids copying
    /// when the kind already matches.
    pub fn into_kind(self, target: MomentKind) -> GaussianTensor {
        if self.kind == target {
            self
        } else {
            self.convert(target)
        }
    }

    /// Checks every value invariant and reports the first offending element.
    pub fn assert_valid(&self) -> Result<()> {
        check_spread(&self.mean, &self.spread, self.kind)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        GaussianTensor::new(shape, self.mean, self.spread, self.kind)
    }
}

/// Validates a (mean, spread) buffer pair under `kind`.
pub fn check_spread(mean: &[f32], spread: &[f32], kind: MomentKind) -> Result<()> {
    for (index, (&m, &s)) in mean.iter().zip(spread).enumerate() {
        let ok = m.is_finite()
            && s.is_finite()
            && match kind {
                MomentKind::MeanVariance => s >= 0.0,
                MomentKind::MeanSecondRawMoment => s >= m * m - me2_slack(m),
            };
        if !ok {
            return Err(PfpError::InvariantViolation {
                index,
                mean: m,
                spread: s,
                kind,
            });
        }
    }
    Ok(())
}
