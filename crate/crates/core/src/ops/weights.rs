use crate::error::{PfpError, Result};
use crate::tensor::{check_spread, me2_to_mv, mv_to_me2, numel, MomentKind};

/// Bias attached to a compute layer.
#[derive(Debug, Clone, PartialEq)]
pub enum BiasMode {
    None,
    Deterministic { mean: Vec<f32> },
    Probabilistic { mean: Vec<f32>, variance: Vec<f32> },
}

impl BiasMode {
    pub fn width(&self) -> Option<usize> {
        match self {
            BiasMode::None => None,
            BiasMode::Deterministic { mean } | BiasMode::Probabilistic { mean, .. } => Some(mean.len()),
        }
    }

    pub fn mean_at(&self, i: usize) -> f32 {
        match self {
            BiasMode::None => 0.0,
            BiasMode::Deterministic { mean } | BiasMode::Probabilistic { mean, .. } => mean[i],
        }
    }

    pub fn variance_at(&self, i: usize) -> f32 {
        match self {
            BiasMode::Probabilistic { variance, .. } => variance[i],
            _ => 0.0,
        }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        match self {
            BiasMode::None => Ok(()),
            BiasMode::Deterministic { mean } => check_len(mean.len(), width),
            BiasMode::Probabilistic { mean, variance } => {
                check_len(mean.len(), width)?;
                check_len(variance.len(), width)?;
                check_spread(mean, variance, MomentKind::MeanVariance)
            }
        }
    }
}

fn check_len(got: usize, width: usize) -> Result<()> {
    if got != width {
        return Err(PfpError::shape(format!(
            "bias has {got} entries, layer width is {width}"
        )));
    }
    Ok(())
}

/// Gaussian weight posterior of a dense (`[out, in]`) or convolution
/// (`[out_ch, in_ch, kh, kw]`) layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWeights {
    pub shape: Vec<usize>,
    pub mean: Vec<f32>,
    pub spread: Vec<f32>,
    pub kind: MomentKind,
    pub bias: BiasMode,
}

impl GaussianWeights {
    pub fn new(
        shape: Vec<usize>,
        mean: Vec<f32>,
        spread: Vec<f32>,
        kind: MomentKind,
        bias: BiasMode,
    ) -> Result<Self> {
        let w = GaussianWeights {
            shape,
            mean,
            spread,
            kind,
            bias,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let n = numel(&self.shape);
        if self.shape.len() != 2 && self.shape.len() != 4 {
            return Err(PfpError::shape(format!(
                "weights must be 2-D or 4-D, got {:?}",
                self.shape
            )));
        }
        if self.mean.len() != n || self.spread.len() != n {
            return Err(PfpError::shape(format!(
                "weight shape {:?} needs {} values, got {} / {}",
                self.shape,
                n,
                self.mean.len(),
                self.spread.len()
            )));
        }
        check_spread(&self.mean, &self.spread, self.kind)?;
        self.bias.validate(self.out_features())
    }

    /// Output width (dense) or output channel count (conv).
    pub fn out_features(&self) -> usize {
        self.shape[0]
    }

    /// Fan-in per output unit.
    pub fn fan_in(&self) -> usize {
        numel(&self.shape[1..])
    }

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

    pub fn to_kind(&self, kind: MomentKind) -> GaussianWeights {
        if kind == self.kind {
            return self.clone();
        }
        let spread = match kind {
            MomentKind::MeanVariance => self.variance(),
            MomentKind::MeanSecondRawMoment => self
                .mean
                .iter()
                .zip(&self.spread)
                .map(|(&m, &v)| mv_to_me2(m, v))
                .collect(),
        };
        GaussianWeights {
            shape: self.shape.clone(),
            mean: self.mean.clone(),
            spread,
            kind,
            bias: self.bias.clone(),
        }
    }

    /// Multiplies every variance (weights and probabilistic bias) by `factor`.
    pub fn scale_variance(&self, factor: f32) -> GaussianWeights {
        if factor == 1.0 {
            return self.clone();
        }
        let f = factor as f64;
        let spread = match self.kind {
            MomentKind::MeanVariance => self.spread.iter().map(|&v| (v as f64 * f) as f32).collect(),
            MomentKind::MeanSecondRawMoment => self
                .mean
                .iter()
                .zip(&self.spread)
                .map(|(&m, &e2)| {
                    let m2 = m as f64 * m as f64;
                    let var = (e2 as f64 - m2).max(0.0);
                    (m2 + f * var) as f32
                })
                .collect(),
        };
        let bias = match &self.bias {
            BiasMode::Probabilistic { mean, variance } => BiasMode::Probabilistic {
                mean: mean.clone(),
                variance: variance.iter().map(|&v| (v as f64 * f) as f32).collect(),
            },
            other => other.clone(),
        };
        GaussianWeights {
            shape: self.shape.clone(),
            mean: self.mean.clone(),
            spread,
            kind: self.kind,
            bias,
        }
    }
}
