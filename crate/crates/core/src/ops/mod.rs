//! Distribution-propagating operators.

pub mod conv;
pub mod dense;
pub mod maxpool;
pub mod point;
pub mod relu;
pub mod special;
pub mod weights;

pub use conv::{conv2d, conv2d_first, ConvGeometry};
pub use dense::{dense, dense_first, dense_mv, dense_split, dense_split_mean, dense_split_var};
pub use maxpool::{gaussian_max, maxpool, maxpool_vectorized_k2};
pub use relu::{relu, relu_moments};
pub use weights::{BiasMode, GaussianWeights};

use crate::error::{PfpError, Result};
use crate::tensor::GaussianTensor;

/// Collapses `[N, C, H, W]` to `[N, C*H*W]`. Buffers and kind are untouched.
pub fn flatten(a: GaussianTensor) -> Result<GaussianTensor> {
    let shape = flat_shape(a.shape())?;
    a.reshape(shape)
}

pub(crate) fn flat_shape(shape: &[usize]) -> Result<Vec<usize>> {
    match shape {
        [n, rest @ ..] if !rest.is_empty() => Ok(vec![*n, rest.iter().product()]),
        _ => Err(PfpError::shape(format!("cannot flatten shape {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::MomentKind;

    #[test]
    fn flatten_keeps_buffers_and_kind() {
        let n = 2 * 3 * 4 * 4;
        let mean: Vec<f32> = (0..n).map(|v| v as f32).collect();
        let spread: Vec<f32> = mean.iter().map(|m| m * m + 1.0).collect();
        let t = GaussianTensor::new(vec![2, 3, 4, 4], mean.clone(), spread.clone(), MomentKind::MeanSecondRawMoment)
            .unwrap();
        let f = flatten(t.clone()).unwrap();
        assert_eq!(f.shape(), &[2, 48]);
        assert_eq!(f.mean(), &mean[..]);
        assert_eq!(f.spread(), &spread[..]);
        assert_eq!(f.kind(), MomentKind::MeanSecondRawMoment);
        assert_eq!(f.reshape(vec![2, 3, 4, 4]).unwrap(), t);
    }
}
