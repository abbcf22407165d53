//! Fully connected layers on Gaussian activations.
//!
//! For input `x` and weights `w` (independent of each other and across
//! elements) the pre-activation `a_i = sum_j w_ij x_j` has
//!
//! ```text
//! mean_i = sum_j mu_w[i,j] * mu_x[j]
//! var_i  = sum_j E[w^2][i,j] * E[x^2][j] - (mu_w[i,j] * mu_x[j])^2
//! ```
//!
//! The second-raw-moment form lets the mean product be reused by the variance
//! accumulation, so [`dense`] computes both in a single loop nest.

use crate::error::{PfpError, Result};
use crate::ops::weights::{BiasMode, GaussianWeights};
use crate::tensor::{mv_to_me2, GaussianTensor, MomentKind, Tensor};

pub(crate) struct DenseDims {
    pub batch: usize,
    pub d_in: usize,
    pub d_out: usize,
}

pub(crate) fn dense_dims(x_shape: &[usize], w: &GaussianWeights) -> Result<DenseDims> {
    if x_shape.len() != 2 {
        return Err(PfpError::shape(format!(
            "dense input must be [N, d_in], got {x_shape:?}"
        )));
    }
    if w.shape.len() != 2 || w.shape[1] != x_shape[1] {
        return Err(PfpError::shape(format!(
            "dense weights {:?} do not fit input {:?}",
            w.shape, x_shape
        )));
    }
    if let Some(b) = w.bias.width() {
        if b != w.shape[0] {
            return Err(PfpError::shape(format!("bias width {b} != {}", w.shape[0])));
        }
    }
    Ok(DenseDims {
        batch: x_shape[0],
        d_in: x_shape[1],
        d_out: w.shape[0],
    })
}

pub(crate) fn require_kind(found: MomentKind, expected: MomentKind, what: &str) -> Result<()> {
    if found != expected {
        return Err(PfpError::repr(
            format!("{what} in {expected}"),
            format!("{what} in {found}"),
        ));
    }
    Ok(())
}

/// Adds bias moments and packs (mean, variance) buffers into `out_kind`.
pub(crate) fn finish(
    shape: Vec<usize>,
    mut mean: Vec<f32>,
    mut var: Vec<f32>,
    bias: &BiasMode,
    width: usize,
    inner: usize,
    out_kind: MomentKind,
) -> GaussianTensor {
    if !matches!(bias, BiasMode::None) {
        for (idx, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
            let unit = (idx / inner) % width;
            *m += bias.mean_at(unit);
            *v += bias.variance_at(unit);
        }
    }
    for v in var.iter_mut() {
        *v = v.max(0.0);
    }
    if out_kind == MomentKind::MeanSecondRawMoment {
        for (v, &m) in var.iter_mut().zip(&mean) {
            *v = mv_to_me2(m, *v);
        }
    }
    GaussianTensor::new(shape, mean, var, out_kind).expect("buffers sized from shape")
}

/// Joint dense operator on second raw moments.
pub fn dense(x: &GaussianTensor, w: &GaussianWeights, out_kind: MomentKind) -> Result<GaussianTensor> {
    require_kind(x.kind(), MomentKind::MeanSecondRawMoment, "input")?;
    require_kind(w.kind, MomentKind::MeanSecondRawMoment, "weights")?;
    let d = dense_dims(x.shape(), w)?;
    let (xm, xe) = (x.mean(), x.spread());
    let mut mean = vec![0.0f32; d.batch * d.d_out];
    let mut var = vec![0.0f32; d.batch * d.d_out];
    for n in 0..d.batch {
        let xm = &xm[n * d.d_in..(n + 1) * d.d_in];
        let xe = &xe[n * d.d_in..(n + 1) * d.d_in];
        for i in 0..d.d_out {
            let wm = &w.mean[i * d.d_in..(i + 1) * d.d_in];
            let we = &w.spread[i * d.d_in..(i + 1) * d.d_in];
            let mut acc_m = 0.0f32;
            let mut acc_v = 0.0f32;
            for j in 0..d.d_in {
                let p = wm[j] * xm[j];
                acc_m += p;
                acc_v += we[j] * xe[j] - p * p;
            }
            mean[n * d.d_out + i] = acc_m;
            var[n * d.d_out + i] = acc_v;
        }
    }
    Ok(finish(
        vec![d.batch, d.d_out],
        mean,
        var,
        &w.bias,
        d.d_out,
        1,
        out_kind,
    ))
}

/// Dense operator on the mean/variance representation.
pub fn dense_mv(x: &GaussianTensor, w: &GaussianWeights, out_kind: MomentKind) -> Result<GaussianTensor> {
    require_kind(x.kind(), MomentKind::MeanVariance, "input")?;
    require_kind(w.kind, MomentKind::MeanVariance, "weights")?;
    let d = dense_dims(x.shape(), w)?;
    let (xm, xv) = (x.mean(), x.spread());
    let mut mean = vec![0.0f32; d.batch * d.d_out];
    let mut var = vec![0.0f32; d.batch * d.d_out];
    for n in 0..d.batch {
        let xm = &xm[n * d.d_in..(n + 1) * d.d_in];
        let xv = &xv[n * d.d_in..(n + 1) * d.d_in];
        for i in 0..d.d_out {
            let wm = &w.mean[i * d.d_in..(i + 1) * d.d_in];
            let wv = &w.spread[i * d.d_in..(i + 1) * d.d_in];
            let mut acc_m = 0.0f32;
            let mut acc_v = 0.0f32;
            for j in 0..d.d_in {
                acc_m += wm[j] * xm[j];
                acc_v += wv[j] * xm[j] * xm[j] + wm[j] * wm[j] * xv[j] + wv[j] * xv[j];
            }
            mean[n * d.d_out + i] = acc_m;
            var[n * d.d_out + i] = acc_v;
        }
    }
    Ok(finish(
        vec![d.batch, d.d_out],
        mean,
        var,
        &w.bias,
        d.d_out,
        1,
        out_kind,
    ))
}

/// First-layer dense operator: deterministic input, weight variances.
pub fn dense_first(x: &Tensor, w: &GaussianWeights, out_kind: MomentKind) -> Result<GaussianTensor> {
    require_kind(w.kind, MomentKind::MeanVariance, "first-layer weights")?;
    let d = dense_dims(x.shape(), w)?;
    let xs = x.data();
    let mut mean = vec![0.0f32; d.batch * d.d_out];
    let mut var = vec![0.0f32; d.batch * d.d_out];
    for n in 0..d.batch {
        let xr = &xs[n * d.d_in..(n + 1) * d.d_in];
        for i in 0..d.d_out {
            let wm = &w.mean[i * d.d_in..(i + 1) * d.d_in];
            let wv = &w.spread[i * d.d_in..(i + 1) * d.d_in];
            let mut acc_m = 0.0f32;
            let mut acc_v = 0.0f32;
            for j in 0..d.d_in {
                acc_m += wm[j] * xr[j];
                acc_v += wv[j] * xr[j] * xr[j];
            }
            mean[n * d.d_out + i] = acc_m;
            var[n * d.d_out + i] = acc_v;
        }
    }
    Ok(finish(
        vec![d.batch, d.d_out],
        mean,
        var,
        &w.bias,
        d.d_out,
        1,
        out_kind,
    ))
}

/// Mean path of the split dense operator pair.
pub fn dense_split_mean(x: &GaussianTensor, w: &GaussianWeights) -> Result<Vec<f32>> {
    require_kind(x.kind(), MomentKind::MeanSecondRawMoment, "input")?;
    require_kind(w.kind, MomentKind::MeanSecondRawMoment, "weights")?;
    let d = dense_dims(x.shape(), w)?;
    let xm = x.mean();
    let mut out = vec![0.0f32; d.batch * d.d_out];
    for n in 0..d.batch {
        let xr = &xm[n * d.d_in..(n + 1) * d.d_in];
        for i in 0..d.d_out {
            let wr = &w.mean[i * d.d_in..(i + 1) * d.d_in];
            let mut acc = 0.0f32;
            for j in 0..d.d_in {
                acc += wr[j] * xr[j];
            }
            out[n * d.d_out + i] = acc + w.bias.mean_at(i);
        }
    }
    Ok(out)
}

/// Variance path of the split dense operator pair. Recomputes the mean
/// products it needs instead of sharing them with the mean path.
pub fn dense_split_var(x: &GaussianTensor, w: &GaussianWeights) -> Result<Vec<f32>> {
    require_kind(x.kind(), MomentKind::MeanSecondRawMoment, "input")?;
    require_kind(w.kind, MomentKind::MeanSecondRawMoment, "weights")?;
    let d = dense_dims(x.shape(), w)?;
    let (xm, xe) = (x.mean(), x.spread());
    let mut out = vec![0.0f32; d.batch * d.d_out];
    for n in 0..d.batch {
        let xm = &xm[n * d.d_in..(n + 1) * d.d_in];
        let xe = &xe[n * d.d_in..(n + 1) * d.d_in];
        for i in 0..d.d_out {
            let wm = &w.mean[i * d.d_in..(i + 1) * d.d_in];
            let we = &w.spread[i * d.d_in..(i + 1) * d.d_in];
            let mut acc = 0.0f32;
            for j in 0..d.d_in {
                let p = wm[j] * xm[j];
                acc += we[j] * xe[j] - p * p;
            }
            out[n * d.d_out + i] = (acc + w.bias.variance_at(i)).max(0.0);
        }
    }
    Ok(out)
}

/// Runs the split pair and packs the result like [`dense`] does.
pub fn dense_split(x: &GaussianTensor, w: &GaussianWeights, out_kind: MomentKind) -> Result<GaussianTensor> {
    let mean = dense_split_mean(x, w)?;
    let mut var = dense_split_var(x, w)?;
    if out_kind == MomentKind::MeanSecondRawMoment {
        for (v, &m) in var.iter_mut().zip(&mean) {
            *v = mv_to_me2(m, *v);
        }
    }
    GaussianTensor::new(vec![x.shape()[0], w.shape[0]], mean, var, out_kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ME2: MomentKind = MomentKind::MeanSecondRawMoment;
    const MV: MomentKind = MomentKind::MeanVariance;

    fn weights(shape: Vec<usize>, mean: Vec<f32>, spread: Vec<f32>, kind: MomentKind) -> GaussianWeights {
        GaussianWeights::new(shape, mean, spread, kind, BiasMode::None).unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, n: usize, d_in: usize, d_out: usize) -> (GaussianTensor, GaussianWeights) {
        let xm: Vec<f32> = (0..n * d_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xv: Vec<f32> = (0..n * d_in).map(|_| rng.random_range(0.0..1.0)).collect();
        let wm: Vec<f32> = (0..d_in * d_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv: Vec<f32> = (0..d_in * d_out).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = GaussianTensor::new(vec![n, d_in], xm, xv, MV).unwrap();
        let w = weights(vec![d_out, d_in], wm, wv, MV);
        (x, w)
    }

    fn rel_close(a: &[f32], b: &[f32], rel: f32) -> bool {
        let scale = b.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= rel * x.abs().max(y.abs()).max(1e-2 * scale))
    }

    #[test]
    fn deterministic_ones_degenerate_to_matmul() {
        let x = GaussianTensor::new(vec![1, 2], vec![1.0, 1.0], vec![1.0, 1.0], ME2).unwrap();
        let w = weights(vec![1, 2], vec![1.0, 1.0], vec![1.0, 1.0], ME2);
        let out = dense(&x, &w, MV).unwrap();
        assert_eq!(out.mean(), &[2.0]);
        assert_eq!(out.spread(), &[0.0]);
    }

    #[test]
    fn product_of_standard_normals() {
        let x = GaussianTensor::new(vec![1, 1], vec![0.0], vec![1.0], ME2).unwrap();
        let w = weights(vec![1, 1], vec![0.0], vec![1.0], ME2);
        let out = dense(&x, &w, MV).unwrap();
        assert_eq!(out.mean(), &[0.0]);
        assert_eq!(out.spread(), &[1.0]);
    }

    #[test]
    fn mv_and_me2_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (x, w) = random_layer(&mut rng, 3, 17, 5);
            let a = dense_mv(&x, &w, MV).unwrap();
            let b = dense(&x.convert(ME2), &w.to_kind(ME2), MV).unwrap();
            assert!(rel_close(a.mean(), b.mean(), 1e-5));
            assert!(rel_close(a.spread(), b.spread(), 1e-4));
        }
    }

    #[test]
    fn deterministic_weights_or_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, w) = random_layer(&mut rng, 1, 1, 1);
        let det_w = weights(vec![1, 1], w.mean.clone(), vec![0.0], MV);
        let out = dense_mv(&x, &det_w, MV).unwrap();
        assert_eq!(out.spread()[0], w.mean[0] * w.mean[0] * x.spread()[0]);

        let det_x = GaussianTensor::new(vec![1, 1], x.mean().to_vec(), vec![0.0], MV).unwrap();
        let out = dense_mv(&det_x, &w, MV).unwrap();
        assert_eq!(out.spread()[0], w.spread[0] * x.mean()[0] * x.mean()[0]);
    }

    #[test]
    fn first_layer_cases() {
        let w = weights(vec![1, 1], vec![2.0], vec![3.0], MV);
        let out = dense_first(&Tensor::new(vec![1, 1], vec![1.0]).unwrap(), &w, MV).unwrap();
        assert_eq!((out.mean()[0], out.spread()[0]), (2.0, 3.0));

        let w = GaussianWeights::new(
            vec![2, 3],
            vec![1.0; 6],
            vec![1.0; 6],
            MV,
            BiasMode::Probabilistic {
                mean: vec![0.5, -0.5],
                variance: vec![0.25, 0.125],
            },
        )
        .unwrap();
        let out = dense_first(&Tensor::zeros(vec![1, 3]), &w, MV).unwrap();
        assert_eq!(out.mean(), &[0.5, -0.5]);
        assert_eq!(out.spread(), &[0.25, 0.125]);

        let me2 = weights(vec![1, 1], vec![2.0], vec![7.0], ME2);
        assert!(matches!(
            dense_first(&Tensor::zeros(vec![1, 1]), &me2, MV),
            Err(PfpError::RepresentationMismatch { .. })
        ));
    }

    #[test]
    fn kind_and_shape_errors() {
        let x = GaussianTensor::new(vec![1, 2], vec![0.0; 2], vec![0.0; 2], MV).unwrap();
        let w = weights(vec![1, 2], vec![0.0; 2], vec![0.0; 2], ME2);
        assert!(matches!(dense(&x, &w, MV), Err(PfpError::RepresentationMismatch { .. })));
        let x = x.convert(ME2);
        let w3 = weights(vec![1, 3], vec![0.0; 3], vec![0.0; 3], ME2);
        assert!(matches!(dense(&x, &w3, MV), Err(PfpError::ShapeMismatch(_))));
    }

    #[test]
    fn split_pair_matches_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(1..4);
            let d_in = rng.random_range(1..40);
            let d_out = rng.random_range(1..12);
            let (x, w) = random_layer(&mut rng, n, d_in, d_out);
            let (x, w) = (x.convert(ME2), w.to_kind(ME2));
            let joint = dense(&x, &w, MV).unwrap();
            let split = dense_split(&x, &w, MV).unwrap();
            for (a, b) in joint.mean().iter().zip(split.mean()) {
                assert!((a - b).abs() <= 1e-6);
            }
            for (a, b) in joint.spread().iter().zip(split.spread()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
        let x = GaussianTensor::new(vec![1, 2], vec![1.0, 2.0], vec![1.0, 4.0], ME2).unwrap();
        let w = weights(vec![1, 2], vec![3.0, 4.0], vec![9.0, 16.0], ME2);
        assert_eq!(dense_split(&x, &w, MV).unwrap().spread(), &[0.0]);
    }

    #[test]
    fn output_kind_me2_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, w) = random_layer(&mut rng, 2, 8, 4);
        let out = dense_mv(&x, &w, ME2).unwrap();
        assert_eq!(out.kind(), ME2);
        out.assert_valid().unwrap();
    }
}
