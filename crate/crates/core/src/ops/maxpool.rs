//! Max pooling over Gaussian activations.
//!
//! The maximum of two independent Gaussians is moment matched in closed form
//! (Clark's equations). A k x k window is reduced by folding that pairwise
//! step over the window in row-major order, which is exact for k*k == 2 and an
//! approximation beyond.

use crate::error::{PfpError, Result};
use crate::ops::dense::require_kind;
use crate::ops::special::{erf, FRAC_1_SQRT_2PI};
use crate::tensor::{GaussianTensor, MomentKind};

const SPREAD_FLOOR: f64 = 1e-30;

/// Moment-matched `max(a, b)` for independent `a ~ N(m1, v1)`, `b ~ N(m2, v2)`.
/// Returns (mean, variance). Written without branches so the k=2 kernel can
/// stay a flat loop.
#[inline(always)]
pub fn gaussian_max(m1: f64, v1: f64, m2: f64, v2: f64) -> (f64, f64) {
    let theta = (v1 + v2).sqrt().max(SPREAD_FLOOR);
    let alpha = (m1 - m2) / theta;
    let cdf = 0.5 * (1.0 + erf(alpha * std::f64::consts::FRAC_1_SQRT_2));
    let cdf_neg = 1.0 - cdf;
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * alpha * alpha).exp();
    let mean = m1 * cdf + m2 * cdf_neg + theta * pdf;
    let e2 = (m1 * m1 + v1) * cdf + (m2 * m2 + v2) * cdf_neg + (m1 + m2) * theta * pdf;
    (mean, (e2 - mean * mean).max(0.0))
}

fn pool_dims(shape: &[usize], k: usize) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(PfpError::shape(format!("max pool input must be NCHW, got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(PfpError::ShapeIndivisible { k, h, w });
    }
    Ok((shape[0] * shape[1], h, w, k))
}

/// Generic k x k max pool with stride k.
pub fn maxpool(a: &GaussianTensor, k: usize) -> Result<GaussianTensor> {
    require_kind(a.kind(), MomentKind::MeanVariance, "max pool input")?;
    let (planes, h, w, k) = pool_dims(a.shape(), k)?;
    let (oh, ow) = (h / k, w / k);
    let (am, av) = (a.mean(), a.spread());
    let mut mean = Vec::with_capacity(planes * oh * ow);
    let mut var = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let first = base + (y * k) * w + x * k;
                let (mut m, mut v) = (am[first] as f64, av[first] as f64);
                for dy in 0..k {
                    for dx in 0..k {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let i = base + (y * k + dy) * w + x * k + dx;
                        (m, v) = gaussian_max(m, v, am[i] as f64, av[i] as f64);
                    }
                }
                mean.push(m as f32);
                var.push(v as f32);
            }
        }
    }
    let s = a.shape();
    GaussianTensor::new(vec![s[0], s[1], oh, ow], mean, var, MomentKind::MeanVariance)
}

/// 2 x 2 max pool specialised for a fixed window: row pairs are walked with
/// `chunks_exact`, no index arithmetic or branches in the inner loop.
pub fn maxpool_vectorized_k2(a: &GaussianTensor) -> Result<GaussianTensor> {
    require_kind(a.kind(), MomentKind::MeanVariance, "max pool input")?;
    let (planes, h, w, _) = pool_dims(a.shape(), 2)?;
    let (oh, ow) = (h / 2, w / 2);
    let n_out = planes * oh * ow;
    let mut mean = vec![0.0f32; n_out];
    let mut var = vec![0.0f32; n_out];

    let rows_m = a.mean().chunks_exact(2 * w);
    let rows_v = a.spread().chunks_exact(2 * w);
    let out_rows = mean.chunks_exact_mut(ow).zip(var.chunks_exact_mut(ow));
    for ((rm, rv), (om, ov)) in rows_m.zip(rows_v).zip(out_rows) {
        let (top_m, bot_m) = rm.split_at(w);
        let (top_v, bot_v) = rv.split_at(w);
        let iter = top_m
            .chunks_exact(2)
            .zip(top_v.chunks_exact(2))
            .zip(bot_m.chunks_exact(2).zip(bot_v.chunks_exact(2)))
            .zip(om.iter_mut().zip(ov.iter_mut()));
        for (((tm, tv), (bm, bv)), (dm, dv)) in iter {
            let (m, v) = gaussian_max(tm[0] as f64, tv[0] as f64, tm[1] as f64, tv[1] as f64);
            let (m, v) = gaussian_max(m, v, bm[0] as f64, bv[0] as f64);
            let (m, v) = gaussian_max(m, v, bm[1] as f64, bv[1] as f64);
            *dm = m as f32;
            *dv = v as f32;
        }
    }
    let s = a.shape();
    GaussianTensor::new(vec![s[0], s[1], oh, ow], mean, var, MomentKind::MeanVariance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const MV: MomentKind = MomentKind::MeanVariance;

    #[test]
    fn iid_standard_normal_pair() {
        let (m, v) = gaussian_max(0.0, 1.0, 0.0, 1.0);
        let pi = std::f64::consts::PI;
        assert!((m - 1.0 / pi.sqrt()).abs() < 1e-12);
        assert!((v - (1.0 - 1.0 / pi)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_pair_is_plain_max() {
        assert_eq!(gaussian_max(3.0, 0.0, -1.0, 0.0), (3.0, 0.0));
        assert_eq!(gaussian_max(-2.0, 0.0, 7.5, 0.0), (7.5, 0.0));
        let (m, v) = gaussian_max(4.0, 0.0, 4.0, 0.0);
        assert!((m - 4.0).abs() < 1e-12 && v == 0.0);
    }

    #[test]
    fn identical_window_passes_through() {
        let t = GaussianTensor::new(vec![1, 1, 2, 2], vec![1.5; 4], vec![0.0; 4], MV).unwrap();
        let out = maxpool(&t, 2).unwrap();
        assert_eq!(out.mean(), &[1.5]);
        assert_eq!(out.spread(), &[0.0]);
    }

    #[test]
    fn indivisible_window() {
        let t = GaussianTensor::new(vec![1, 1, 3, 4], vec![0.0; 12], vec![0.0; 12], MV).unwrap();
        assert!(matches!(maxpool(&t, 2), Err(PfpError::ShapeIndivisible { .. })));
        assert!(matches!(maxpool_vectorized_k2(&t), Err(PfpError::ShapeIndivisible { .. })));
    }

    #[test]
    fn vectorized_matches_generic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let shape = vec![
                rng.random_range(1..3),
                rng.random_range(1..4),
                2 * rng.random_range(1..6),
                2 * rng.random_range(1..6),
            ];
            let n: usize = shape.iter().product();
            let m: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v: Vec<f32> = (0..n)
                .map(|i| if i % 5 == 0 { 0.0 } else { rng.random_range(0.0..2.0) })
                .collect();
            let t = GaussianTensor::new(shape, m, v, MV).unwrap();
            let a = maxpool(&t, 2).unwrap();
            let b = maxpool_vectorized_k2(&t).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.mean().iter().zip(b.mean()).chain(a.spread().iter().zip(b.spread())) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_input_is_plain_max_pool() {
        let vals: Vec<f32> = vec![1.0, 5.0, 2.0, 0.0, -1.0, 3.0, 8.0, 7.0];
        let t = GaussianTensor::new(vec![1, 1, 2, 4], vals, vec![0.0; 8], MV).unwrap();
        assert_eq!(maxpool_vectorized_k2(&t).unwrap().mean(), &[5.0, 8.0]);
        assert_eq!(maxpool(&t, 2).unwrap().mean(), &[5.0, 8.0]);
    }
}
