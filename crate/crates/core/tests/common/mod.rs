#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Sample estimates for one simulated quantity.
#[derive(Debug, Clone, Copy)]
pub struct Stat {
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
    pub se_var: f64,
}

pub fn normal(rng: &mut ChaCha8Rng, mean: f64, var: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + var.sqrt() * z
}

const CHUNK: usize = 1 << 14;

/// Runs `draw` `n` times, each filling `outputs` values, and returns per-output
/// mean / variance with standard errors. Power sums are taken about a pilot
/// mean, so the estimate is exact in f64 up to rounding regardless of offset.
pub fn simulate<F>(n: usize, outputs: usize, seed: u64, draw: F) -> Vec<Stat>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let mut shift = vec![0.0; outputs];
    let mut buf = vec![0.0; outputs];
    let pilot = 1000;
    for _ in 0..pilot {
        draw(&mut rng, &mut buf);
        for (s, b) in shift.iter_mut().zip(&buf) {
            *s += b / pilot as f64;
        }
    }

    let chunks = n.div_ceil(CHUNK);
    let sums = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = CHUNK.min(n - c * CHUNK);
            let mut acc = vec![[0.0f64; 4]; outputs];
            let mut buf = vec![0.0; outputs];
            for _ in 0..count {
                draw(&mut rng, &mut buf);
                for ((a, b), s) in acc.iter_mut().zip(&buf).zip(&shift) {
                    let d = b - s;
                    let d2 = d * d;
                    a[0] += d;
                    a[1] += d2;
                    a[2] += d2 * d;
                    a[3] += d2 * d2;
                }
            }
            acc
        })
        .reduce(
            || vec![[0.0f64; 4]; outputs],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    for i in 0..4 {
                        x[i] += y[i];
                    }
                }
                a
            },
        );

    let nf = n as f64;
    sums.iter()
        .zip(&shift)
        .map(|(s, k)| {
            let (a1, a2, a3, a4) = (s[0] / nf, s[1] / nf, s[2] / nf, s[3] / nf);
            let m2 = a2 - a1 * a1;
            let m4 = a4 - 4.0 * a1 * a3 + 6.0 * a1 * a1 * a2 - 3.0 * a1.powi(4);
            let var = m2 * nf / (nf - 1.0);
            Stat {
                mean: k + a1,
                var,
                se_mean: (var / nf).sqrt(),
                se_var: ((m4 - m2 * m2).max(0.0) / nf).sqrt(),
            }
        })
        .collect()
}

/// `|predicted - estimate| <= k * se`, with a relative floor of 1e-6 for
/// zero-spread quantities.
pub fn within(predicted: f64, estimate: f64, se: f64, k: f64) -> bool {
    (predicted - estimate).abs() <= k * se + 1e-6 * predicted.abs().max(estimate.abs()).max(1e-6)
}

#[track_caller]
pub fn assert_within(label: &str, predicted: f64, estimate: f64, se: f64) {
    assert!(
        within(predicted, estimate, se, 3.0),
        "{label}: predicted {predicted} vs estimate {estimate} (se {se}, off by {:.2} se)",
        (predicted - estimate).abs() / se
    );
}
