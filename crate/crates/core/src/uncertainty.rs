//! Predictive uncertainty from logit samples.
//!
//! All entropies are in nats. For a batch of `S` logit samples per item the
//! total uncertainty is the entropy of the sample-averaged softmax, the
//! aleatoric part is the mean entropy of the per-sample softmax, and their
//! difference is the mutual information between prediction and weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PfpError, Result};
use crate::mc::SampleBatch;

/// Per-item, per-class Gaussian over the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDistribution {
    items: usize,
    classes: usize,
    mean: Vec<f32>,
    variance: Vec<f32>,
}

impl LogitDistribution {
    pub fn new(items: usize, classes: usize, mean: Vec<f32>, variance: Vec<f32>) -> Result<Self> {
        if mean.len() != items * classes || variance.len() != items * classes {
            return Err(PfpError::shape(format!(
                "logit distribution [{items}, {classes}] got {} means / {} variances",
                mean.len(),
                variance.len()
            )));
        }
        if let Some(i) = variance.iter().position(|v| v.is_nan() || *v < 0.0) {
            return Err(PfpError::InvariantViolation {
                index: i,
                mean: mean[i],
                spread: variance[i],
                kind: crate::tensor::MomentKind::MeanVariance,
            });
        }
        Ok(LogitDistribution {
            items,
            classes,
            mean,
            variance,
        })
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn variance(&self) -> &[f32] {
        &self.variance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub total_entropy: Vec<f64>,
    pub softmax_entropy: Vec<f64>,
    pub mutual_information: Vec<f64>,
}

impl UncertaintyReport {
    pub fn from_samples(batch: &SampleBatch) -> Self {
        let total_entropy = shannon_entropy(batch);
        let softmax_entropy = softmax_entropy(batch);
        let mutual_information = total_entropy
            .iter()
            .zip(&softmax_entropy)
            .map(|(t, a)| floor_mi(t - a))
            .collect();
        UncertaintyReport {
            total_entropy,
            softmax_entropy,
            mutual_information,
        }
    }

    pub fn items(&self) -> usize {
        self.total_entropy.len()
    }
}

fn floor_mi(mi: f64) -> f64 {
    debug_assert!(mi >= -1e-9, "mutual information {mi} below round-off tolerance");
    mi.max(0.0)
}

/// Numerically stable softmax of one row, in f64.
pub fn softmax_row(logits: &[f32], out: &mut [f64]) {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l as f64 - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax over the last axis of width `classes`.
pub fn softmax(logits: &[f32], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        softmax_row(row, dst);
    }
    out
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Total predictive uncertainty: entropy of the mean softmax.
pub fn shannon_entropy(batch: &SampleBatch) -> Vec<f64> {
    let (s, n, k) = batch.dims();
    let mut probs = vec![0.0; k];
    let mut mean = vec![0.0; k];
    (0..n)
        .map(|item| {
            mean.iter_mut().for_each(|v| *v = 0.0);
            for sample in 0..s {
                softmax_row(batch.row(sample, item), &mut probs);
                for (m, p) in mean.iter_mut().zip(&probs) {
                    *m += p;
                }
            }
            mean.iter_mut().for_each(|v| *v /= s as f64);
            entropy(&mean)
        })
        .collect()
}

/// Aleatoric uncertainty: mean over samples of the per-sample entropy.
pub fn softmax_entropy(batch: &SampleBatch) -> Vec<f64> {
    let (s, n, k) = batch.dims();
    let mut probs = vec![0.0; k];
    (0..n)
        .map(|item| {
            let total: f64 = (0..s)
                .map(|sample| {
                    softmax_row(batch.row(sample, item), &mut probs);
                    entropy(&probs)
                })
                .sum();
            total / s as f64
        })
        .collect()
}

/// Epistemic uncertainty: total minus aleatoric, floored at zero.
pub fn mutual_information(batch: &SampleBatch) -> Vec<f64> {
    UncertaintyReport::from_samples(batch).mutual_information
}

/// Draws `samples` logit vectors per item from independent per-class
/// Gaussians. Sample `s` uses its own ChaCha stream, so output does not
/// depend on evaluation order.
pub fn logit_sample(d: &LogitDistribution, samples: usize, seed: u64) -> SampleBatch {
    let (n, k) = (d.items, d.classes);
    let sd: Vec<f32> = d.variance.iter().map(|v| v.sqrt()).collect();
    let mut logits = vec![0.0f32; samples * n * k];
    for (s, chunk) in logits.chunks_exact_mut(n * k).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        for ((out, &m), &sigma) in chunk.iter_mut().zip(&d.mean).zip(&sd) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *out = m + sigma * z as f32;
        }
    }
    SampleBatch::new(samples, n, k, logits, seed).expect("sized from distribution")
}

/// Area under the ROC curve with out-of-distribution items as positives,
/// computed as the Mann-Whitney statistic with ties counted one half.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(PfpError::EmptyClass);
    }
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, false))
        .chain(scores_out.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Mid-ranks (1-based) over tie groups, summed for the positive class.
    let mut rank_sum_out = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        let positives = all[i..=j].iter().filter(|e| e.1).count();
        rank_sum_out += mid_rank * positives as f64;
        i = j + 1;
    }
    let (m, p) = (scores_in.len() as f64, scores_out.len() as f64);
    Ok((rank_sum_out - p * (p + 1.0) / 2.0) / (m * p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiGapConfig {
    pub classes: usize,
    pub items: usize,
    pub samples: usize,
    /// Logit magnitude on the selected class.
    pub lambda: f32,
    /// Number of classes the per-sample selection is drawn from; 1 makes
    /// every sample of an item pick the same class.
    pub choices: usize,
    pub seed: u64,
}

impl Default for MiGapConfig {
    fn default() -> Self {
        MiGapConfig {
            classes: 10,
            items: 512,
            samples: 1024,
            lambda: 12.0,
            choices: 10,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiGapResult {
    pub total_sampled: f64,
    pub total_gaussian: f64,
    pub mi_sampled: f64,
    pub mi_gaussian: f64,
    pub relative_underestimate: f64,
}

/// Compares mutual information of random one-hot logit samples with the
/// value obtained after summarising the same samples by per-class Gaussians
/// and resampling them. Values are averaged over items.
pub fn mi_gap_experiment(cfg: &MiGapConfig) -> MiGapResult {
    use rand::Rng;

    let (n, k, s) = (cfg.items, cfg.classes, cfg.samples);
    let choices = cfg.choices.clamp(1, k);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut logits = vec![0.0f32; s * n * k];
    for item in 0..n {
        let offset = rng.random_range(0..k);
        for sample in 0..s {
            let class = (offset + rng.random_range(0..choices)) % k;
            logits[(sample * n + item) * k + class] = cfg.lambda;
        }
    }
    let sampled = SampleBatch::new(s, n, k, logits, cfg.seed).expect("sized above");
    let gaussian = logit_sample(&sampled.summarize(), s, cfg.seed.wrapping_add(1));

    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let rs = UncertaintyReport::from_samples(&sampled);
    let rg = UncertaintyReport::from_samples(&gaussian);
    let mi_sampled = avg(&rs.mutual_information);
    let mi_gaussian = avg(&rg.mutual_information);
    let relative_underestimate = if mi_sampled > 1e-12 {
        1.0 - mi_gaussian / mi_sampled
    } else {
        0.0
    };
    MiGapResult {
        total_sampled: avg(&rs.total_entropy),
        total_gaussian: avg(&rg.total_entropy),
        mi_sampled,
        mi_gaussian,
        relative_underestimate,
    }
}
