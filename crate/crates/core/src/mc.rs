//! Sampling baseline: draw complete weight sets from the Gaussian posterior
//! and run one deterministic forward pass per set.
//!
//! Sample `s` draws its weights from ChaCha8 stream `s` of the user seed, so
//! any sample can be regenerated on its own and the result does not depend on
//! how samples are spread over threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{PfpError, Result};
use crate::model::{LayerSpec, ModelGraph};
use crate::ops::{point, BiasMode};
use crate::tensor::Tensor;
use crate::uncertainty::LogitDistribution;

/// Logit samples laid out `[S, N, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    samples: usize,
    items: usize,
    classes: usize,
    logits: Vec<f32>,
    pub seed: u64,
}

impl SampleBatch {
    pub fn new(samples: usize, items: usize, classes: usize, logits: Vec<f32>, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(PfpError::TooFewSamples { needed: 1, got: 0 });
        }
        if logits.len() != samples * items * classes {
            return Err(PfpError::shape(format!(
                "sample batch [{samples}, {items}, {classes}] got {} logits",
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(PfpError::InvariantViolation {
                index: i,
                mean: logits[i],
                spread: 0.0,
                kind: crate::tensor::MomentKind::MeanVariance,
            });
        }
        Ok(SampleBatch {
            samples,
            items,
            classes,
            logits,
            seed,
        })
    }

    /// `(samples, items, classes)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.samples, self.items, self.classes)
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn row(&self, sample: usize, item: usize) -> &[f32] {
        let k = self.classes;
        let start = (sample * self.items + item) * k;
        &self.logits[start..start + k]
    }

    /// Per-(item, class) Gaussian summary of the samples. A single sample
    /// summarises to zero variance.
    pub fn summarize(&self) -> LogitDistribution {
        let (mean, var) = if self.samples >= 2 {
            let m = mc_moments(self).expect("at least two samples");
            (m.mean, m.variance)
        } else {
            (self.logits.iter().map(|&v| v as f64).collect(), vec![0.0; self.logits.len()])
        };
        LogitDistribution::new(
            self.items,
            self.classes,
            mean.iter().map(|&v| v as f32).collect(),
            var.iter().map(|&v| v as f32).collect(),
        )
        .expect("moments are finite and nonnegative")
    }
}

/// One drawn weight set for a compute layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledLayer {
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

/// Sampled parameters for every compute layer, in layer order.
pub type WeightSet = Vec<SampledLayer>;

#[derive(Debug, Clone)]
struct LayerPosterior {
    mean: Vec<f32>,
    sd: Vec<f32>,
    bias_mean: Option<Vec<f32>>,
    bias_sd: Option<Vec<f32>>,
}

/// Mean / standard-deviation view of every compute layer, prepared once per
/// sampling run.
#[derive(Debug, Clone)]
pub struct Posterior {
    layers: Vec<LayerPosterior>,
}

impl Posterior {
    pub fn new(graph: &ModelGraph) -> Self {
        let layers = graph
            .layers()
            .iter()
            .filter_map(|l| l.weights())
            .map(|w| {
                let (bias_mean, bias_sd) = match &w.bias {
                    BiasMode::None => (None, None),
                    BiasMode::Deterministic { mean } => (Some(mean.clone()), None),
                    BiasMode::Probabilistic { mean, variance } => {
                        (Some(mean.clone()), Some(variance.iter().map(|v| v.sqrt()).collect()))
                    }
                };
                LayerPosterior {
                    mean: w.mean.clone(),
                    sd: w.variance().iter().map(|v| v.sqrt()).collect(),
                    bias_mean,
                    bias_sd,
                }
            })
            .collect();
        Posterior { layers }
    }

    /// Draws weight set number `index` for `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> WeightSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let mut draw = |mean: &[f32], sd: &[f32]| -> Vec<f32> {
            mean.iter()
                .zip(sd)
                .map(|(&m, &s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + s * z as f32
                })
                .collect()
        };
        self.layers
            .iter()
            .map(|l| SampledLayer {
                weight: draw(&l.mean, &l.sd),
                bias: match (&l.bias_mean, &l.bias_sd) {
                    (Some(m), Some(s)) => Some(draw(m, s)),
                    (Some(m), None) => Some(m.clone()),
                    _ => None,
                },
            })
            .collect()
    }
}

/// Draws weight set `index` from the posterior of `graph`.
pub fn sample_weights(graph: &ModelGraph, seed: u64, index: u64) -> WeightSet {
    Posterior::new(graph).sample(seed, index)
}

/// Deterministic forward pass with one drawn weight set.
pub fn forward_sampled(graph: &ModelGraph, weights: &WeightSet, input: &Tensor) -> Result<Tensor> {
    let mut x = input.clone();
    let mut next = weights.iter();
    for layer in graph.layers() {
        x = match layer {
            LayerSpec::DenseFirst(w) | LayerSpec::Dense(w) => {
                let s = next.next().expect("one weight set per compute layer");
                point::linear(&x, &s.weight, s.bias.as_deref(), w.out_features())?
            }
            LayerSpec::Conv2dFirst { weights: w, geometry } | LayerSpec::Conv2d { weights: w, geometry } => {
                let s = next.next().expect("one weight set per compute layer");
                point::conv2d(&x, &s.weight, &w.shape, s.bias.as_deref(), *geometry)?
            }
            LayerSpec::Relu => point::relu(&x),
            LayerSpec::MaxPool { k, .. } => point::maxpool(&x, *k)?,
            LayerSpec::Flatten => {
                let s = x.shape();
                let flat = vec![s[0], s[1..].iter().product()];
                x.reshape(flat)?
            }
            LayerSpec::Convert { .. } => x,
        };
    }
    Ok(x)
}

/// Network output with every weight at its posterior mean.
pub fn forward_mean(graph: &ModelGraph, input: &Tensor) -> Result<Tensor> {
    let ws: WeightSet = graph
        .layers()
        .iter()
        .filter_map(|l| l.weights())
        .map(|w| SampledLayer {
            weight: w.mean.clone(),
            bias: match &w.bias {
                BiasMode::None => None,
                b => Some((0..w.out_features()).map(|i| b.mean_at(i)).collect()),
            },
        })
        .collect();
    forward_sampled(graph, &ws, input)
}

/// Draws `samples` weight sets and collects their logits as `[S, N, K]`.
pub fn mc_predict(graph: &ModelGraph, input: &Tensor, samples: usize, seed: u64) -> Result<SampleBatch> {
    if samples == 0 {
        return Err(PfpError::TooFewSamples { needed: 1, got: 0 });
    }
    let posterior = Posterior::new(graph);
    let n = input.batch();
    let k = graph.class_count();
    let mut logits = vec![0.0f32; samples * n * k];
    logits
        .par_chunks_mut(n * k)
        .enumerate()
        .try_for_each(|(s, out)| -> Result<()> {
            let ws = posterior.sample(seed, s as u64);
            let y = forward_sampled(graph, &ws, input)?;
            out.copy_from_slice(y.data());
            Ok(())
        })?;
    SampleBatch::new(samples, n, k, logits, seed)
}

/// Sample mean and unbiased variance per (item, class).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub count: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Streaming Welford estimates with 64-bit accumulation.
pub fn mc_moments(batch: &SampleBatch) -> Result<MomentEstimate> {
    let (s, n, k) = batch.dims();
    if s < 2 {
        return Err(PfpError::TooFewSamples { needed: 2, got: s });
    }
    let cells = n * k;
    let mut mean = vec![0.0f64; cells];
    let mut m2 = vec![0.0f64; cells];
    for (i, chunk) in batch.logits().chunks_exact(cells).enumerate() {
        let count = (i + 1) as f64;
        for ((m, q), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(chunk) {
            let x = x as f64;
            let delta = x - *m;
            *m += delta / count;
            *q += delta * (x - *m);
        }
    }
    let variance = m2.iter().map(|q| q / (s - 1) as f64).collect();
    Ok(MomentEstimate {
        count: s,
        mean,
        variance,
    })
}

/// Moments plus their Monte-Carlo standard errors, for "within k standard
/// errors" comparisons against analytic predictions.
#[derive(Debug, Clone)]
pub struct MomentErrors {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub se_mean: Vec<f64>,
    pub se_variance: Vec<f64>,
}

/// Two-pass central moments per cell. The variance standard error uses the
/// large-sample form `sqrt((m4 - var^2) / S)`.
pub fn moment_errors(batch: &SampleBatch) -> Result<MomentErrors> {
    let est = mc_moments(batch)?;
    let (s, n, k) = batch.dims();
    let cells = n * k;
    let mut m4 = vec![0.0f64; cells];
    for chunk in batch.logits().chunks_exact(cells) {
        for ((acc, &x), m) in m4.iter_mut().zip(chunk).zip(&est.mean) {
            *acc += (x as f64 - m).powi(4);
        }
    }
    let sf = s as f64;
    let se_mean = est.variance.iter().map(|v| (v / sf).sqrt()).collect();
    let se_variance = m4
        .iter()
        .zip(&est.variance)
        .map(|(q, v)| ((q / sf - v * v).max(0.0) / sf).sqrt())
        .collect();
    Ok(MomentErrors {
        mean: est.mean,
        variance: est.variance,
        se_mean,
        se_variance,
    })
}

/// `|predicted - estimate| <= k * se`, with a tiny absolute floor so that
/// zero-spread cells compare exactly-equal values as a pass.
pub fn within_se(predicted: f64, estimate: f64, se: f64, k: f64) -> bool {
    (predicted - estimate).abs() <= k * se + 1e-6 * predicted.abs().max(estimate.abs()).max(1e-6)
}

/// Outcome of checking an analytic logit distribution against samples.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub cells: usize,
    pub mean_pass: usize,
    pub variance_pass: usize,
    /// Cells where both moments pass.
    pub both_pass: usize,
}

impl VerifyReport {
    pub fn pass_fraction(&self) -> f64 {
        self.both_pass as f64 / self.cells.max(1) as f64
    }
}

/// Compares `predicted` to the sample moments of `batch` at `k` standard errors.
pub fn verify_against_samples(predicted: &LogitDistribution, batch: &SampleBatch, k: f64) -> Result<VerifyReport> {
    let e = moment_errors(batch)?;
    let cells = predicted.mean().len();
    if e.mean.len() != cells {
        return Err(PfpError::shape("prediction and samples differ in shape"));
    }
    let (mut mean_pass, mut variance_pass, mut both_pass) = (0, 0, 0);
    for i in 0..cells {
        let m = within_se(predicted.mean()[i] as f64, e.mean[i], e.se_mean[i], k);
        let v = within_se(predicted.variance()[i] as f64, e.variance[i], e.se_variance[i], k);
        mean_pass += m as usize;
        variance_pass += v as usize;
        both_pass += (m && v) as usize;
    }
    Ok(VerifyReport {
        cells,
        mean_pass,
        variance_pass,
        both_pass,
    })
}
