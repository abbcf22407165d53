//! Latency reports: per-operator breakdown of the analytic forward pass,
//! analytic pass vs sampling, and joint vs split dense operators.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hint::black_box;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::kernels::timing::{measure, summarize, WARMUP_RUNS};
use crate::kernels::tune::tuning_problem;
use crate::mc::mc_predict;
use crate::model::{run_pfp_profiled, run_pfp_with, ExecOptions, LayerSpec, ModelGraph};
use crate::ops::{dense, dense_split};
use crate::tensor::{MomentKind, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub target: String,
    pub operator: String,
    pub config: String,
    pub median_ns: f64,
    pub mad_ns: f64,
    pub fraction: f64,
}

pub const BENCH_HEADER: &str = "target,operator,config,median_ns,mad_ns,fraction";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.0},{:.0},{:.6}",
            r.target, r.operator, r.config, r.median_ns, r.mad_ns, r.fraction
        );
    }
    s
}

/// Operator rows are named `<layer index>:<layer name>`; the end-to-end row
/// is named `end_to_end`.
pub const END_TO_END: &str = "end_to_end";

/// Operator type of a row: `dense_first` and `dense` both count as `dense`,
/// likewise for convolutions.
pub fn operator_type(operator: &str) -> &str {
    let name = operator.split_once(':').map_or(operator, |(_, n)| n);
    name.strip_suffix("_first").unwrap_or(name)
}

/// Sums per-layer fractions by operator type for one target.
pub fn type_fractions(rows: &[BenchRow], target: &str) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for r in rows.iter().filter(|r| r.target == target && r.operator != END_TO_END) {
        *out.entry(operator_type(&r.operator).to_string()).or_insert(0.0) += r.fraction;
    }
    out
}

/// Deterministic random input batch for `graph`.
pub fn random_input(graph: &ModelGraph, batch: usize, seed: u64) -> Tensor {
    let mut shape = vec![batch];
    shape.extend_from_slice(graph.input_shape());
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).expect("sized")
}

/// Per-layer latency breakdown of the analytic forward pass for each batch
/// size. Fractions of the layer rows of one target sum to one.
pub fn bench_model(
    graph: &ModelGraph,
    target: &str,
    batch_sizes: &[usize],
    reps: usize,
    opts: &ExecOptions,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let reps = reps.max(crate::kernels::timing::MIN_REPETITIONS);
    let mut rows = Vec::new();
    for &batch in batch_sizes {
        let input = random_input(graph, batch, seed);
        for _ in 0..WARMUP_RUNS {
            black_box(run_pfp_profiled(graph, &input, opts)?);
        }
        let layers = graph.layers().len();
        let mut per_layer = vec![Vec::with_capacity(reps); layers];
        let mut totals = Vec::with_capacity(reps);
        for _ in 0..reps {
            let (out, times) = run_pfp_profiled(graph, &input, opts)?;
            black_box(out);
            let mut total = 0.0;
            for (acc, t) in per_layer.iter_mut().zip(&times) {
                let ns = t.as_nanos() as f64;
                acc.push(ns);
                total += ns;
            }
            totals.push(total);
        }
        let stats: Vec<_> = per_layer.iter().map(|v| summarize(v)).collect();
        let sum: f64 = stats.iter().map(|t| t.median_ns).sum();
        let name = format!("{target}@b{batch}");
        for (i, (layer, t)) in graph.layers().iter().zip(&stats).enumerate() {
            let config = match (layer, &opts.kernel) {
                (LayerSpec::Dense(_), Some(cfg)) => cfg.to_string(),
                (LayerSpec::Dense(_), None) => "reference".to_string(),
                _ => "-".to_string(),
            };
            rows.push(BenchRow {
                target: name.clone(),
                operator: format!("{i}:{}", layer.name()),
                config,
                median_ns: t.median_ns,
                mad_ns: t.mad_ns,
                fraction: if sum > 0.0 { t.median_ns / sum } else { 0.0 },
            });
        }
        let e2e = summarize(&totals);
        rows.push(BenchRow {
            target: name,
            operator: END_TO_END.to_string(),
            config: "-".to_string(),
            median_ns: e2e.median_ns,
            mad_ns: e2e.mad_ns,
            fraction: 1.0,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub batch: usize,
    pub samples: usize,
    pub pfp_median_ns: f64,
    pub mc_median_ns: f64,
    pub speedup: f64,
}

pub const SPEEDUP_HEADER: &str = "batch,samples,pfp_median_ns,mc_median_ns,speedup";

pub fn speedup_csv(rows: &[SpeedupRow]) -> String {
    let mut s = String::from(SPEEDUP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.0},{:.0},{:.3}",
            r.batch, r.samples, r.pfp_median_ns, r.mc_median_ns, r.speedup
        );
    }
    s
}

/// End-to-end analytic pass against `samples` sampled forward passes.
pub fn bench_speedup(
    graph: &ModelGraph,
    batch_sizes: &[usize],
    samples: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<SpeedupRow>> {
    let opts = ExecOptions::default();
    batch_sizes
        .iter()
        .map(|&batch| {
            let input = random_input(graph, batch, seed);
            let pfp = measure(reps, || run_pfp_with(graph, &input, &opts).expect("validated graph"));
            let mc = measure(reps, || mc_predict(graph, &input, samples, seed).expect("validated graph"));
            Ok(SpeedupRow {
                batch,
                samples,
                pfp_median_ns: pfp.median_ns,
                mc_median_ns: mc.median_ns,
                speedup: mc.median_ns / pfp.median_ns,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointSplitRow {
    /// (batch, d_in, d_out)
    pub shape: (usize, usize, usize),
    pub joint_median_ns: f64,
    pub split_median_ns: f64,
    pub ratio: f64,
}

pub const JOINT_SPLIT_HEADER: &str = "batch,d_in,d_out,joint_median_ns,split_median_ns,joint_over_split";

pub fn joint_split_csv(rows: &[JointSplitRow]) -> String {
    let mut s = String::from(JOINT_SPLIT_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.0},{:.0},{:.4}",
            r.shape.0, r.shape.1, r.shape.2, r.joint_median_ns, r.split_median_ns, r.ratio
        );
    }
    s
}

/// Joint dense operator against the separate mean / variance pair.
pub fn bench_joint_split(shapes: &[(usize, usize, usize)], reps: usize, seed: u64) -> Vec<JointSplitRow> {
    shapes
        .iter()
        .map(|&(m, k, n)| {
            let (x, w) = tuning_problem(m, k, n, seed);
            let mv = MomentKind::MeanVariance;
            let joint = measure(reps, || dense(&x, &w, mv).expect("valid problem"));
            let split = measure(reps, || dense_split(&x, &w, mv).expect("valid problem"));
            JointSplitRow {
                shape: (m, k, n),
                joint_median_ns: joint.median_ns,
                split_median_ns: split.median_ns,
                ratio: joint.median_ns / split.median_ns,
            }
        })
        .collect()
}
