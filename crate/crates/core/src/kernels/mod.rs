//! Scheduled variants of the joint dense operator.
//!
//! A [`KernelConfig`] selects tiling, loop order, register blocking across
//! outputs (`unroll`), the number of independent partial sums per dot
//! product (`vector_width_hint`) and the thread count. Every config computes
//! the same moments as [`crate::ops::dense`]; only the floating-point
//! summation order may differ. For a fixed config the order of every output
//! element is independent of `threads`.

pub mod bench;
pub mod timing;
pub mod tune;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{PfpError, Result};
use crate::ops::dense::{dense_dims, finish, require_kind};
use crate::ops::GaussianWeights;
use crate::tensor::{GaussianTensor, MomentKind};

pub use bench::{bench_joint_split, bench_model, bench_speedup, BenchRow, SpeedupRow};
pub use timing::{measure, Timing};
pub use tune::{tune_dense, TuneReport, TrialRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopOrder {
    Mnk,
    Nmk,
    Mkn,
    Kmn,
    Nkm,
    Knm,
}

impl LoopOrder {
    pub const ALL: [LoopOrder; 6] = [
        LoopOrder::Mnk,
        LoopOrder::Nmk,
        LoopOrder::Mkn,
        LoopOrder::Kmn,
        LoopOrder::Nkm,
        LoopOrder::Knm,
    ];

    fn k_innermost(self) -> bool {
        matches!(self, LoopOrder::Mnk | LoopOrder::Nmk)
    }
}

pub const UNROLL_MENU: [usize; 4] = [1, 2, 4, 8];
pub const VECTOR_MENU: [usize; 3] = [1, 4, 8];

/// Schedule for [`dense_kernel`]. Block sizes of 0 disable tiling on that
/// axis (m = batch, n = output features, k = input features).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelConfig {
    pub block_m: usize,
    pub block_n: usize,
    pub block_k: usize,
    pub loop_order: LoopOrder,
    pub unroll: usize,
    pub vector_width_hint: usize,
    pub threads: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig::naive()
    }
}

impl KernelConfig {
    /// Untiled, sequential m-n-k loop nest. Matches the reference operator
    /// bit for bit.
    pub const fn naive() -> Self {
        KernelConfig {
            block_m: 0,
            block_n: 0,
            block_k: 0,
            loop_order: LoopOrder::Mnk,
            unroll: 1,
            vector_width_hint: 1,
            threads: 1,
        }
    }

    pub fn validate(&self, m: usize, n: usize, k: usize) -> Result<()> {
        let bad = |msg: String| Err(PfpError::InvalidConfig(msg));
        if !UNROLL_MENU.contains(&self.unroll) {
            return bad(format!("unroll {} not in {UNROLL_MENU:?}", self.unroll));
        }
        if !VECTOR_MENU.contains(&self.vector_width_hint) {
            return bad(format!("vector width {} not in {VECTOR_MENU:?}", self.vector_width_hint));
        }
        if self.threads == 0 {
            return bad("threads must be positive".into());
        }
        for (name, b, dim) in [("m", self.block_m, m), ("n", self.block_n, n), ("k", self.block_k, k)] {
            if b > dim {
                return bad(format!("block_{name}={b} exceeds dimension {dim}"));
            }
        }
        Ok(())
    }

    /// Same schedule with any block larger than its dimension replaced by
    /// 0; a block spanning the whole dimension is the untiled loop anyway.
    /// Lets one tuned config drive every layer of a model.
    pub fn fit(&self, m: usize, n: usize, k: usize) -> KernelConfig {
        let clamp = |b: usize, dim: usize| if b > dim { 0 } else { b };
        KernelConfig {
            block_m: clamp(self.block_m, m),
            block_n: clamp(self.block_n, n),
            block_k: clamp(self.block_k, k),
            ..*self
        }
    }

    /// Compact JSON, one line.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| PfpError::InvalidConfig(e.to_string()))
    }
}

impl fmt::Display for KernelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bm{}-bn{}-bk{}-{:?}-u{}-v{}-t{}",
            self.block_m,
            self.block_n,
            self.block_k,
            self.loop_order,
            self.unroll,
            self.vector_width_hint,
            self.threads
        )
    }
}

struct Operands<'a> {
    xm: &'a [f32],
    xe: &'a [f32],
    wm: &'a [f32],
    we: &'a [f32],
    k: usize,
}

/// Output slab covering columns `n0..n0 + width` of every row.
struct Slab<'a> {
    mean: &'a mut [f32],
    var: &'a mut [f32],
    n0: usize,
    width: usize,
}

impl Slab<'_> {
    #[inline(always)]
    fn at(&self, m: usize, n: usize) -> usize {
        m * self.width + (n - self.n0)
    }
}

/// Joint dot products of one input row with `U` weight rows, using `V`
/// independent partial sums per output.
#[inline(always)]
fn dot_block<const V: usize, const U: usize>(
    xm: &[f32],
    xe: &[f32],
    wm: [&[f32]; U],
    we: [&[f32]; U],
) -> ([f32; U], [f32; U]) {
    let len = xm.len();
    let body = len - len % V;
    let mut am = [[0.0f32; V]; U];
    let mut av = [[0.0f32; V]; U];
    let mut j = 0;
    while j < body {
        let xmc = &xm[j..j + V];
        let xec = &xe[j..j + V];
        for u in 0..U {
            let wmc = &wm[u][j..j + V];
            let wec = &we[u][j..j + V];
            for l in 0..V {
                let p = wmc[l] * xmc[l];
                am[u][l] += p;
                av[u][l] += wec[l] * xec[l] - p * p;
            }
        }
        j += V;
    }
    let mut sm = [0.0f32; U];
    let mut sv = [0.0f32; U];
    for u in 0..U {
        for l in 0..V {
            sm[u] += am[u][l];
            sv[u] += av[u][l];
        }
        for t in body..len {
            let p = wm[u][t] * xm[t];
            sm[u] += p;
            sv[u] += we[u][t] * xe[t] - p * p;
        }
    }
    (sm, sv)
}

#[inline(always)]
fn tile_k_inner<const V: usize, const U: usize>(
    ops: &Operands,
    out: &mut Slab,
    (m0, m1): (usize, usize),
    (n0, n1): (usize, usize),
    (k0, k1): (usize, usize),
    n_outer: bool,
) {
    #[inline(always)]
    fn row(buf: &[f32], k: usize, r: usize, (k0, k1): (usize, usize)) -> &[f32] {
        &buf[r * k + k0..r * k + k1]
    }
    #[inline(always)]
    fn run<const V: usize, const U: usize>(ops: &Operands, out: &mut Slab, kr: (usize, usize), m: usize, n: usize) {
        let k = ops.k;
        let wm: [&[f32]; U] = std::array::from_fn(|u| row(ops.wm, k, n + u, kr));
        let we: [&[f32]; U] = std::array::from_fn(|u| row(ops.we, k, n + u, kr));
        let (sm, sv) = dot_block::<V, U>(row(ops.xm, k, m, kr), row(ops.xe, k, m, kr), wm, we);
        for u in 0..U {
            let o = out.at(m, n + u);
            out.mean[o] += sm[u];
            out.var[o] += sv[u];
        }
    }
    let kr = (k0, k1);
    let n_main = n0 + (n1 - n0) / U * U;
    let run_tail = |out: &mut Slab, m: usize| {
        for n in n_main..n1 {
            run::<V, 1>(ops, out, kr, m, n);
        }
    };
    if n_outer {
        for n in (n0..n_main).step_by(U) {
            for m in m0..m1 {
                run::<V, U>(ops, out, kr, m, n);
            }
        }
        for m in m0..m1 {
            run_tail(out, m);
        }
    } else {
        for m in m0..m1 {
            for n in (n0..n_main).step_by(U) {
                run::<V, U>(ops, out, kr, m, n);
            }
            run_tail(out, m);
        }
    }
}

/// Scalar tile for loop orders with k outside; accumulates directly into the
/// output, so each element still sums k in ascending order.
fn tile_k_outer(
    ops: &Operands,
    out: &mut Slab,
    order: LoopOrder,
    (m0, m1): (usize, usize),
    (n0, n1): (usize, usize),
    (k0, k1): (usize, usize),
) {
    let k = ops.k;
    let mut step = |m: usize, n: usize, j: usize| {
        let p = ops.wm[n * k + j] * ops.xm[m * k + j];
        let o = out.at(m, n);
        out.mean[o] += p;
        out.var[o] += ops.we[n * k + j] * ops.xe[m * k + j] - p * p;
    };
    match order {
        LoopOrder::Mkn => {
            for m in m0..m1 {
                for j in k0..k1 {
                    for n in n0..n1 {
                        step(m, n, j);
                    }
                }
            }
        }
        LoopOrder::Kmn => {
            for j in k0..k1 {
                for m in m0..m1 {
                    for n in n0..n1 {
                        step(m, n, j);
                    }
                }
            }
        }
        LoopOrder::Nkm => {
            for n in n0..n1 {
                for j in k0..k1 {
                    for m in m0..m1 {
                        step(m, n, j);
                    }
                }
            }
        }
        LoopOrder::Knm => {
            for j in k0..k1 {
                for n in n0..n1 {
                    for m in m0..m1 {
                        step(m, n, j);
                    }
                }
            }
        }
        LoopOrder::Mnk | LoopOrder::Nmk => unreachable!("handled by tile_k_inner"),
    }
}

macro_rules! dispatch_vu {
    ($v:expr, $u:expr, $f:ident, $($args:expr),*) => {
        match ($v, $u) {
            (1, 1) => $f::<1, 1>($($args),*),
            (1, 2) => $f::<1, 2>($($args),*),
            (1, 4) => $f::<1, 4>($($args),*),
            (1, 8) => $f::<1, 8>($($args),*),
            (4, 1) => $f::<4, 1>($($args),*),
            (4, 2) => $f::<4, 2>($($args),*),
            (4, 4) => $f::<4, 4>($($args),*),
            (4, 8) => $f::<4, 8>($($args),*),
            (8, 1) => $f::<8, 1>($($args),*),
            (8, 2) => $f::<8, 2>($($args),*),
            (8, 4) => $f::<8, 4>($($args),*),
            (8, 8) => $f::<8, 8>($($args),*),
            _ => unreachable!("validated config"),
        }
    };
}

fn blocks(lo: usize, hi: usize, size: usize) -> impl Iterator<Item = (usize, usize)> {
    let step = if size == 0 { (hi - lo).max(1) } else { size };
    (lo..hi).step_by(step).map(move |s| (s, (s + step).min(hi)))
}

fn run_slab(ops: &Operands, out: &mut Slab, m: usize, cfg: &KernelConfig) {
    let (n0, n1) = (out.n0, out.n0 + out.width);
    for kb in blocks(0, ops.k, cfg.block_k) {
        for mb in blocks(0, m, cfg.block_m) {
            for nb in blocks(n0, n1, cfg.block_n) {
                if cfg.loop_order.k_innermost() {
                    let n_outer = cfg.loop_order == LoopOrder::Nmk;
                    dispatch_vu!(cfg.vector_width_hint, cfg.unroll, tile_k_inner, ops, out, mb, nb, kb, n_outer);
                } else {
                    tile_k_outer(ops, out, cfg.loop_order, mb, nb, kb);
                }
            }
        }
    }
}

/// Joint dense operator (second-raw-moment inputs and weights, variance
/// output) executed with the schedule `cfg`.
pub fn dense_kernel(x: &GaussianTensor, w: &GaussianWeights, cfg: &KernelConfig) -> Result<GaussianTensor> {
    require_kind(x.kind(), MomentKind::MeanSecondRawMoment, "input")?;
    require_kind(w.kind, MomentKind::MeanSecondRawMoment, "weights")?;
    let d = dense_dims(x.shape(), w)?;
    cfg.validate(d.batch, d.d_out, d.d_in)?;
    let ops = Operands {
        xm: x.mean(),
        xe: x.spread(),
        wm: &w.mean,
        we: &w.spread,
        k: d.d_in,
    };
    let (m, n) = (d.batch, d.d_out);
    let mut mean = vec![0.0f32; m * n];
    let mut var = vec![0.0f32; m * n];

    let threads = cfg.threads.min(n.max(1));
    if threads <= 1 {
        let mut slab = Slab {
            mean: &mut mean,
            var: &mut var,
            n0: 0,
            width: n,
        };
        run_slab(&ops, &mut slab, m, cfg);
    } else {
        // Each worker owns a contiguous range of output features.
        let chunk = n.div_ceil(threads);
        let parts: Vec<(usize, Vec<f32>, Vec<f32>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|n0| {
                    let width = chunk.min(n - n0);
                    let ops = &ops;
                    scope.spawn(move || {
                        let mut pm = vec![0.0f32; m * width];
                        let mut pv = vec![0.0f32; m * width];
                        let mut slab = Slab {
                            mean: &mut pm,
                            var: &mut pv,
                            n0,
                            width,
                        };
                        run_slab(ops, &mut slab, m, cfg);
                        (n0, pm, pv)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("kernel worker panicked")).collect()
        });
        for (n0, pm, pv) in parts {
            let width = pm.len() / m.max(1);
            for r in 0..m {
                mean[r * n + n0..r * n + n0 + width].copy_from_slice(&pm[r * width..(r + 1) * width]);
                var[r * n + n0..r * n + n0 + width].copy_from_slice(&pv[r * width..(r + 1) * width]);
            }
        }
    }
    Ok(finish(vec![m, n], mean, var, &w.bias, n, 1, MomentKind::MeanVariance))
}

/// Elementwise agreement at relative tolerance `rel`, measured against the
/// larger of the two values or, for cancelled sums, a fraction of the
/// largest magnitude in `reference`.
pub fn close_rel(candidate: &[f32], reference: &[f32], rel: f32) -> bool {
    let scale = reference.iter().fold(0.0f32, |a, v| a.max(v.abs()));
    candidate.len() == reference.len()
        && candidate
            .iter()
            .zip(reference)
            .all(|(a, b)| (a - b).abs() <= rel * a.abs().max(b.abs()).max(0.1 * scale))
}
