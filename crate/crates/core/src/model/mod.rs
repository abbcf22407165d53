//! Sequential model graphs with explicit moment-representation contracts.
//!
//! Compute layers consume second raw moments and emit variances; ReLU
//! consumes variances and emits second raw moments; max pooling works on
//! variances at both ends. The first compute layer takes a deterministic
//! input and weight variances. Mismatches must be bridged with explicit
//! [`LayerSpec::Convert`] layers, see [`insert_converts`].

pub mod format;
pub mod synth;

use std::time::{Duration, Instant};

use crate::error::{PfpError, Result};
use crate::kernels::{dense_kernel, KernelConfig};
use crate::ops::{self, ConvGeometry, GaussianWeights};
use crate::tensor::{GaussianTensor, MomentKind, Tensor};
use crate::uncertainty::LogitDistribution;

pub use format::{load_model, read_model, save_model, write_model, SpreadEncoding};
pub use synth::{synth_model, Arch};

const MV: MomentKind = MomentKind::MeanVariance;
const ME2: MomentKind = MomentKind::MeanSecondRawMoment;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    DenseFirst(GaussianWeights),
    Dense(GaussianWeights),
    Conv2dFirst { weights: GaussianWeights, geometry: ConvGeometry },
    Conv2d { weights: GaussianWeights, geometry: ConvGeometry },
    Relu,
    MaxPool { k: usize, vectorized: bool },
    Flatten,
    Convert { target: MomentKind },
}

/// What flows between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Plain,
    Gaussian(MomentKind),
}

impl std::fmt::Display for ValueKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValueKind::Plain => f.write_str("deterministic"),
            ValueKind::Gaussian(k) => write!(f, "gaussian/{k}"),
        }
    }
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::DenseFirst(_) => "dense_first",
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Conv2dFirst { .. } => "conv2d_first",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Convert { .. } => "convert",
        }
    }

    pub fn weights(&self) -> Option<&GaussianWeights> {
        match self {
            LayerSpec::DenseFirst(w) | LayerSpec::Dense(w) => Some(w),
            LayerSpec::Conv2dFirst { weights, .. } | LayerSpec::Conv2d { weights, .. } => Some(weights),
            _ => None,
        }
    }

    fn weights_mut(&mut self) -> Option<&mut GaussianWeights> {
        match self {
            LayerSpec::DenseFirst(w) | LayerSpec::Dense(w) => Some(w),
            LayerSpec::Conv2dFirst { weights, .. } | LayerSpec::Conv2d { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Representation this layer accepts, `None` for pass-through layers.
    pub fn input_kind(&self) -> Option<ValueKind> {
        match self {
            LayerSpec::DenseFirst(_) | LayerSpec::Conv2dFirst { .. } => Some(ValueKind::Plain),
            LayerSpec::Dense(_) | LayerSpec::Conv2d { .. } => Some(ValueKind::Gaussian(ME2)),
            LayerSpec::Relu | LayerSpec::MaxPool { .. } => Some(ValueKind::Gaussian(MV)),
            LayerSpec::Flatten | LayerSpec::Convert { .. } => None,
        }
    }

    /// Weight representation required by compute layers.
    pub fn weight_kind(&self) -> Option<MomentKind> {
        match self {
            LayerSpec::DenseFirst(_) | LayerSpec::Conv2dFirst { .. } => Some(MV),
            LayerSpec::Dense(_) | LayerSpec::Conv2d { .. } => Some(ME2),
            _ => None,
        }
    }

    fn output_kind(&self, input: ValueKind) -> ValueKind {
        match self {
            LayerSpec::DenseFirst(_)
            | LayerSpec::Dense(_)
            | LayerSpec::Conv2dFirst { .. }
            | LayerSpec::Conv2d { .. }
            | LayerSpec::MaxPool { .. } => ValueKind::Gaussian(MV),
            LayerSpec::Relu => ValueKind::Gaussian(ME2),
            LayerSpec::Flatten => input,
            LayerSpec::Convert { target } => ValueKind::Gaussian(*target),
        }
    }

    /// Output shape (without batch) for a given input shape.
    fn output_shape(&self, index: usize, shape: &[usize]) -> Result<Vec<usize>> {
        let err = |reason: String| PfpError::Contract { layer: index, reason };
        match self {
            LayerSpec::DenseFirst(w) | LayerSpec::Dense(w) => {
                if shape.len() != 1 || w.shape.len() != 2 || w.shape[1] != shape[0] {
                    return Err(err(format!("dense weights {:?} do not fit input {:?}", w.shape, shape)));
                }
                Ok(vec![w.shape[0]])
            }
            LayerSpec::Conv2dFirst { weights, geometry } | LayerSpec::Conv2d { weights, geometry } => {
                if shape.len() != 3 || weights.shape.len() != 4 || weights.shape[1] != shape[0] {
                    return Err(err(format!(
                        "conv weights {:?} do not fit input {:?}",
                        weights.shape, shape
                    )));
                }
                let full = [1, shape[0], shape[1], shape[2]];
                let d = ops::conv::output_dims(&full, &weights.shape, *geometry)
                    .map_err(|e| err(e.to_string()))?;
                Ok(vec![d.o, d.oh, d.ow])
            }
            LayerSpec::MaxPool { k, .. } => {
                if shape.len() != 3 || *k == 0 || !shape[1].is_multiple_of(*k) || !shape[2].is_multiple_of(*k) {
                    return Err(err(format!("max pool k={k} does not divide {shape:?}")));
                }
                Ok(vec![shape[0], shape[1] / k, shape[2] / k])
            }
            LayerSpec::Flatten => Ok(vec![shape.iter().product()]),
            LayerSpec::Relu | LayerSpec::Convert { .. } => Ok(shape.to_vec()),
        }
    }
}

/// Sequential network with validated representation contracts.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    class_count: usize,
}

impl ModelGraph {
    /// `input_shape` excludes the batch dimension.
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>, class_count: usize) -> Result<Self> {
        let g = ModelGraph {
            layers,
            input_shape,
            class_count,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Walks the graph checking representations, shapes and weights.
    pub fn validate(&self) -> Result<()> {
        let mut kind = ValueKind::Plain;
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(expected) = layer.input_kind() {
                if expected != kind {
                    return Err(PfpError::Contract {
                        layer: i,
                        reason: format!("{} expects {expected}, receives {kind}", layer.name()),
                    });
                }
            }
            if matches!(layer, LayerSpec::Convert { .. }) && kind == ValueKind::Plain {
                return Err(PfpError::Contract {
                    layer: i,
                    reason: "convert needs a gaussian input".into(),
                });
            }
            if let (Some(w), Some(wk)) = (layer.weights(), layer.weight_kind()) {
                if w.kind != wk {
                    return Err(PfpError::Contract {
                        layer: i,
                        reason: format!("{} weights must be stored as {wk}, found {}", layer.name(), w.kind),
                    });
                }
                w.validate().map_err(|e| PfpError::Contract {
                    layer: i,
                    reason: e.to_string(),
                })?;
            }
            shape = layer.output_shape(i, &shape)?;
            kind = layer.output_kind(kind);
        }
        if kind == ValueKind::Plain {
            return Err(PfpError::Contract {
                layer: self.layers.len(),
                reason: "network has no probabilistic compute layer".into(),
            });
        }
        if shape != [self.class_count] {
            return Err(PfpError::Contract {
                layer: self.layers.len(),
                reason: format!("output shape {shape:?} does not match {} classes", self.class_count),
            });
        }
        Ok(())
    }

    /// Multiplies every weight variance by `factor`; means are untouched.
    pub fn calibrate(&self, factor: f32) -> Result<ModelGraph> {
        calibrate(self, factor)
    }
}

/// Inserts the [`LayerSpec::Convert`] layers needed to close the
/// representation contract. Only Gaussian-to-Gaussian gaps can be bridged.
pub fn insert_converts(layers: Vec<LayerSpec>) -> Vec<LayerSpec> {
    let mut out = Vec::with_capacity(layers.len());
    let mut kind = ValueKind::Plain;
    for layer in layers {
        if let (Some(ValueKind::Gaussian(want)), ValueKind::Gaussian(have)) = (layer.input_kind(), kind) {
            if want != have {
                out.push(LayerSpec::Convert { target: want });
                kind = ValueKind::Gaussian(want);
            }
        }
        kind = layer.output_kind(kind);
        out.push(layer);
    }
    out
}

/// Global reweighting of all weight variances.
pub fn calibrate(graph: &ModelGraph, factor: f32) -> Result<ModelGraph> {
    if !factor.is_finite() || factor <= 0.0 {
        return Err(PfpError::NonPositiveFactor(factor));
    }
    let mut g = graph.clone();
    for layer in &mut g.layers {
        if let Some(w) = layer.weights_mut() {
            *w = w.scale_variance(factor);
        }
    }
    Ok(g)
}

/// Value flowing through the forward pass.
#[derive(Debug, Clone)]
pub enum Activation {
    Plain(Tensor),
    Gaussian(GaussianTensor),
}

impl Activation {
    fn shape(&self) -> &[usize] {
        match self {
            Activation::Plain(t) => t.shape(),
            Activation::Gaussian(g) => g.shape(),
        }
    }
}

/// Execution knobs for [`run_pfp_with`].
#[derive(Debug, Clone, Default)]
pub struct ExecOptions {
    /// Schedule used for non-first dense layers; the reference operator
    /// runs when absent.
    pub kernel: Option<KernelConfig>,
}

fn gaussian(a: Activation, layer: usize) -> Result<GaussianTensor> {
    match a {
        Activation::Gaussian(g) => Ok(g),
        Activation::Plain(_) => Err(PfpError::Contract {
            layer,
            reason: "expected gaussian activation".into(),
        }),
    }
}

fn plain(a: Activation, layer: usize) -> Result<Tensor> {
    match a {
        Activation::Plain(t) => Ok(t),
        Activation::Gaussian(_) => Err(PfpError::Contract {
            layer,
            reason: "expected deterministic activation".into(),
        }),
    }
}

/// Applies a single layer.
pub fn apply_layer(layer: &LayerSpec, index: usize, x: Activation, opts: &ExecOptions) -> Result<Activation> {
    Ok(match layer {
        LayerSpec::DenseFirst(w) => Activation::Gaussian(ops::dense_first(&plain(x, index)?, w, MV)?),
        LayerSpec::Dense(w) => {
            let x = gaussian(x, index)?;
            Activation::Gaussian(match &opts.kernel {
                Some(cfg) => dense_kernel(&x, w, &cfg.fit(x.shape()[0], w.out_features(), w.fan_in()))?,
                None => ops::dense(&x, w, MV)?,
            })
        }
        LayerSpec::Conv2dFirst { weights, geometry } => {
            Activation::Gaussian(ops::conv2d_first(&plain(x, index)?, weights, *geometry, MV)?)
        }
        LayerSpec::Conv2d { weights, geometry } => {
            Activation::Gaussian(ops::conv2d(&gaussian(x, index)?, weights, *geometry, MV)?)
        }
        LayerSpec::Relu => Activation::Gaussian(ops::relu(&gaussian(x, index)?)?),
        LayerSpec::MaxPool { k, vectorized } => {
            let x = gaussian(x, index)?;
            Activation::Gaussian(if *vectorized && *k == 2 {
                ops::maxpool_vectorized_k2(&x)?
            } else {
                ops::maxpool(&x, *k)?
            })
        }
        LayerSpec::Flatten => match x {
            Activation::Plain(t) => {
                let s = ops::flat_shape(t.shape())?;
                Activation::Plain(t.reshape(s)?)
            }
            Activation::Gaussian(g) => Activation::Gaussian(ops::flatten(g)?),
        },
        LayerSpec::Convert { target } => Activation::Gaussian(gaussian(x, index)?.into_kind(*target)),
    })
}

fn check_input(graph: &ModelGraph, input: &Tensor) -> Result<()> {
    if input.shape().len() != graph.input_shape.len() + 1 || input.shape()[1..] != graph.input_shape[..] {
        return Err(PfpError::shape(format!(
            "input {:?} does not match model input [N, {:?}]",
            input.shape(),
            graph.input_shape
        )));
    }
    Ok(())
}

fn into_logits(a: Activation) -> Result<LogitDistribution> {
    let g = gaussian(a, usize::MAX)?.into_kind(MV);
    let (shape, mean, var, _) = g.into_parts();
    LogitDistribution::new(shape[0], shape[1], mean, var)
}

/// Single analytic forward pass.
pub fn run_pfp(graph: &ModelGraph, input: &Tensor) -> Result<LogitDistribution> {
    run_pfp_with(graph, input, &ExecOptions::default())
}

pub fn run_pfp_with(graph: &ModelGraph, input: &Tensor, opts: &ExecOptions) -> Result<LogitDistribution> {
    check_input(graph, input)?;
    let mut x = Activation::Plain(input.clone());
    for (i, layer) in graph.layers.iter().enumerate() {
        x = apply_layer(layer, i, x, opts)?;
    }
    into_logits(x)
}

/// Forward pass that also reports the wall time of every layer.
pub fn run_pfp_profiled(
    graph: &ModelGraph,
    input: &Tensor,
    opts: &ExecOptions,
) -> Result<(LogitDistribution, Vec<Duration>)> {
    check_input(graph, input)?;
    let mut times = Vec::with_capacity(graph.layers.len());
    let mut x = Activation::Plain(input.clone());
    for (i, layer) in graph.layers.iter().enumerate() {
        let start = Instant::now();
        x = apply_layer(layer, i, x, opts)?;
        times.push(start.elapsed());
        debug_assert!(!x.shape().is_empty());
    }
    Ok((into_logits(x)?, times))
}
