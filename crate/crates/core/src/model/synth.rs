//! Random (untrained) fixtures with the layer structure of the MLP and
//! LeNet-5 classifiers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PfpError, Result};
use crate::model::{insert_converts, LayerSpec, ModelGraph};
use crate::ops::{BiasMode, ConvGeometry, GaussianWeights};
use crate::tensor::MomentKind;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    /// `input -> hidden... -> classes`, ReLU between dense layers.
    Mlp { input: usize, hidden: Vec<usize>, classes: usize },
    /// Classic LeNet-5: conv 6@5x5 (padding 2), pool, conv 16@5x5, pool,
    /// dense 120, dense 84, dense `classes`. `side` must be a multiple of 4
    /// with `side / 2` at least 8 so the second conv fits.
    Lenet { channels: usize, side: usize, classes: usize },
}

impl Arch {
    /// The one-hidden-layer MNIST classifier, 784 -> 100 -> 10.
    pub fn mnist_mlp() -> Arch {
        Arch::Mlp {
            input: 784,
            hidden: vec![100],
            classes: 10,
        }
    }

    pub fn mnist_lenet() -> Arch {
        Arch::Lenet {
            channels: 1,
            side: 28,
            classes: 10,
        }
    }

    /// Parses `mlp` / `lenet` with comma-separated dims: `784,100,10` for an
    /// MLP, `channels,side,classes` for LeNet. Empty dims pick the MNIST shapes.
    pub fn parse(name: &str, dims: &str) -> Result<Arch> {
        let nums: Vec<usize> = dims
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| PfpError::Format(format!("bad dimension '{s}'")))
            })
            .collect::<Result<_>>()?;
        match (name, nums.as_slice()) {
            ("mlp", []) => Ok(Arch::mnist_mlp()),
            ("mlp", [input, hidden @ .., classes]) if !hidden.is_empty() => Ok(Arch::Mlp {
                input: *input,
                hidden: hidden.to_vec(),
                classes: *classes,
            }),
            ("lenet", []) => Ok(Arch::mnist_lenet()),
            ("lenet", [c, side, k]) => Ok(Arch::Lenet {
                channels: *c,
                side: *side,
                classes: *k,
            }),
            _ => Err(PfpError::Format(format!("unknown architecture '{name}' with dims '{dims}'"))),
        }
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// mean ~ N(0, 2 / fan_in), variance ~ U[1e-4, 1e-2]; probabilistic bias
    /// with mean ~ N(0, 0.1^2) and the same variance range.
    fn weights(&mut self, shape: Vec<usize>, kind: MomentKind) -> GaussianWeights {
        let n: usize = shape.iter().product();
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
        let mean: Vec<f32> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        let var: Vec<f32> = (0..n).map(|_| self.rng.random_range(1e-4f32..1e-2)).collect();
        let out = shape[0];
        let bias_normal = Normal::new(0.0f32, 0.1).unwrap();
        let bias = BiasMode::Probabilistic {
            mean: (0..out).map(|_| bias_normal.sample(&mut self.rng)).collect(),
            variance: (0..out).map(|_| self.rng.random_range(1e-4f32..1e-2)).collect(),
        };
        GaussianWeights::new(shape, mean, var, MomentKind::MeanVariance, bias)
            .expect("generated weights are valid")
            .to_kind(kind)
    }
}

/// Deterministic random model for `arch`.
pub fn synth_model(arch: &Arch, seed: u64) -> Result<ModelGraph> {
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mv = MomentKind::MeanVariance;
    let me2 = MomentKind::MeanSecondRawMoment;
    match arch {
        Arch::Mlp { input, hidden, classes } => {
            let mut layers = Vec::new();
            let mut width = *input;
            for (i, &h) in hidden.iter().chain(std::iter::once(classes)).enumerate() {
                if i == 0 {
                    layers.push(LayerSpec::DenseFirst(init.weights(vec![h, width], mv)));
                } else {
                    layers.push(LayerSpec::Relu);
                    layers.push(LayerSpec::Dense(init.weights(vec![h, width], me2)));
                }
                width = h;
            }
            ModelGraph::new(layers, vec![*input], *classes)
        }
        Arch::Lenet { channels, side, classes } => {
            if side % 4 != 0 || side / 2 < 8 {
                return Err(PfpError::shape(format!("lenet side {side} unsupported")));
            }
            let after = (side / 2 - 4) / 2;
            let pad2 = ConvGeometry { stride: 1, padding: 2 };
            let layers = vec![
                LayerSpec::Conv2dFirst {
                    weights: init.weights(vec![6, *channels, 5, 5], mv),
                    geometry: pad2,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, vectorized: true },
                LayerSpec::Conv2d {
                    weights: init.weights(vec![16, 6, 5, 5], me2),
                    geometry: ConvGeometry::default(),
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, vectorized: true },
                LayerSpec::Flatten,
                LayerSpec::Dense(init.weights(vec![120, 16 * after * after], me2)),
                LayerSpec::Relu,
                LayerSpec::Dense(init.weights(vec![84, 120], me2)),
                LayerSpec::Relu,
                LayerSpec::Dense(init.weights(vec![*classes, 84], me2)),
            ];
            ModelGraph::new(insert_converts(layers), vec![*channels, *side, *side], *classes)
        }
    }
}
