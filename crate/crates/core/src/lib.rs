//! Probabilistic forward pass inference for Bayesian neural networks with
//! factorized Gaussian weight posteriors.
//!
//! Instead of drawing weight sets and running many forward passes, every
//! activation is carried as an independent Gaussian (mean plus variance or
//! second raw moment) and propagated analytically through dense,
//! convolutional, ReLU and max-pool layers in one pass.
//!
//! * [`tensor`]: Gaussian tensors and moment representations.
//! * [`ops`]: the distribution-propagating operators.
//! * [`model`]: sequential graphs, the `.pfpm` container, calibration.
//! * [`mc`]: the weight-sampling baseline used as oracle and reference.
//! * [`uncertainty`]: entropy, mutual information, logit sampling, AUROC.
//! * [`kernels`]: scheduled dense kernels, tuner and benchmarks.

pub mod error;
pub mod kernels;
pub mod mc;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod uncertainty;

pub use error::{PfpError, Result};
pub use mc::{mc_moments, mc_predict, SampleBatch};
pub use model::{load_model, run_pfp, save_model, LayerSpec, ModelGraph};
pub use tensor::{GaussianTensor, MomentKind, Tensor};
pub use uncertainty::{LogitDistribution, UncertaintyReport};
