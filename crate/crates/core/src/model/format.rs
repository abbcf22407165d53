//! `.pfpm` model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PFPMODEL"            8 bytes magic
//! version               u32 (= 1)
//! manifest_len          u64
//! manifest              UTF-8 JSON, manifest_len bytes
//! tensor blobs          raw f32 LE, offsets relative to the blob section
//! crc32                 u32 over every preceding byte
//! ```
//!
//! The manifest lists the layers, the tensor table and the encoding of every
//! spread tensor. Writers emit weight spreads in the representation the
//! layer computes with (`variance` for first layers, `second_raw_moment`
//! otherwise), so a save/load cycle is bit-exact. Readers also accept
//! `stddev` and `log_stddev`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PfpError, Result};
use crate::model::{LayerSpec, ModelGraph};
use crate::ops::{BiasMode, ConvGeometry, GaussianWeights};
use crate::tensor::{me2_to_mv, mv_to_me2, numel, MomentKind};

pub const MAGIC: &[u8; 8] = b"PFPMODEL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadEncoding {
    Variance,
    Stddev,
    LogStddev,
    SecondRawMoment,
}

impl SpreadEncoding {
    fn decode_variance(self, mean: f32, raw: f32) -> f32 {
        match self {
            SpreadEncoding::Variance => raw,
            SpreadEncoding::Stddev => raw * raw,
            SpreadEncoding::LogStddev => ((raw as f64) * 2.0).exp() as f32,
            SpreadEncoding::SecondRawMoment => me2_to_mv(mean, raw),
        }
    }

    fn native(kind: MomentKind) -> Self {
        match kind {
            MomentKind::MeanVariance => SpreadEncoding::Variance,
            MomentKind::MeanSecondRawMoment => SpreadEncoding::SecondRawMoment,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<LayerEntry>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerEntry {
    DenseFirst {
        weights: WeightEntry,
    },
    Dense {
        weights: WeightEntry,
    },
    Conv2dFirst {
        stride: usize,
        padding: usize,
        weights: WeightEntry,
    },
    Conv2d {
        stride: usize,
        padding: usize,
        weights: WeightEntry,
    },
    Relu,
    Maxpool {
        k: usize,
        vectorized: bool,
    },
    Flatten,
    Convert {
        target: MomentKind,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightEntry {
    mean: String,
    spread: String,
    encoding: SpreadEncoding,
    bias: BiasEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
enum BiasEntry {
    None,
    Deterministic {
        mean: String,
    },
    Probabilistic {
        mean: String,
        spread: String,
        encoding: SpreadEncoding,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

struct BlobWriter {
    tensors: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f32]) -> String {
        let offset = self.data.len() as u64;
        for v in values {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
        self.tensors.push(TensorEntry {
            name: name.clone(),
            shape,
            offset,
            length: (values.len() * 4) as u64,
        });
        name
    }

    fn weights(&mut self, prefix: &str, w: &GaussianWeights) -> WeightEntry {
        let mean = self.push(format!("{prefix}.weight.mean"), w.shape.clone(), &w.mean);
        let spread = self.push(format!("{prefix}.weight.spread"), w.shape.clone(), &w.spread);
        let width = vec![w.out_features()];
        let bias = match &w.bias {
            BiasMode::None => BiasEntry::None,
            BiasMode::Deterministic { mean } => BiasEntry::Deterministic {
                mean: self.push(format!("{prefix}.bias.mean"), width, mean),
            },
            BiasMode::Probabilistic { mean, variance } => BiasEntry::Probabilistic {
                mean: self.push(format!("{prefix}.bias.mean"), width.clone(), mean),
                spread: self.push(format!("{prefix}.bias.spread"), width, variance),
                encoding: SpreadEncoding::Variance,
            },
        };
        WeightEntry {
            mean,
            spread,
            encoding: SpreadEncoding::native(w.kind),
            bias,
        }
    }
}

/// Serializes a graph to container bytes. Output is a pure function of the
/// graph.
pub fn write_model(graph: &ModelGraph) -> Result<Vec<u8>> {
    graph.validate()?;
    let mut blobs = BlobWriter {
        tensors: Vec::new(),
        data: Vec::new(),
    };
    let layers = graph
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let p = format!("layer{i}");
            match layer {
                LayerSpec::DenseFirst(w) => LayerEntry::DenseFirst {
                    weights: blobs.weights(&p, w),
                },
                LayerSpec::Dense(w) => LayerEntry::Dense {
                    weights: blobs.weights(&p, w),
                },
                LayerSpec::Conv2dFirst { weights, geometry } => LayerEntry::Conv2dFirst {
                    stride: geometry.stride,
                    padding: geometry.padding,
                    weights: blobs.weights(&p, weights),
                },
                LayerSpec::Conv2d { weights, geometry } => LayerEntry::Conv2d {
                    stride: geometry.stride,
                    padding: geometry.padding,
                    weights: blobs.weights(&p, weights),
                },
                LayerSpec::Relu => LayerEntry::Relu,
                LayerSpec::MaxPool { k, vectorized } => LayerEntry::Maxpool {
                    k: *k,
                    vectorized: *vectorized,
                },
                LayerSpec::Flatten => LayerEntry::Flatten,
                LayerSpec::Convert { target } => LayerEntry::Convert { target: *target },
            }
        })
        .collect();
    let manifest = Manifest {
        input_shape: graph.input_shape().to_vec(),
        class_count: graph.class_count(),
        layers,
        tensors: blobs.tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| PfpError::Format(e.to_string()))?;
    Ok(assemble(&json, &blobs.data))
}

/// Frames a manifest and blob section, appending the checksum.
pub fn assemble(manifest: &[u8], blobs: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + blobs.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest);
    out.extend_from_slice(blobs);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Blobs<'a> {
    data: &'a [u8],
    table: BTreeMap<&'a str, &'a TensorEntry>,
}

impl Blobs<'_> {
    fn get(&self, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
        let entry = self
            .table
            .get(name)
            .ok_or_else(|| PfpError::Format(format!("tensor '{name}' missing from tensor table")))?;
        if entry.shape != expected {
            return Err(PfpError::Format(format!(
                "tensor '{name}' has shape {:?}, layer needs {expected:?}",
                entry.shape
            )));
        }
        let want = numel(&entry.shape) as u64 * 4;
        let end = entry.offset.checked_add(entry.length);
        match end {
            Some(end) if entry.length == want && end <= self.data.len() as u64 => {}
            _ => {
                return Err(PfpError::Format(format!(
                    "tensor '{name}' truncated: needs {want} bytes at offset {}, blob section has {}",
                    entry.offset,
                    self.data.len()
                )))
            }
        }
        let bytes = &self.data[entry.offset as usize..(entry.offset + entry.length) as usize];
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn weights(&self, e: &WeightEntry, shape: &[usize], kind: MomentKind) -> Result<GaussianWeights> {
        let mean = self.get(&e.mean, shape)?;
        let raw = self.get(&e.spread, shape)?;
        let spread = normalize(&mean, raw, e.encoding, kind);
        let width = [shape[0]];
        let bias = match &e.bias {
            BiasEntry::None => BiasMode::None,
            BiasEntry::Deterministic { mean } => BiasMode::Deterministic {
                mean: self.get(mean, &width)?,
            },
            BiasEntry::Probabilistic { mean, spread, encoding } => {
                let mean = self.get(mean, &width)?;
                let raw = self.get(spread, &width)?;
                let variance = normalize(&mean, raw, *encoding, MomentKind::MeanVariance);
                BiasMode::Probabilistic { mean, variance }
            }
        };
        GaussianWeights::new(shape.to_vec(), mean, spread, kind, bias)
    }
}

/// Decodes a stored spread into the representation `kind`. Stored data that
/// already matches is passed through untouched.
fn normalize(mean: &[f32], raw: Vec<f32>, encoding: SpreadEncoding, kind: MomentKind) -> Vec<f32> {
    if encoding == SpreadEncoding::native(kind) {
        return raw;
    }
    mean.iter()
        .zip(raw)
        .map(|(&m, r)| {
            let var = encoding.decode_variance(m, r);
            match kind {
                MomentKind::MeanVariance => var,
                MomentKind::MeanSecondRawMoment => mv_to_me2(m, var),
            }
        })
        .collect()
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses and validates container bytes.
pub fn read_model(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(PfpError::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(PfpError::Format("bad magic".into()));
    }
    let version = u32_at(bytes, 8);
    if version != VERSION {
        return Err(PfpError::Format(format!("unsupported version {version}")));
    }
    let body_end = bytes.len() - 4;
    let stored = u32_at(bytes, body_end);
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(PfpError::Checksum { stored, computed });
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let manifest_end = (HEADER_LEN as u64)
        .checked_add(manifest_len)
        .filter(|&e| e <= body_end as u64)
        .ok_or_else(|| PfpError::Format(format!("manifest length {manifest_len} exceeds file")))?
        as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| PfpError::Format(format!("manifest: {e}")))?;
    let blobs = Blobs {
        data: &bytes[manifest_end..body_end],
        table: manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect(),
    };

    let mv = MomentKind::MeanVariance;
    let me2 = MomentKind::MeanSecondRawMoment;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let shape_of = |w: &WeightEntry| -> Result<Vec<usize>> {
            blobs
                .table
                .get(w.mean.as_str())
                .map(|t| t.shape.clone())
                .ok_or_else(|| PfpError::Format(format!("tensor '{}' missing from tensor table", w.mean)))
        };
        layers.push(match entry {
            LayerEntry::DenseFirst { weights } => LayerSpec::DenseFirst(blobs.weights(weights, &shape_of(weights)?, mv)?),
            LayerEntry::Dense { weights } => LayerSpec::Dense(blobs.weights(weights, &shape_of(weights)?, me2)?),
            LayerEntry::Conv2dFirst { stride, padding, weights } => LayerSpec::Conv2dFirst {
                weights: blobs.weights(weights, &shape_of(weights)?, mv)?,
                geometry: ConvGeometry {
                    stride: *stride,
                    padding: *padding,
                },
            },
            LayerEntry::Conv2d { stride, padding, weights } => LayerSpec::Conv2d {
                weights: blobs.weights(weights, &shape_of(weights)?, me2)?,
                geometry: ConvGeometry {
                    stride: *stride,
                    padding: *padding,
                },
            },
            LayerEntry::Relu => LayerSpec::Relu,
            LayerEntry::Maxpool { k, vectorized } => LayerSpec::MaxPool {
                k: *k,
                vectorized: *vectorized,
            },
            LayerEntry::Flatten => LayerSpec::Flatten,
            LayerEntry::Convert { target } => LayerSpec::Convert { target: *target },
        });
    }
    ModelGraph::new(layers, manifest.input_shape, manifest.class_count)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    read_model(&fs::read(path)?)
}

pub fn save_model(graph: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_model(graph)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{synth_model, Arch};

    fn tiny_mlp() -> ModelGraph {
        synth_model(
            &Arch::Mlp {
                input: 3,
                hidden: vec![2],
                classes: 2,
            },
            5,
        )
        .unwrap()
    }

    fn blob(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// One-layer dense_first model whose weight spread is stored as `encoding`.
    fn one_layer_file(encoding: &str, spread: f32, blob_len_override: Option<u64>) -> Vec<u8> {
        let manifest = serde_json::json!({
            "input_shape": [1],
            "class_count": 1,
            "layers": [{
                "type": "dense_first",
                "weights": {"mean": "m", "spread": "s", "encoding": encoding, "bias": {"mode": "none"}}
            }],
            "tensors": [
                {"name": "m", "shape": [1, 1], "offset": 0, "length": 4},
                {"name": "s", "shape": [1, 1], "offset": 4, "length": blob_len_override.unwrap_or(4)}
            ]
        });
        let mut data = blob(&[0.5]);
        if blob_len_override.is_none() {
            data.extend(blob(&[spread]));
        }
        assemble(serde_json::to_string(&manifest).unwrap().as_bytes(), &data)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let g = tiny_mlp();
        let bytes = write_model(&g).unwrap();
        let back = read_model(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(write_model(&back).unwrap(), bytes);
    }

    #[test]
    fn log_stddev_decodes_to_variance() {
        let g = read_model(&one_layer_file("log_stddev", 0.0, None)).unwrap();
        assert_eq!(g.layers()[0].weights().unwrap().spread, vec![1.0]);
        let g = read_model(&one_layer_file("log_stddev", 0.5, None)).unwrap();
        let v = g.layers()[0].weights().unwrap().spread[0];
        assert!((v - 1f32.exp()).abs() < 1e-6);
        let g = read_model(&one_layer_file("stddev", 3.0, None)).unwrap();
        assert_eq!(g.layers()[0].weights().unwrap().spread, vec![9.0]);
        let g = read_model(&one_layer_file("second_raw_moment", 1.25, None)).unwrap();
        assert_eq!(g.layers()[0].weights().unwrap().spread, vec![1.0]);
    }

    #[test]
    fn truncated_tensor_is_named() {
        match read_model(&one_layer_file("variance", 1.0, Some(4))) {
            Err(PfpError::Format(msg)) => assert!(msg.contains("'s'"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_errors() {
        let mut bytes = write_model(&tiny_mlp()).unwrap();
        assert!(matches!(read_model(&bytes[..10]), Err(PfpError::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(read_model(&bytes), Err(PfpError::Format(_))));
        let mut bytes = write_model(&tiny_mlp()).unwrap();
        bytes[8] = 2;
        assert!(matches!(read_model(&bytes), Err(PfpError::Format(_))));
        let mut bytes = write_model(&tiny_mlp()).unwrap();
        let last = bytes.len() - 10;
        bytes[last] ^= 0x40;
        assert!(matches!(read_model(&bytes), Err(PfpError::Checksum { .. })));
    }

    #[test]
    fn contract_violation_rejected_on_save() {
        let g = tiny_mlp();
        let mut layers = g.layers().to_vec();
        layers.remove(1);
        let broken = ModelGraph {
            layers,
            input_shape: g.input_shape().to_vec(),
            class_count: 2,
        };
        assert!(matches!(write_model(&broken), Err(PfpError::Contract { .. })));
    }
}
