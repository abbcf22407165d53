//! Committed `.pfpm` files pin the container layout. Set `PFP_BLESS=1` to
//! rewrite them after an intentional format change.

use std::path::PathBuf;

use pfp_core::model::{insert_converts, read_model, synth_model, write_model, Arch, LayerSpec, ModelGraph};
use pfp_core::ops::{BiasMode, ConvGeometry, GaussianWeights};
use pfp_core::{MomentKind, PfpError};

const MV: MomentKind = MomentKind::MeanVariance;
const ME2: MomentKind = MomentKind::MeanSecondRawMoment;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn tiny_mlp() -> ModelGraph {
    synth_model(
        &Arch::Mlp {
            input: 4,
            hidden: vec![3],
            classes: 2,
        },
        7,
    )
    .unwrap()
}

/// Small values on a fixed grid so the file is reproducible by hand.
fn ramp(n: usize, start: f32, step: f32) -> Vec<f32> {
    (0..n).map(|i| start + step * i as f32).collect()
}

/// conv 2@3x3 (padding 1) -> relu -> pool 2 -> conv 3@2x2 -> relu -> flatten -> dense 3.
fn tiny_conv() -> ModelGraph {
    let conv1 = GaussianWeights::new(
        vec![2, 1, 3, 3],
        ramp(18, -0.5, 0.0625),
        ramp(18, 0.001, 0.001),
        MV,
        BiasMode::Probabilistic {
            mean: vec![0.1, -0.1],
            variance: vec![0.01, 0.02],
        },
    )
    .unwrap();
    let conv2 = GaussianWeights::new(
        vec![3, 2, 2, 2],
        ramp(24, 0.25, -0.03125),
        ramp(24, 0.002, 0.0005),
        MV,
        BiasMode::Deterministic {
            mean: vec![0.0, 0.5, -0.5],
        },
    )
    .unwrap()
    .to_kind(ME2);
    let fc = GaussianWeights::new(vec![3, 3], ramp(9, -1.0, 0.25), ramp(9, 0.01, 0.01), MV, BiasMode::None)
        .unwrap()
        .to_kind(ME2);
    let layers = insert_converts(vec![
        LayerSpec::Conv2dFirst {
            weights: conv1,
            geometry: ConvGeometry { stride: 1, padding: 1 },
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { k: 2, vectorized: true },
        LayerSpec::Conv2d {
            weights: conv2,
            geometry: ConvGeometry::default(),
        },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense(fc),
    ]);
    ModelGraph::new(layers, vec![1, 4, 4], 3).unwrap()
}

fn cases() -> [(&'static str, ModelGraph); 2] {
    [("tiny_mlp.pfpm", tiny_mlp()), ("tiny_conv.pfpm", tiny_conv())]
}

#[test]
fn golden_files_round_trip_bit_exactly() {
    let bless = std::env::var_os("PFP_BLESS").is_some();
    for (name, graph) in cases() {
        let path = golden(name);
        let bytes = write_model(&graph).unwrap();
        if bless {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &bytes).unwrap();
        }
        let stored = std::fs::read(&path).unwrap();
        assert_eq!(bytes, stored, "{name}: writer output drifted from the committed file");
        let loaded = read_model(&stored).unwrap();
        assert_eq!(loaded, graph, "{name}");
        assert_eq!(write_model(&loaded).unwrap(), stored, "{name}");
    }
}

#[test]
fn any_single_byte_corruption_is_detected() {
    for (name, _) in cases() {
        let stored = std::fs::read(golden(name)).unwrap();
        let mut bytes = stored.clone();
        for i in 0..bytes.len() {
            for flip in [0x01u8, 0x80, 0xff] {
                bytes[i] ^= flip;
                match read_model(&bytes) {
                    Err(PfpError::Checksum { .. }) | Err(PfpError::Format(_)) => {}
                    other => panic!("{name}: byte {i} ^ {flip:#x} gave {other:?}"),
                }
                bytes[i] = stored[i];
            }
        }
        assert!(read_model(&bytes).is_ok());
    }
}

#[test]
fn truncation_is_detected() {
    for (name, _) in cases() {
        let stored = std::fs::read(golden(name)).unwrap();
        for len in [0, 7, 12, 20, stored.len() / 2, stored.len() - 1] {
            assert!(read_model(&stored[..len]).is_err(), "{name} truncated to {len}");
        }
    }
}
