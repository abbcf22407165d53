use pfp_core::uncertainty::{
    auroc, logit_sample, mutual_information, shannon_entropy, softmax_entropy, LogitDistribution, UncertaintyReport,
};
use pfp_core::SampleBatch;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(rng: &mut ChaCha8Rng, s: usize, n: usize, k: usize) -> SampleBatch {
    let scale = rng.random_range(0.1..8.0f32);
    let logits = (0..s * n * k).map(|_| rng.random_range(-1.0..1.0f32) * scale).collect();
    SampleBatch::new(s, n, k, logits, 0).unwrap()
}

/// Literal evaluation of the entropy of the sample-averaged softmax.
fn slow_shannon(batch: &SampleBatch) -> Vec<f64> {
    let (s, n, k) = batch.dims();
    (0..n)
        .map(|item| {
            let mut avg = vec![0.0f64; k];
            for sample in 0..s {
                let row = batch.row(sample, item);
                let z: f64 = row.iter().map(|&l| (l as f64).exp()).sum();
                for c in 0..k {
                    avg[c] += (row[c] as f64).exp() / z / s as f64;
                }
            }
            avg.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
        })
        .collect()
}

#[test]
fn shannon_entropy_matches_literal_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (s, n, k) = (rng.random_range(1..20), rng.random_range(1..5), rng.random_range(2..12));
        let b = random_batch(&mut rng, s, n, k);
        for (a, r) in shannon_entropy(&b).iter().zip(slow_shannon(&b)) {
            assert!((a - r).abs() <= 1e-9, "{a} vs {r}");
        }
    }
}

#[test]
fn decomposition_bounds_and_jensen() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let (s, n, k) = (rng.random_range(1..12), rng.random_range(1..4), rng.random_range(2..10));
        let b = random_batch(&mut rng, s, n, k);
        let r = UncertaintyReport::from_samples(&b);
        let ln_k = (k as f64).ln();
        for i in 0..n {
            assert!((r.total_entropy[i] - r.softmax_entropy[i] - r.mutual_information[i]).abs() <= 1e-12);
            assert!(r.softmax_entropy[i] <= r.total_entropy[i] + 1e-9);
            for v in [r.total_entropy[i], r.softmax_entropy[i], r.mutual_information[i]] {
                assert!((-1e-9..=ln_k + 1e-6).contains(&v));
            }
        }
        assert_eq!(r.mutual_information, mutual_information(&b));
        assert_eq!(r.softmax_entropy, softmax_entropy(&b));
    }
}

/// Softmax entropy settles with few samples; mutual information needs many.
#[test]
fn mutual_information_needs_more_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = 10;
    let mean = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let variance = (0..k).map(|_| rng.random_range(0.5..4.0)).collect();
    let d = LogitDistribution::new(1, k, mean, variance).unwrap();
    let (mut se_gap, mut mi_gap) = (0.0, 0.0);
    for t in 0..100u64 {
        let few = UncertaintyReport::from_samples(&logit_sample(&d, 5, t));
        let many = UncertaintyReport::from_samples(&logit_sample(&d, 500, 10_000 + t));
        se_gap += (few.softmax_entropy[0] - many.softmax_entropy[0]).abs() / 100.0;
        mi_gap += (few.mutual_information[0] - many.mutual_information[0]).abs() / 100.0;
    }
    assert!(se_gap < mi_gap, "softmax entropy gap {se_gap} vs mutual information gap {mi_gap}");
}

proptest! {
    #[test]
    fn auroc_swaps_to_complement(
        a in prop::collection::hash_set(-1000i32..1000, 1..40),
        b in prop::collection::hash_set(-1000i32..1000, 1..40),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).filter(|v| !a.contains(v)).collect();
        prop_assume!(!b.is_empty());
        let sum = auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        b in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let f = |v: &f64| (v * 0.7).exp() * 3.0 + 1.0;
        let base = auroc(&a, &b).unwrap();
        let mapped = auroc(&a.iter().map(f).collect::<Vec<_>>(), &b.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(base, mapped);
    }
}

#[test]
fn auroc_rejects_empty_sides() {
    assert!(auroc(&[], &[1.0]).is_err());
    assert!(auroc(&[1.0], &[]).is_err());
}
