use std::hint::black_box;
use std::time::Instant;

pub const WARMUP_RUNS: usize = 2;
pub const MIN_REPETITIONS: usize = 5;

/// Median and median absolute deviation of repeated runs, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub median_ns: f64,
    pub mad_ns: f64,
    pub repetitions: usize,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn summarize(samples: &[f64]) -> Timing {
    let mut v = samples.to_vec();
    let med = median(&mut v);
    let mut dev: Vec<f64> = samples.iter().map(|s| (s - med).abs()).collect();
    Timing {
        median_ns: med,
        mad_ns: median(&mut dev),
        repetitions: samples.len(),
    }
}

/// Runs `f` twice untimed, then `reps` (at least 5) timed repetitions on the
/// monotonic clock.
pub fn measure<T>(reps: usize, mut f: impl FnMut() -> T) -> Timing {
    for _ in 0..WARMUP_RUNS {
        black_box(f());
    }
    let reps = reps.max(MIN_REPETITIONS);
    let samples: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            black_box(f());
            start.elapsed().as_nanos() as f64
        })
        .collect();
    summarize(&samples)
}
