//! `pfp`: probabilistic forward pass inference from the command line.
//!
//! Exit codes: 0 success, 1 invalid usage or input, 2 verification failure.

mod io;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pfp_core::kernels::bench::{
    bench_csv, bench_joint_split, bench_model, bench_speedup, joint_split_csv, random_input, speedup_csv,
};
use pfp_core::kernels::tune::{tune_dense_with, TuneOptions};
use pfp_core::kernels::KernelConfig;
use pfp_core::mc::{mc_predict, verify_against_samples};
use pfp_core::model::{run_pfp_with, synth_model, write_model, Arch, ExecOptions};
use pfp_core::uncertainty::{auroc, logit_sample, mi_gap_experiment, MiGapConfig, UncertaintyReport};

use crate::io::{open_output, sig6};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "pfp", version, about = "Probabilistic forward pass inference for Bayesian neural networks")]
struct Cli {
    /// Worker threads for sampling and dense kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArgs {
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing output file.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SeedArg {
    /// RNG seed; a fixed default is used and reported when absent.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self) -> u64 {
        self.seed.unwrap_or_else(|| {
            eprintln!("seed: {DEFAULT_SEED} (default)");
            DEFAULT_SEED
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Analytic logit means and variances: `item,class,mean,variance`.
    Predict {
        /// Model file (`-` for stdin).
        #[arg(long)]
        model: PathBuf,
        /// Input batch: CSV rows or a JSON-headed f32 blob.
        #[arg(long)]
        input: PathBuf,
        /// Global factor applied to all weight variances.
        #[arg(long, default_value_t = 1.0)]
        calibration: f32,
        /// Dense kernel schedule as printed by `tune`.
        #[arg(long)]
        kernel_config: Option<String>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Logits from sampled weight sets: `sample,item,class,logit`.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 30)]
        samples: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Checks analytic moments against sampling; exits 2 on failure.
    Verify {
        #[arg(long)]
        model: PathBuf,
        /// Input batch; random inputs in [0, 1) when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Random items generated when no input is given.
        #[arg(long, default_value_t = 4)]
        items: usize,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[command(flatten)]
        seed: SeedArg,
        /// Allowed deviation in Monte-Carlo standard errors.
        #[arg(long, default_value_t = 3.0)]
        tolerance_se: f64,
        /// Fraction of (item, class) cells that must pass.
        #[arg(long, default_value_t = 0.95)]
        min_pass: f64,
    },
    /// Entropy decomposition: `item,total_entropy,softmax_entropy,mutual_information`.
    Metrics {
        /// Logit samples CSV as written by `sample`.
        #[arg(long, conflicts_with_all = ["model", "input"])]
        logits: Option<PathBuf>,
        /// Model for analytic prediction followed by logit sampling.
        #[arg(long, requires = "input")]
        model: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        calibration: f32,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// AUROC with the second file as the positive (out-of-domain) class.
    Auroc {
        /// Metrics CSV of in-domain items.
        in_domain: PathBuf,
        /// Metrics CSV of out-of-domain items.
        out_domain: PathBuf,
        #[arg(long, default_value = "mutual_information")]
        column: String,
    },
    /// Latency reports as CSV.
    Bench {
        /// Model file; a synthetic MNIST-shaped model when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ArchName::Mlp)]
        arch: ArchName,
        #[arg(long, value_enum, default_value_t = BenchMode::Operators)]
        mode: BenchMode,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10, 100])]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = 9)]
        reps: usize,
        /// Sample count of the sampling baseline in `speedup` mode.
        #[arg(long, default_value_t = 30)]
        samples: usize,
        #[arg(long)]
        kernel_config: Option<String>,
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Searches dense kernel schedules; prints the best as one JSON line.
    Tune {
        /// batch,d_in,d_out
        #[arg(long, value_delimiter = ',', default_values_t = [10usize, 784, 100])]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 40)]
        budget: usize,
        #[arg(long, default_value_t = 7)]
        reps: usize,
        #[command(flatten)]
        seed: SeedArg,
        /// Full trial log as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Mutual information lost by Gaussian summarisation of one-hot logits.
    MiGap {
        #[arg(long, default_value_t = 512)]
        items: usize,
        #[arg(long, default_value_t = 1024)]
        samples: usize,
        #[arg(long, default_value_t = 12.0)]
        lambda: f32,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Writes a model with random Gaussian weights.
    Synth {
        #[arg(value_enum)]
        arch: ArchName,
        /// `in,hidden..,classes` for mlp, `channels,side,classes` for lenet.
        #[arg(long, default_value = "")]
        dims: String,
        #[command(flatten)]
        seed: SeedArg,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchName {
    Mlp,
    Lenet,
}

impl ArchName {
    fn as_str(self) -> &'static str {
        match self {
            ArchName::Mlp => "mlp",
            ArchName::Lenet => "lenet",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    /// Per-operator breakdown of the analytic pass.
    Operators,
    /// Analytic pass against the sampling baseline.
    Speedup,
    /// Joint against split dense operators on the model's dense shapes.
    JointSplit,
}

/// Failure modes that map to exit codes other than 1.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<VerificationFailed>() => {
            eprintln!("verification failed: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn kernel_options(json: Option<&str>, threads: Option<usize>) -> Result<ExecOptions> {
    let mut kernel = match json {
        Some(s) => Some(KernelConfig::from_json(s).context("--kernel-config")?),
        None => None,
    };
    if let Some(t) = threads {
        kernel.get_or_insert_with(KernelConfig::naive).threads = t;
    }
    if let Some(k) = &kernel {
        k.validate(usize::MAX, usize::MAX, usize::MAX).context("--kernel-config")?;
    }
    Ok(ExecOptions { kernel })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        ensure!(t > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    match cli.command {
        Command::Predict {
            model,
            input,
            calibration,
            kernel_config,
            out,
        } => {
            io::ensure_not_input(out.out.as_ref(), &[&model, &input])?;
            let graph = io::load_model(&model)?.calibrate(calibration)?;
            let x = io::read_input(&input, &graph)?;
            let opts = kernel_options(kernel_config.as_deref(), cli.threads)?;
            let d = run_pfp_with(&graph, &x, &opts)?;
            let mut w = open_output(out.out.as_ref(), out.force)?;
            writeln!(w, "item,class,mean,variance")?;
            let k = d.classes();
            for (i, (m, v)) in d.mean().iter().zip(d.variance()).enumerate() {
                writeln!(w, "{},{},{m},{v}", i / k, i % k)?;
            }
            w.flush()?;
        }
        Command::Sample {
            model,
            input,
            samples,
            seed,
            out,
        } => {
            io::ensure_not_input(out.out.as_ref(), &[&model, &input])?;
            let seed = seed.resolve();
            let graph = io::load_model(&model)?;
            let x = io::read_input(&input, &graph)?;
            let batch = mc_predict(&graph, &x, samples, seed)?;
            let mut w = open_output(out.out.as_ref(), out.force)?;
            io::write_samples(&batch, &mut w)?;
            w.flush()?;
        }
        Command::Verify {
            model,
            input,
            items,
            samples,
            seed,
            tolerance_se,
            min_pass,
        } => {
            ensure!(tolerance_se > 0.0, "--tolerance-se must be positive");
            ensure!((0.0..=1.0).contains(&min_pass), "--min-pass must lie in [0, 1]");
            ensure!(samples >= 2, "--samples must be at least 2");
            let seed = seed.resolve();
            let graph = io::load_model(&model)?;
            let x = match input {
                Some(p) => io::read_input(&p, &graph)?,
                None => {
                    ensure!(items > 0, "--items must be positive");
                    random_input(&graph, items, seed)
                }
            };
            let d = run_pfp_with(&graph, &x, &ExecOptions::default())?;
            let batch = mc_predict(&graph, &x, samples, seed)?;
            let r = verify_against_samples(&d, &batch, tolerance_se)?;
            let frac = r.pass_fraction();
            println!(
                "{}",
                serde_json::json!({
                    "cells": r.cells,
                    "mean_pass": r.mean_pass,
                    "variance_pass": r.variance_pass,
                    "both_pass": r.both_pass,
                    "pass_fraction": frac,
                    "samples": samples,
                    "seed": seed,
                    "tolerance_se": tolerance_se,
                })
            );
            if frac < min_pass {
                return Err(VerificationFailed(format!(
                    "{} of {} cells within {tolerance_se} SE, need {min_pass}",
                    r.both_pass, r.cells
                ))
                .into());
            }
        }
        Command::Metrics {
            logits,
            model,
            input,
            calibration,
            samples,
            seed,
            out,
        } => {
            let inputs: Vec<&std::path::Path> = [&logits, &model, &input].into_iter().flatten().map(|p| p.as_path()).collect();
            io::ensure_not_input(out.out.as_ref(), &inputs)?;
            let batch = match (logits, model, input) {
                (Some(path), _, _) => io::read_samples(&path)?,
                (None, Some(model), Some(input)) => {
                    ensure!(samples >= 1, "--samples must be positive");
                    let seed = seed.resolve();
                    let graph = io::load_model(&model)?.calibrate(calibration)?;
                    let x = io::read_input(&input, &graph)?;
                    let d = run_pfp_with(&graph, &x, &ExecOptions::default())?;
                    logit_sample(&d, samples, seed)
                }
                _ => bail!("metrics needs --logits, or --model with --input"),
            };
            let r = UncertaintyReport::from_samples(&batch);
            let mut w = open_output(out.out.as_ref(), out.force)?;
            writeln!(w, "item,total_entropy,softmax_entropy,mutual_information")?;
            for i in 0..r.items() {
                writeln!(
                    w,
                    "{i},{},{},{}",
                    sig6(r.total_entropy[i]),
                    sig6(r.softmax_entropy[i]),
                    sig6(r.mutual_information[i])
                )?;
            }
            w.flush()?;
        }
        Command::Auroc {
            in_domain,
            out_domain,
            column,
        } => {
            let a = io::read_column(&in_domain, &column)?;
            let b = io::read_column(&out_domain, &column)?;
            println!("{}", auroc(&a, &b)?);
        }
        Command::Bench {
            model,
            arch,
            mode,
            batch_sizes,
            reps,
            samples,
            kernel_config,
            seed,
            out,
        } => {
            ensure!(!batch_sizes.is_empty() && batch_sizes.iter().all(|&b| b > 0), "batch sizes must be positive");
            if let Some(m) = &model {
                io::ensure_not_input(out.out.as_ref(), &[m])?;
            }
            let seed = seed.resolve();
            let (graph, target) = match &model {
                Some(p) => (io::load_model(p)?, p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned())),
                None => (synth_model(&Arch::parse(arch.as_str(), "")?, seed)?, arch.as_str().to_string()),
            };
            let csv = match mode {
                BenchMode::Operators => {
                    let opts = kernel_options(kernel_config.as_deref(), cli.threads)?;
                    bench_csv(&bench_model(&graph, &target, &batch_sizes, reps, &opts, seed)?)
                }
                BenchMode::Speedup => speedup_csv(&bench_speedup(&graph, &batch_sizes, samples, reps, seed)?),
                BenchMode::JointSplit => {
                    let mut shapes = Vec::new();
                    for layer in graph.layers() {
                        if let pfp_core::LayerSpec::Dense(w) = layer {
                            for &b in &batch_sizes {
                                shapes.push((b, w.fan_in(), w.out_features()));
                            }
                        }
                    }
                    ensure!(!shapes.is_empty(), "model has no hidden dense layers");
                    joint_split_csv(&bench_joint_split(&shapes, reps, seed))
                }
            };
            let mut w = open_output(out.out.as_ref(), out.force)?;
            w.write_all(csv.as_bytes())?;
            w.flush()?;
        }
        Command::Tune {
            shape,
            budget,
            reps,
            seed,
            report,
            force,
        } => {
            ensure!(budget >= 1, "--budget must be at least 1");
            ensure!(shape.len() == 3, "--shape takes batch,d_in,d_out");
            ensure!(shape.iter().all(|&d| d > 0), "--shape dimensions must be positive");
            let seed = seed.resolve();
            let mut opts = TuneOptions::new(budget, seed);
            opts.repetitions = reps;
            if let Some(t) = cli.threads {
                opts.max_threads = t;
            }
            // Open the report first so an existing file fails before tuning.
            let mut report_out = match &report {
                Some(p) => Some(open_output(Some(p), force)?),
                None => None,
            };
            let r = tune_dense_with((shape[0], shape[1], shape[2]), &opts)?;
            eprintln!(
                "naive {:.0} ns, best {:.0} ns, speedup {:.2}x over {} timed trials ({} rejected)",
                r.naive.median_ns,
                r.best.median_ns,
                r.speedup,
                r.trials.len(),
                r.rejected.len()
            );
            if let Some(w) = report_out.as_mut() {
                serde_json::to_writer_pretty(&mut *w, &r)?;
                writeln!(w)?;
                w.flush()?;
            }
            println!("{}", r.best.config.to_json());
        }
        Command::MiGap {
            items,
            samples,
            lambda,
            classes,
            seed,
        } => {
            ensure!(items > 0 && samples > 0, "--items and --samples must be positive");
            ensure!(classes >= 2, "--classes must be at least 2");
            ensure!(lambda.is_finite(), "--lambda must be finite");
            let cfg = MiGapConfig {
                classes,
                items,
                samples,
                lambda,
                choices: classes,
                seed: seed.resolve(),
            };
            let r = mi_gap_experiment(&cfg);
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::Synth { arch, dims, seed, out } => {
            let graph = synth_model(&Arch::parse(arch.as_str(), &dims)?, seed.resolve())?;
            let bytes = write_model(&graph)?;
            let mut w = open_output(out.out.as_ref(), out.force)?;
            w.write_all(&bytes)?;
            w.flush()?;
        }
    }
    Ok(())
}
