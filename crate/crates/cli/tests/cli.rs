use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use tempfile::TempDir;

fn pfp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Small MLP (8 -> 16 -> 4) plus a two-item input CSV.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = pfp(&["synth", "mlp", "--dims", "8,16,4", "--seed", "7", "--out", "m.pfpm"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(
        dir.path().join("x.csv"),
        "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8\n1,0,1,0,1,0,1,0\n",
    )
    .unwrap();
    dir
}

#[test]
fn synth_pipes_into_predict() {
    let dir = fixture();
    let synth = Command::new(env!("CARGO_BIN_EXE_pfp"))
        .args(["synth", "mlp", "--dims", "8,16,4", "--seed", "7"])
        .output()
        .unwrap();
    assert!(synth.status.success());
    let mut child = Command::new(env!("CARGO_BIN_EXE_pfp"))
        .args(["predict", "--model", "-", "--input", "x.csv"])
        .current_dir(dir.path())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&synth.stdout).unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "item,class,mean,variance");
    assert_eq!(lines.len(), 1 + 2 * 4);
    for line in &lines[1..] {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(v >= 0.0);
    }
    // Same bytes as the model written to disk.
    assert_eq!(synth.stdout, fs::read(dir.path().join("m.pfpm")).unwrap());
}

#[test]
fn verify_exit_codes() {
    let dir = fixture();
    let ok = pfp(&["verify", "--model", "m.pfpm", "--samples", "200000", "--seed", "3"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value = serde_json::from_str(stdout(&ok).trim()).unwrap();
    assert_eq!(report["cells"], 16);

    let fail = pfp(
        &["verify", "--model", "m.pfpm", "--samples", "200", "--tolerance-se", "0.001", "--min-pass", "1"],
        dir.path(),
    );
    assert_eq!(fail.status.code(), Some(2));
}

#[test]
fn invalid_usage_exits_one() {
    let dir = fixture();
    for args in [
        &["predict", "--model", "m.pfpm"][..],
        &["predict", "--model", "missing.pfpm", "--input", "x.csv"],
        &["tune", "--shape", "4,64"],
        &["no-such-command"],
    ] {
        assert_eq!(pfp(args, dir.path()).status.code(), Some(1), "{args:?}");
    }
    fs::write(dir.path().join("bad.csv"), "1,2,3\n").unwrap();
    let o = pfp(&["predict", "--model", "m.pfpm", "--input", "bad.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn outputs_are_guarded() {
    let dir = fixture();
    let args = ["predict", "--model", "m.pfpm", "--input", "x.csv", "--out", "p.csv"];
    assert!(pfp(&args, dir.path()).status.success());
    assert_eq!(pfp(&args, dir.path()).status.code(), Some(1));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(pfp(&forced, dir.path()).status.success());

    let before = fs::read(dir.path().join("x.csv")).unwrap();
    let clobber = pfp(
        &["predict", "--model", "m.pfpm", "--input", "x.csv", "--out", "x.csv", "--force"],
        dir.path(),
    );
    assert_eq!(clobber.status.code(), Some(1));
    assert_eq!(fs::read(dir.path().join("x.csv")).unwrap(), before);
}

#[test]
fn seed_is_reported_and_reproducible() {
    let dir = fixture();
    let args = ["sample", "--model", "m.pfpm", "--input", "x.csv", "--samples", "5"];
    let a = pfp(&args, dir.path());
    let b = pfp(&args, dir.path());
    assert!(String::from_utf8_lossy(&a.stderr).contains("seed: 42"));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert_eq!(text.lines().next(), Some("sample,item,class,logit"));
    assert_eq!(text.lines().count(), 1 + 5 * 2 * 4);
}

#[test]
fn metrics_and_auroc_flow() {
    let dir = fixture();
    let s = pfp(
        &["sample", "--model", "m.pfpm", "--input", "x.csv", "--samples", "50", "--seed", "1", "--out", "s.csv"],
        dir.path(),
    );
    assert!(s.status.success());
    let m = pfp(&["metrics", "--logits", "s.csv", "--out", "in.csv"], dir.path());
    assert!(m.status.success());
    let text = fs::read_to_string(dir.path().join("in.csv")).unwrap();
    assert_eq!(
        text.lines().next(),
        Some("item,total_entropy,softmax_entropy,mutual_information")
    );
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(1).map(|f| f.parse().unwrap()).collect();
        assert!((v[0] - v[1] - v[2]).abs() < 1e-5);
        assert!(v[2] >= -1e-9);
    }

    let wide = pfp(
        &[
            "metrics", "--model", "m.pfpm", "--input", "x.csv", "--calibration", "25", "--samples", "500",
            "--seed", "1", "--out", "out.csv",
        ],
        dir.path(),
    );
    assert!(wide.status.success());
    let a = pfp(&["auroc", "in.csv", "out.csv"], dir.path());
    assert!(a.status.success());
    let v: f64 = stdout(&a).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&v));
    let missing = pfp(&["auroc", "in.csv", "out.csv", "--column", "nope"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn tuned_config_feeds_predict() {
    let dir = fixture();
    let t = pfp(
        &["tune", "--shape", "4,64,16", "--budget", "4", "--reps", "5", "--seed", "1", "--report", "r.json"],
        dir.path(),
    );
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let cfg = stdout(&t).trim().to_string();
    serde_json::from_str::<serde_json::Value>(&cfg).unwrap();
    assert!(dir.path().join("r.json").exists());

    let base = pfp(&["predict", "--model", "m.pfpm", "--input", "x.csv"], dir.path());
    let tuned = pfp(
        &["predict", "--model", "m.pfpm", "--input", "x.csv", "--kernel-config", &cfg],
        dir.path(),
    );
    assert!(tuned.status.success());
    let parse = |o: &Output| -> Vec<f64> {
        stdout(o)
            .lines()
            .skip(1)
            .flat_map(|l| l.split(',').skip(2).map(|f| f.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect()
    };
    for (a, b) in parse(&base).iter().zip(parse(&tuned)) {
        assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
    }
}

#[test]
fn bench_modes_write_csv() {
    let dir = fixture();
    let ops = pfp(
        &["bench", "--model", "m.pfpm", "--batch-sizes", "1,2", "--reps", "5", "--seed", "1"],
        dir.path(),
    );
    assert!(ops.status.success());
    let text = stdout(&ops);
    assert_eq!(text.lines().next(), Some("target,operator,config,median_ns,mad_ns,fraction"));
    assert_eq!(text.lines().filter(|l| l.contains("end_to_end")).count(), 2);

    let sp = pfp(
        &["bench", "--model", "m.pfpm", "--mode", "speedup", "--batch-sizes", "1", "--reps", "5", "--seed", "1"],
        dir.path(),
    );
    assert!(sp.status.success());
    assert!(stdout(&sp).starts_with("batch,samples,pfp_median_ns,mc_median_ns,speedup"));
}

#[test]
fn mi_gap_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = pfp(&["mi-gap", "--items", "64", "--samples", "256", "--seed", "1"], dir.path());
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let gap = v["relative_underestimate"].as_f64().unwrap();
    assert!(gap > 0.0 && gap < 1.0);
}

#[test]
fn blob_input_matches_csv() {
    let dir = fixture();
    let mut blob = b"{\"shape\":[2,8]}\n".to_vec();
    for v in [0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 1., 0., 1., 0., 1., 0., 1., 0.] {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.path().join("x.bin"), blob).unwrap();
    let a = pfp(&["predict", "--model", "m.pfpm", "--input", "x.csv"], dir.path());
    let b = pfp(&["predict", "--model", "m.pfpm", "--input", "x.bin"], dir.path());
    assert!(b.status.success());
    assert_eq!(a.stdout, b.stdout);
}
