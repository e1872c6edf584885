use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use rsds::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingState};
use rsds::datagen::{read_dataset, read_header, write_dataset, Dataset};
use rsds::flow::FlowStack;
use rsds::model::Model;
use rsds::nnet::Mlp;
use rsds::rmsm::{RmsmParams, Switching};

fn rsds(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsds"))
        .args(args)
        .current_dir(dir)
        .env("RSDS_LOG", "warn")
        .output()
        .expect("run rsds")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn value<'a>(report: &'a str, key: &str) -> &'a str {
    report
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {report}"))
}

const SMALL: &[&str] = &[
    "--generator.latent_dim=2",
    "--generator.n_train=12",
    "--generator.n_test=4",
    "--generator.length=15",
];

const SMALL_MODEL: &[&str] = &[
    "--model.obs_dim=2",
    "--model.latent_dim=2",
    "--model.regimes=3",
    "--model.flow_depth=2",
    "--model.flow_hidden=4",
    "--model.transition_hidden=4",
    "--train.batch_size=4",
];

fn generate_small(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["generate", "--out", "d.rsds", "--seed", "3"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(rsds(dir, &args));
    dir.join("d.rsds")
}

#[test]
fn default_generate_has_full_size() {
    let dir = tempfile::tempdir().unwrap();
    ok(rsds(dir.path(), &["generate", "--out", "d.rsds"]));
    let h = read_header(&dir.path().join("d.rsds")).unwrap();
    assert_eq!((h.sequences, h.length), (10_000, 100));
    assert!(dir.path().join("d.test.rsds").exists());
    assert!(dir.path().join("d.rsds.txt").exists());
}

#[test]
fn sequence_override_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    ok(rsds(dir.path(), &["generate", "--out", "a.rsds", "--n-sequences", "10", "--generator.length=8"]));
    ok(rsds(dir.path(), &["generate", "--out", "b.rsds", "--n-sequences", "10", "--generator.length=8"]));
    let a = std::fs::read(dir.path().join("a.rsds")).unwrap();
    let b = std::fs::read(dir.path().join("b.rsds")).unwrap();
    assert_eq!(a, b);
    assert_eq!(read_header(&dir.path().join("a.rsds")).unwrap().sequences, 10);
}

#[test]
fn train_smoke_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d, &[]);
    let mut args = vec!["train", "--data", "d.rsds", "--out", "m.rsdc", "--train.epochs=2", "--deterministic"];
    args.extend_from_slice(SMALL_MODEL);
    ok(rsds(d, &args));
    let ck = load_checkpoint(&d.join("m.rsdc")).unwrap();
    assert_eq!(ck.state.epoch, 2);
    let log = std::fs::read_to_string(d.join("m.rsdc.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.starts_with("epoch=") && l.contains("loglik=")));
}

#[test]
fn resume_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d, &[]);
    let run = |extra: &[&str]| {
        let mut args = vec!["train", "--data", "d.rsds", "--deterministic", "--seed", "5"];
        args.extend_from_slice(SMALL_MODEL);
        args.extend_from_slice(extra);
        ok(rsds(d, &args));
    };
    run(&["--out", "straight.rsdc", "--train.epochs=2"]);
    run(&["--out", "half.rsdc", "--train.epochs=1"]);
    run(&["--out", "resumed.rsdc", "--train.epochs=1", "--resume", "half.rsdc"]);
    let a = std::fs::read(d.join("straight.rsdc")).unwrap();
    let b = std::fs::read(d.join("resumed.rsdc")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d, &[]);
    for (out, threads) in [("t1.rsdc", "1"), ("t3.rsdc", "3")] {
        let mut args = vec!["train", "--data", "d.rsds", "--out", out, "--threads", threads, "--train.epochs=1"];
        args.extend_from_slice(SMALL_MODEL);
        ok(rsds(d, &args));
    }
    assert_eq!(std::fs::read(d.join("t1.rsdc")).unwrap(), std::fs::read(d.join("t3.rsdc")).unwrap());
}

#[test]
fn eval_of_generating_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["generate", "--out", "d.rsds", "--generator.identity_emission=true"];
    args.extend_from_slice(&["--generator.n_train=20", "--generator.n_test=50", "--generator.length=100"]);
    ok(rsds(d, &args));
    let report = ok(rsds(d, &["eval", "--checkpoint", "d.truth.rsdc", "--data", "d.test.rsds"]));
    let keys: Vec<&str> = report.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(keys, vec!["sequences", "loglik_per_step", "mcc", "regime_f1"]);
    assert!(value(&report, "regime_f1").parse::<f64>().unwrap() >= 0.95, "{report}");
    assert_eq!(value(&report, "mcc").parse::<f64>().unwrap(), 1.0);
}

#[test]
fn eval_skips_missing_truth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(rsds(d, &["generate", "--out", "d.rsds", "--generator.kind=cosine", "--generator.n_train=5", "--generator.length=20"]));
    let mut ds = read_dataset(&d.join("d.rsds")).unwrap();
    ds.s = None;
    write_dataset(&d.join("nos.rsds"), &ds).unwrap();
    let o = rsds(d, &["eval", "--checkpoint", "d.truth.rsdc", "--data", "nos.rsds"]);
    let report = ok(o);
    assert_eq!(value(&report, "regime_f1"), "skipped");
    assert!(value(&report, "mcc").parse::<f64>().is_ok());
    assert!(value(&report, "loglik_per_step").parse::<f64>().is_ok());
}

#[test]
fn theory_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(rsds(d, &["generate", "--out", "c.rsds", "--generator.kind=cosine", "--generator.n_train=2", "--generator.length=5"]));
    let report = ok(rsds(d, &["theory", "--checkpoint", "c.truth.rsdc"]));
    let line = report.lines().find(|l| l.starts_with("margin regime=0")).unwrap();
    assert!((value(line, "origin").parse::<f64>().unwrap() - 5.0).abs() < 1e-6);

    // Ratio vector (1, 2, 1/2) from sigma_1 = (1, 1/2, 1/4), sigma_2 = (1, 1/4, 1/2).
    let id = Mlp::linear(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[0.0; 3]).unwrap();
    let ls = |v: [f64; 3]| v.iter().map(|s| s.ln()).collect::<Vec<_>>();
    let rmsm = RmsmParams::new(
        vec![0.0; 2],
        vec![vec![0.0; 3]; 2],
        vec![vec![0.0; 3]; 2],
        vec![id.clone(), id],
        vec![ls([1.0, 0.5, 0.25]), ls([1.0, 0.25, 0.5])],
        false,
        Switching::Autonomous(DMatrix::zeros(2, 2)),
    )
    .unwrap();
    let model = Model::new(FlowStack::identity(3, 3).unwrap(), rmsm).unwrap();
    save_checkpoint(&d.join("r.rsdc"), &Checkpoint { model, state: TrainingState::default() }).unwrap();
    let report = ok(rsds(d, &["theory", "--checkpoint", "r.rsdc", "--eval.probe_count=2"]));
    assert!(report.contains("ratio pair=0,1 values=1.000000,2.000000,0.500000"), "{report}");
    assert!(report.contains("ratio_columns distinct=true"));

    let single = RmsmParams::new(
        vec![0.0],
        vec![vec![0.0]],
        vec![vec![0.0]],
        vec![Mlp::linear(&[1.0], &[0.0]).unwrap()],
        vec![vec![0.0]],
        false,
        Switching::Autonomous(DMatrix::zeros(1, 1)),
    )
    .unwrap();
    let model = Model::new(FlowStack::identity(1, 1).unwrap(), single).unwrap();
    save_checkpoint(&d.join("k1.rsdc"), &Checkpoint { model, state: TrainingState::default() }).unwrap();
    let report = ok(rsds(d, &["theory", "--checkpoint", "k1.rsdc"]));
    assert!(report.contains("dominance trivially satisfied"));

    let report = ok(rsds(d, &["theory", "--eval.margin=5", "--eval.stickiness=0.1", "--eval.r1=2"]));
    assert!(report.contains("horizon=2 one_step=true"), "{report}");
}

#[test]
fn theory_disentangles_covariance_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.txt"), "1 0\n0 2\n\n3 0\n0 1\n").unwrap();
    let report = ok(rsds(d, &["theory", "--eval.covariances=c.txt"]));
    assert!(report.contains("disentanglement full=true"), "{report}");
}

#[test]
fn forecast_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = ["generate", "--out", "b.rsds", "--generator.kind=ball", "--generator.n_train=2", "--generator.n_test=40", "--generator.identity_emission=true"];
    ok(rsds(d, &gen));
    let o = rsds(d, &["forecast", "--checkpoint", "b.truth.rsdc", "--data", "b.test.rsds", "--eval.horizon=0", "--out", "p0.csv"]);
    ok(o);
    assert_eq!(std::fs::read_to_string(d.join("p0.csv")).unwrap(), "");

    let report = ok(rsds(d, &["forecast", "--checkpoint", "b.truth.rsdc", "--data", "b.test.rsds", "--out", "p.csv"]));
    let mse: f64 = value(&report, "mse").parse().unwrap();
    // Open-loop rollout: the error variance grows by the process noise every step.
    let h = 36.0;
    let floor = 0.005f64.powi(2) * (h + 1.0) / 2.0;
    assert!(mse > 0.2 * floor && mse < 5.0 * floor, "mse {mse} vs floor {floor}");
    assert!(value(&report, "predicted_f1").parse::<f64>().unwrap() > 0.9, "{report}");
    assert_eq!(std::fs::read_to_string(d.join("p.csv")).unwrap().lines().count(), 40 * 36);

    let mc = ["forecast", "--checkpoint", "b.truth.rsdc", "--data", "b.test.rsds", "--eval.mode=mc", "--eval.samples=4", "--seed", "7"];
    let a = ok(rsds(d, &[&mc[..], &["--out", "m1.csv"]].concat()));
    let b = ok(rsds(d, &[&mc[..], &["--out", "m2.csv"]].concat()));
    assert_eq!(a, b);
    assert_eq!(std::fs::read(d.join("m1.csv")).unwrap(), std::fs::read(d.join("m2.csv")).unwrap());

    let long = ok(rsds(d, &["forecast", "--checkpoint", "b.truth.rsdc", "--data", "b.test.rsds", "--eval.horizon=100"]));
    assert_eq!(value(&long, "skipped_sequences"), "40");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(rsds(d, &["train", "--data", "d.rsds", "--out", "m.rsdc", "--train.bogus=1"]).status.code(), Some(1));
    std::fs::write(d.join("bad.ini"), "[train]\nepochs = 2\nnope = 3\n").unwrap();
    let o = rsds(d, &["train", "--config", "bad.ini", "--data", "d.rsds", "--out", "m.rsdc"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    assert_eq!(rsds(d, &["train", "--data", "missing.rsds", "--out", "m.rsdc"]).status.code(), Some(2));
    assert_eq!(rsds(d, &["frobnicate"]).status.code(), Some(1));

    generate_small(d, &[]);
    // Model expects 3 columns by default; the data has 2.
    let o = rsds(d, &["train", "--data", "d.rsds", "--out", "m.rsdc"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.join("m.rsdc").exists());

    let huge = Dataset {
        x: vec![DMatrix::from_element(5, 2, 1e300); 6],
        z: None,
        s: None,
        regimes: 3,
        metadata: vec![],
    };
    write_dataset(&d.join("huge.rsds"), &huge).unwrap();
    let mut args = vec!["train", "--data", "huge.rsds", "--out", "h.rsdc", "--train.epochs=1", "--train.pca_init=false"];
    args.extend_from_slice(SMALL_MODEL);
    args.push("--train.batch_size=1");
    let o = rsds(d, &args);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("h.rsdc").exists());
}
