use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
problem = "nlpoisson1d_inverse"
noise = "0.01"
eval_grid = 21
predict_draws = 8

[schedule]
steps = 20
phase_split = 10
log_every = 10

[model]
latent_dim = 2
hidden = [8, 8]
quadrature = 16
kl_terms = 8
draws = 2
"#;

fn lvmgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvmgp")).args(args).output().expect("binary runs")
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.join("run");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap(), "-q"];
    args.extend_from_slice(extra);
    lvmgp(&args)
}

#[test]
fn train_writes_outputs_and_predict_reads_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = train(tmp.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("metric,value"));
    assert!(stdout.contains("lambda_mean.lambda,"));

    let run = tmp.path().join("run");
    for f in ["config.toml", "loss_trace.csv", "metrics.csv", "checkpoint.bin", "prediction_u.csv", "prediction_f.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let trace = fs::read_to_string(run.join("loss_trace.csv")).unwrap();
    assert!(trace.starts_with("step,"));
    assert_eq!(trace.lines().count(), 1 + 3);

    let pred_dir = tmp.path().join("pred");
    let out = lvmgp(&[
        "predict",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--grid",
        "11",
        "--draws",
        "8",
        "--output-dir",
        pred_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("lambda: mean"));
    let u = fs::read_to_string(pred_dir.join("prediction_u.csv")).unwrap();
    assert_eq!(u.lines().next(), Some("x0,mean,epistemic_std,total_std"));
    assert_eq!(u.lines().count(), 12);
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = train(d.path(), &["--deterministic", "--seed", "7"]);
        assert!(out.status.success());
    }
    let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join("run").join(f)).unwrap();
    for f in ["metrics.csv", "loss_trace.csv", "prediction_u.csv"] {
        assert_eq!(read(&a, f), read(&b, f), "{f} differs");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "problem = \"poisson1d\"\nstepz = 3\n").unwrap();
    let out = lvmgp(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn unknown_problem_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "problem = \"heat3d\"\n").unwrap();
    let out = lvmgp(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn corrupt_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("checkpoint.bin");
    fs::write(&ck, b"not a checkpoint").unwrap();
    let out = lvmgp(&["predict", "--checkpoint", ck.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gp_validate_prints_csv() {
    let out = lvmgp(&["gp-validate", "--lengthscale", "0.5", "--samples", "2000", "--terms", "16"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = String::from_utf8(out.stdout).unwrap();
    assert!(s.lines().count() > 1);
    assert!(!s.contains("NaN"));
}

#[test]
fn benchmark_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let suite = format!(
        r#"output_dir = "{}"
seed = 1

[[runs]]
problem = "nlpoisson1d_inverse"
noise = ["0.01"]
methods = ["lvmgp"]

[runs.overrides]
eval_grid = 11
predict_draws = 4
schedule = {{ steps = 6, phase_split = 3, log_every = 3 }}
model = {{ latent_dim = 2, hidden = [4], quadrature = 8, kl_terms = 4, draws = 2 }}
"#,
        tmp.path().join("bench").display()
    );
    let path = tmp.path().join("suite.toml");
    fs::write(&path, suite).unwrap();
    let out = lvmgp(&["benchmark", "--suite", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(tmp.path().join("bench/summary.csv")).unwrap();
    assert!(summary.starts_with("problem,noise,method,quantity"));
    assert!(summary.lines().any(|l| l.starts_with("nlpoisson1d_inverse,0.01,lvmgp,lambda,")));
}
