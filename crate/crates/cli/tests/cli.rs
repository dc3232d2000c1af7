use std::path::Path;
use std::process::{Command, Output};

use scorelab_cli::RunManifest;
use tempfile::TempDir;

fn scorelab(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scorelab"))
        .args(args)
        .current_dir(cwd)
        .env_remove(scorelab_cli::OUT_ENV)
        .output()
        .expect("spawn scorelab")
}

fn ok(cwd: &Path, args: &[&str]) -> RunManifest {
    let out = scorelab(cwd, args);
    assert!(out.status.success(), "scorelab {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    let dir = args.iter().position(|a| *a == "--out").map(|i| args[i + 1]).expect("tests pass --out");
    manifest(&cwd.join(dir))
}

fn manifest(dir: &Path) -> RunManifest {
    toml::from_str(&std::fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap()
}

fn read_csv_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn empty_config_resolves_to_defaults() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("empty.toml"), "").unwrap();
    let m = ok(tmp.path(), &["--config", "empty.toml", "sample", "-n", "50", "--steps", "20", "--out", "run"]);
    assert_eq!(m.command, "sample");
    assert_eq!(m.seed, 0);
    assert_eq!(m.config.model.kind, scorelab_core::ModelKind::Vp);
    assert_eq!(m.config.model.horizon, 1.0);
    assert_eq!(m.config.model.dim, 2);
    assert_eq!(m.outputs.len(), 1);
    assert_eq!(m.outputs[0].path, "samples.csv");
}

#[test]
fn override_changes_config_and_hash() {
    let tmp = TempDir::new().unwrap();
    let base = ok(tmp.path(), &["sample", "-n", "50", "--steps", "20", "--out", "a"]);
    let over = ok(tmp.path(), &["--set", "model.beta_max=5", "sample", "-n", "50", "--steps", "20", "--out", "b"]);
    assert_eq!(over.config.model.beta_max, 5.0);
    assert_ne!(base.config_hash, over.config_hash);
}

#[test]
fn misspelled_key_is_rejected_with_hint() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("c.toml"), "[model]\nbeta_mx = 5.0\n").unwrap();
    let out = scorelab(tmp.path(), &["--config", "c.toml", "sample", "--out", "run"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.beta_mx") && err.contains("beta_max"), "{err}");
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn type_mismatch_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = scorelab(tmp.path(), &["--set", "model.horizon=\"long\"", "sample", "--out", "run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid type"));
}

#[test]
fn invalid_scheme_leaves_no_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = scorelab(tmp.path(), &["sample", "--scheme", "rk45", "--out", "run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rk45"));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn failing_command_leaves_no_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = scorelab(tmp.path(), &["sample", "--score", "learned:missing.bin", "--out", "run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.bin"));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn reruns_reproduce_output_hashes() {
    let tmp = TempDir::new().unwrap();
    let args = |d: &'static str| ["--seed", "11", "sample", "-n", "200", "--steps", "50", "--out", d];
    let a = ok(tmp.path(), &args("a"));
    let b = ok(tmp.path(), &args("b"));
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(a.outputs, b.outputs);
    let c = ok(tmp.path(), &["--seed", "12", "sample", "-n", "200", "--steps", "50", "--out", "c"]);
    assert_ne!(a.outputs[0].sha256, c.outputs[0].sha256);
}

#[test]
fn default_run_directory_uses_env_and_hash() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_scorelab"))
        .args(["sample", "-n", "20", "--steps", "10"])
        .current_dir(tmp.path())
        .env(scorelab_cli::OUT_ENV, "runs")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dirs: Vec<_> = std::fs::read_dir(tmp.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    let m = manifest(&dirs[0]);
    let name = dirs[0].file_name().unwrap().to_string_lossy().into_owned();
    assert_eq!(name, format!("sample-{}", &m.config_hash[..12]));
}

#[test]
fn swiss_roll_oracle_sampling_gives_2d_points() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(tmp.path().join("roll.toml"), "[target]\nkind = \"swiss_roll\"\n").unwrap();
    ok(tmp.path(), &["--config", "roll.toml", "sample", "-n", "300", "--steps", "50", "--out", "run"]);
    let rows = read_csv_rows(&tmp.path().join("run/samples.csv"));
    assert!(rows[0].starts_with('#'));
    assert_eq!(rows[1], "x0,x1");
    assert_eq!(rows.len(), 302);
    assert!(rows[2..].iter().all(|r| r.split(',').all(|v| v.parse::<f64>().unwrap().is_finite())));
}

#[test]
fn explicit_output_path_is_listed() {
    let tmp = TempDir::new().unwrap();
    let m = ok(tmp.path(), &["sample", "-n", "20", "--steps", "10", "--output", "elsewhere/points.csv", "--out", "run"]);
    assert!(tmp.path().join("run/elsewhere/points.csv").exists());
    assert_eq!(m.outputs[0].path, "elsewhere/points.csv");
}

#[test]
fn train_then_sample_and_eval() {
    let tmp = TempDir::new().unwrap();
    let t = ok(
        tmp.path(),
        &["--set", "network.hidden=[16]", "--set", "train.batch_size=32", "train", "--iterations", "30", "--out", "t"],
    );
    let names: Vec<_> = t.outputs.iter().map(|o| o.path.as_str()).collect();
    assert_eq!(names, ["score.bin", "loss.csv"]);
    assert_eq!(read_csv_rows(&tmp.path().join("t/loss.csv")).len(), 31);

    let s = ok(tmp.path(), &["sample", "--score", "learned:t/score.bin", "-n", "100", "--steps", "20", "--out", "s"]);
    assert_eq!(s.inputs.len(), 1);
    assert_eq!(s.inputs[0].sha256, t.outputs[0].sha256);

    let e = ok(tmp.path(), &["eval", "--samples", "s/samples.csv", "--out", "e"]);
    assert_eq!(e.inputs.len(), 1);
    let rows = read_csv_rows(&tmp.path().join("e/metrics.csv"));
    assert_eq!(rows[0], "name,value,mc_error,n_used");
    let names: Vec<_> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["sliced_w2", "sliced_w2_baseline", "tv_histogram"]);

    let e2 = ok(tmp.path(), &["eval", "--samples", "s/samples.csv", "--reference", "s/samples.csv", "--out", "e2"]);
    assert_eq!(e2.inputs.len(), 2);
    let rows = read_csv_rows(&tmp.path().join("e2/metrics.csv"));
    let w2: f64 = rows[1].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(w2, 0.0);
}

#[test]
fn sweep_writes_tables_and_plot_series() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(
        tmp.path().join("sweep.toml"),
        "[[sweep]]\nexperiment = \"step_order\"\nsamples = 20000\n\n[[sweep]]\nexperiment = \"exp_family_rate\"\nreplications = 100\n",
    )
    .unwrap();
    let m = ok(tmp.path(), &["--config", "sweep.toml", "sweep", "--out", "w"]);
    let run = tmp.path().join("w");
    for f in ["step_order.csv", "exp_family_rate.csv", "step_order_checks.csv", "summary.csv", "plots/step_order_log_error.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
        assert!(m.outputs.iter().any(|o| o.path.ends_with(f.rsplit('/').next().unwrap())), "{f} not in manifest");
    }
    let summary = read_csv_rows(&run.join("summary.csv"));
    assert_eq!(summary[0], "experiment,passed,checks_passed,checks_total");
    assert_eq!(summary.len(), 3);
    let log_err = read_csv_rows(&run.join("plots/step_order_log_error.csv"));
    assert_eq!(log_err[0], "x,y,y_err,series");
    assert_eq!(log_err.len(), 5);
    assert!(log_err[1..].iter().all(|r| r.split(',').next().unwrap().parse::<f64>().unwrap() < 0.0));
    let slope = read_csv_rows(&run.join("plots/step_order_fitted_slope.csv"));
    assert_eq!(slope.len(), 2);
}

#[test]
fn sweep_without_experiments_fails() {
    let tmp = TempDir::new().unwrap();
    let out = scorelab(tmp.path(), &["sweep", "--out", "w"]);
    assert!(!out.status.success());
    assert!(!tmp.path().join("w").exists());
}

#[test]
fn consistency_training_run() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(
        tmp.path().join("c.toml"),
        "samples = 64\n[model]\nkind = \"ve\"\nve_schedule = \"linear\"\n[flow]\nhidden = [16]\n[consistency]\nbatch_size = 16\n",
    )
    .unwrap();
    for mode in ["cd", "ct", "continuous-cd", "continuous-ct"] {
        let dir = format!("c-{mode}");
        let m = ok(tmp.path(), &["--config", "c.toml", "consistency", "--mode", mode, "--iterations", "5", "--out", &dir]);
        let names: Vec<_> = m.outputs.iter().map(|o| o.path.as_str()).collect();
        assert_eq!(names, ["flow.bin", "loss.csv", "samples.csv"]);
        assert_eq!(read_csv_rows(&tmp.path().join(&dir).join("samples.csv")).len(), 66);
    }
}

#[test]
fn finetune_run_emits_objective_trace() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(
        tmp.path().join("f.toml"),
        "samples = 500\n[model]\nkind = \"ou\"\ndim = 1\nhorizon = 2.0\n\
         [target]\nweights = [1.0]\nmeans = [[0.0]]\nvariances = [1.0]\n\
         [finetune]\nbatch_size = 100\neval_every = 5\neval_batch = 200\n\
         [policy.exploration]\nkind = \"constant\"\nsigma = 0.5\n",
    )
    .unwrap();
    let m = ok(tmp.path(), &["--config", "f.toml", "finetune", "--center", "2", "--beta-pen", "1", "--iterations", "20", "--out", "f"]);
    assert_eq!(m.config.policy.center, vec![2.0]);
    let rows = read_csv_rows(&tmp.path().join("f/objective.csv"));
    assert_eq!(rows[0], "iteration,objective,std_err,grad_norm");
    assert_eq!(rows.len(), 6);
    assert_eq!(read_csv_rows(&tmp.path().join("f/samples.csv")).len(), 502);
}
