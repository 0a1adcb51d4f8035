//! Black-box tests of the `graphevo` binary: pipeline wiring, error
//! reporting, flag precedence, and artifact determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_graphevo");

const TINY_CONF: &str = "\
n_subjects = 12
n_r = 7
n_timepoints = 3
n_clusters = 3
sigma = 0.03
delta = 0.03
train_fraction = 0.75
n_independent = 4
epochs = 3
hidden_normalizer = 4
hidden_discriminator = 4
k_min = 2
k_max = 3
k_predict = 2
eval_mode = split
seed = 7
";

fn write_conf(dir: &Path, content: &str) {
    fs::write(dir.join("pipeline.conf"), content).unwrap();
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .args(["--config", "pipeline.conf"])
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_commands_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write_conf(dir.path(), TINY_CONF);
    for command in ["gen-data", "build-cbt", "train", "embed", "predict", "evaluate"] {
        let out = run_in(dir.path(), &[command]);
        assert_ok(&out, command);
    }
    for artifact in [
        "data/manifest.txt",
        "data/independent/manifest.txt",
        "artifacts/cbt/cbt.csv",
        "artifacts/cbt/cbt_provenance.txt",
        "artifacts/model.txt",
        "artifacts/loss_trace.csv",
        "artifacts/embeddings.csv",
        "artifacts/predictions/selection.csv",
        "artifacts/report.csv",
        "artifacts/report_per_k.csv",
    ] {
        assert!(dir.path().join(artifact).is_file(), "missing artifact {artifact}");
    }

    let report = fs::read_to_string(dir.path().join("artifacts/report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 5, "header plus one row per strategy:\n{report}");
    assert!(lines[0].starts_with("method,t1_mean_mae,"));
    for (line, label) in lines[1..].iter().zip(["SS-OF", "SS-CR", "SS-CE", "Ours"]) {
        assert!(line.starts_with(&format!("{label},")), "row {line}");
    }

    let trace = fs::read_to_string(dir.path().join("artifacts/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3, "header plus one row per epoch");

    // Forecasts exist for every test subject and follow-up timepoint.
    let predictions = fs::read_dir(dir.path().join("artifacts/predictions")).unwrap().count();
    assert_eq!(predictions, 3 * 2 + 1, "3 test subjects × 2 timepoints + report");
}

#[test]
fn missing_inputs_fail_with_a_single_line_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    write_conf(dir.path(), TINY_CONF);
    assert_ok(&run_in(dir.path(), &["gen-data"]), "gen-data");

    // No template built yet: train must name the missing path.
    let out = run_in(dir.path(), &["train"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "single-line error:\n{stderr}");
    assert!(stderr.starts_with("error:"), "{stderr}");
    assert!(stderr.contains("artifacts/cbt"), "must name the path: {stderr}");

    // Missing dataset directory.
    let empty = tempfile::tempdir().unwrap();
    write_conf(empty.path(), TINY_CONF);
    let out = run_in(empty.path(), &["evaluate"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("data"), "must name the dataset dir: {stderr}");

    // Unknown config key.
    fs::write(empty.path().join("pipeline.conf"), "does_not_exist = 1\n").unwrap();
    let out = run_in(empty.path(), &["gen-data"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("does_not_exist"), "{stderr}");
    assert!(stderr.contains("pipeline.conf:1"), "names file and line: {stderr}");
}

#[test]
fn flag_overrides_take_precedence_over_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    write_conf(dir.path(), TINY_CONF);
    let out = run_in(dir.path(), &["gen-data", "--seed", "8"]);
    assert_ok(&out, "gen-data with seed override");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("\nseed = 8\n"), "echo must show the merged config:\n{stdout}");

    assert_ok(&run_in(dir.path(), &["build-cbt"]), "build-cbt");
    let out = run_in(dir.path(), &["train", "--epochs", "2"]);
    assert_ok(&out, "train with epoch override");
    let trace = fs::read_to_string(dir.path().join("artifacts/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2, "override shrank the trace");

    let out = run_in(dir.path(), &["evaluate", "--k", "2..4", "--out", "other"]);
    assert_ok(&out, "evaluate with k and out overrides");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("\nk_min = 2\n") && stdout.contains("\nk_max = 4\n"), "{stdout}");
    assert!(dir.path().join("other/report.csv").is_file());
    let per_k = fs::read_to_string(dir.path().join("other/report_per_k.csv")).unwrap();
    assert!(per_k.lines().skip(1).any(|l| l.contains(",4,")), "k = 4 must appear:\n{per_k}");
}

#[test]
fn identical_config_and_seed_give_byte_identical_artifacts() {
    let make = || {
        let dir = tempfile::tempdir().unwrap();
        write_conf(dir.path(), TINY_CONF);
        for command in ["gen-data", "build-cbt", "train", "embed", "evaluate"] {
            assert_ok(&run_in(dir.path(), &[command]), command);
        }
        dir
    };
    let a = make();
    let b = make();
    for artifact in [
        "data/manifest.txt",
        "data/s000_t0.csv",
        "artifacts/cbt/cbt.csv",
        "artifacts/model.txt",
        "artifacts/loss_trace.csv",
        "artifacts/embeddings.csv",
        "artifacts/report.csv",
        "artifacts/report_per_k.csv",
    ] {
        let left = fs::read(a.path().join(artifact)).unwrap();
        let right = fs::read(b.path().join(artifact)).unwrap();
        assert_eq!(left, right, "artifact {artifact} differs between identical runs");
    }
}
