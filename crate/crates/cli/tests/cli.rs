use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixtures() -> PathBuf {
    root().join("crates/core/tests/fixtures")
}

fn perceptfe(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_perceptfe"));
    cmd.args(args).current_dir(root());
    match threads {
        Some(n) => cmd.env("PERCEPTFE_THREADS", n.to_string()),
        None => cmd.env_remove("PERCEPTFE_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = perceptfe(args, None);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn manifest_without_timestamp(dir: &Path) -> serde_json::Value {
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert!(m["timestamp"].as_str().is_some_and(|t| !t.is_empty()));
    m.as_object_mut().unwrap().remove("timestamp");
    m
}

#[test]
fn describe_fixture_matches_golden_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let data = fixtures();
    let stdout = ok(&["describe", "--data-dir", data.to_str().unwrap(), "--out-dir", out]);
    let golden = fs::read_to_string(data.join("cohort_table.golden.txt")).unwrap();
    assert_eq!(stdout, golden);
    assert_eq!(fs::read_to_string(tmp.path().join("cohort_table.txt")).unwrap(), golden);
    let m = manifest_without_timestamp(tmp.path());
    assert_eq!(m["inputs"].as_object().unwrap().len(), 3);
    assert_eq!(m["config_hashes"].as_object().unwrap().len(), 3);
}

#[test]
fn linked_panels_describe_the_same() {
    let tmp = tempfile::tempdir().unwrap();
    let link_dir = tmp.path().join("link");
    let data = fixtures();
    ok(&["link", "--data-dir", data.to_str().unwrap(), "--out-dir", link_dir.to_str().unwrap()]);
    let panels = link_dir.join("panels.csv");
    let stdout = ok(&["describe", "--panels", panels.to_str().unwrap(), "--out-dir", tmp.path().join("d").to_str().unwrap()]);
    assert_eq!(stdout, fs::read_to_string(data.join("cohort_table.golden.txt")).unwrap());
}

#[test]
fn ingest_writes_records_and_rejections() {
    let tmp = tempfile::tempdir().unwrap();
    let data = fixtures();
    ok(&["ingest", "--state", "tx", "--data-dir", data.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    let records = fs::read_to_string(tmp.path().join("records_tx.jsonl")).unwrap();
    let rejections = fs::read_to_string(tmp.path().join("rejections_tx.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 9);
    assert_eq!(rejections.lines().count(), 1);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = perceptfe(&["frobnicate"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frobnicate"));
}

#[test]
fn invalid_flag_combinations_are_usage_errors() {
    let data = fixtures();
    let d = data.to_str().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    for args in [
        vec!["fit", "--data-dir", d, "--controls", "none", "--controls", "officer", "--out-dir", o],
        vec!["fit", "--data-dir", d, "--state", "co", "--controls", "duration", "--out-dir", o],
        vec!["fit", "--data-dir", d, "--state", "tx", "--outcome", "arrest", "--out-dir", o],
        vec!["fit", "--data-dir", d, "--panels", "x.csv", "--out-dir", o],
        vec!["fit", "--estimator", "probit", "--data-dir", d, "--out-dir", o],
    ] {
        let out = perceptfe(&args, None);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn stage_failure_exits_nonzero_with_the_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = perceptfe(
        &["fit", "--panels", "does/not/exist.csv", "--out-dir", tmp.path().to_str().unwrap()],
        None,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does/not/exist.csv"));
}

#[test]
fn simulation_is_reproducible_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: usize| {
        let dir = tmp.path().join(name);
        let out = perceptfe(
            &["simulate", "--preset", "null", "--n-drivers", "3000", "--seed", "42", "--out-dir", dir.to_str().unwrap()],
            Some(threads),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    };
    let a = run("a", 1);
    let b = run("b", 4);
    assert_eq!(fs::read(a.join("panels.csv")).unwrap(), fs::read(b.join("panels.csv")).unwrap());
    let (mut ma, mb) = (manifest_without_timestamp(&a), manifest_without_timestamp(&b));
    // the command line names different output directories
    ma["command"] = mb["command"].clone();
    assert_eq!(ma, mb);
    assert_eq!(ma["seeds"], serde_json::json!([42]));
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("ground_truth.json")).unwrap()).unwrap();
    assert_eq!(truth["delta"], serde_json::json!(0.0));
}

#[test]
fn fit_on_simulated_panel_writes_result_and_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    ok(&["simulate", "--preset", "taste", "--n-drivers", "4000", "--seed", "9", "--out-dir", sim.to_str().unwrap()]);
    let panels = sim.join("panels.csv");
    let fit_dir = tmp.path().join("fit");
    let args = [
        "fit",
        "--panels",
        panels.to_str().unwrap(),
        "--state",
        "az",
        "--controls",
        "loctime",
        "--controls",
        "officer",
        "--plot-data",
        "--out-dir",
        fit_dir.to_str().unwrap(),
    ];
    let stdout = ok(&args);
    assert!(stdout.contains("location/time + officer FE"));
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(fit_dir.join("fit.json")).unwrap()).unwrap();
    let (lo, hi) = (result["ci95"][0].as_f64().unwrap(), result["ci95"][1].as_f64().unwrap());
    let est = result["delta_hat"].as_f64().unwrap();
    assert!(lo < est && est < hi);
    let plot = fs::read_to_string(fit_dir.join("plot_data.csv")).unwrap();
    let mut lines = plot.lines();
    assert!(lines.next().unwrap().starts_with("label,estimator,outcome,scale,estimate,ci_lo,ci_hi"));
    assert_eq!(lines.count(), 1);

    // same inputs, same output digests
    let again = tmp.path().join("fit2");
    let mut args2 = args;
    args2[11] = again.to_str().unwrap();
    ok(&args2);
    let (a, b) = (manifest_without_timestamp(&fit_dir), manifest_without_timestamp(&again));
    assert_eq!(a["outputs"], b["outputs"]);
    assert_eq!(a["inputs"], b["inputs"]);
}

#[test]
fn report_on_fixture_lists_every_battery_entry() {
    let tmp = tempfile::tempdir().unwrap();
    let data = fixtures();
    let stdout = ok(&["report", "--data-dir", data.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert!(stdout.starts_with(&fs::read_to_string(data.join("cohort_table.golden.txt")).unwrap()));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    let n = report["fits"].as_array().unwrap().len() + report["failures"].as_array().unwrap().len();
    // 12 search fits, duration for Arizona, 4 arrest fits for Arizona and Colorado
    assert_eq!(n, 17);
}
