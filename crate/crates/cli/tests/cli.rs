use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cope(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cope"))
        .args(args)
        .current_dir(dir)
        .env_remove("COPE_OUT")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_VERIFY: &str = r#"{
  "claim1_draws": 20,
  "lemma1_sets": 10,
  "degree_instances": 3,
  "reduction_instances": 5,
  "affine_rays": 20,
  "gradient_instances": 2
}"#;

#[test]
fn verify_writes_a_passing_report() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.json"), SMALL_VERIFY).unwrap();
    let out = cope(
        tmp.path(),
        &["verify", "--config", "small.json", "--out", "v"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = read_json(&tmp.path().join("v/report.json"));
    assert_eq!(report["passed"], true);
    let names: Vec<&str> = report["suites"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["suite"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "claim1-equivalence",
            "lemma1",
            "degree-law",
            "reductions",
            "affineness",
            "gradients"
        ]
    );
    for s in report["suites"].as_array().unwrap() {
        for key in ["trials", "max_deviation", "tolerance", "passed"] {
            assert!(s.get(key).is_some(), "missing {key}");
        }
    }
    let resolved = read_json(&tmp.path().join("v/resolved_config.json"));
    assert_eq!(resolved["command"], "verify");
    assert_eq!(resolved["claim1_draws"], 20);
    assert_eq!(resolved["rank"], 16);
    let csv = std::fs::read_to_string(tmp.path().join("v/metrics.csv")).unwrap();
    assert!(csv.starts_with("suite,trials,max_deviation,tolerance,passed\n"));
}

#[test]
fn failing_suite_is_named_and_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    // central differences with h = 0.5 are far outside the gradient tolerance
    std::fs::write(
        tmp.path().join("coarse.json"),
        r#"{"gradient_step": 0.5, "gradient_instances": 2}"#,
    )
    .unwrap();
    let out = cope(
        tmp.path(),
        &[
            "verify",
            "--config",
            "coarse.json",
            "--suite",
            "gradients",
            "--out",
            "g",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("suite gradients failed"));
    assert_eq!(
        read_json(&tmp.path().join("g/report.json"))["passed"],
        false
    );
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("k0.json"), r#"{"rank": 0}"#).unwrap();
    let out = cope(tmp.path(), &["train-regression", "--config", "k0.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`rank`"));
    assert!(
        !tmp.path().join("runs").exists(),
        "nothing runs before validation"
    );

    std::fs::write(
        tmp.path().join("typo.json"),
        "{\n  \"seed\": 1,\n  \"rnak\": 4\n}",
    )
    .unwrap();
    let out = cope(tmp.path(), &["verify", "--config", "typo.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`rnak`") && err.contains("line 3"), "{err}");

    let out = cope(tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`command`"));
}

#[test]
fn training_is_byte_reproducible_and_checkpoints_load() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        [
            "train-regression",
            "--steps",
            "200",
            "--seed",
            "4",
            "--out",
            out,
        ]
    };
    assert!(cope(tmp.path(), &args("a")).status.success());
    assert!(cope(tmp.path(), &args("b")).status.success());
    let a = std::fs::read(tmp.path().join("a/metrics.csv")).unwrap();
    let b = std::fs::read(tmp.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with(b"step,loss,lr\n"));

    // the resolved config reproduces the run on its own
    let out = cope(
        tmp.path(),
        &["--config", "a/resolved_config.json", "--out", "c"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(a, std::fs::read(tmp.path().join("c/metrics.csv")).unwrap());

    let model = cope::models::load_checkpoint(&tmp.path().join("a/checkpoint.json")).unwrap();
    let report = read_json(&tmp.path().join("a/report.json"));
    assert_eq!(report["params"], model.num_params());
}

#[test]
fn conditional_run_writes_samples_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("cond.json"),
        r#"{"eval_per_class": 50, "sweep_points": 3, "min_accuracy": 0.9}"#,
    )
    .unwrap();
    let out = cope(
        tmp.path(),
        &[
            "train-conditional",
            "--config",
            "cond.json",
            "--steps",
            "400",
            "--out",
            "c",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let samples = std::fs::read_to_string(tmp.path().join("c/samples.csv")).unwrap();
    assert!(samples.starts_with("class,x,y\n"));
    assert_eq!(samples.lines().count(), 1 + 4 * 50);
    let sweep = std::fs::read_to_string(tmp.path().join("c/sweep.csv")).unwrap();
    assert!(sweep.starts_with("noise,from,to,alpha,x,y\n"));
    assert!(tmp.path().join("c/checkpoint.json").exists());
    let report = read_json(&tmp.path().join("c/report.json"));
    assert!(report["accuracy"].as_f64().unwrap() >= 0.9);
}

#[test]
fn degree_report_matches_block_orders_and_honours_cope_out() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("chain.json"),
        r#"{"orders": [2, 3], "rank": 4, "hidden": 3}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cope"))
        .args(["degree-report", "--config", "chain.json", "--seed", "2"])
        .current_dir(tmp.path())
        .env("COPE_OUT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = read_json(&tmp.path().join("root/degree-report-seed2/report.json"));
    assert_eq!(report["expected_degree"], 6);
    assert_eq!(report["measured_degree"], 6);

    std::fs::write(
        tmp.path().join("add.json"),
        r#"{"variant": "additive", "orders": [3]}"#,
    )
    .unwrap();
    let out = cope(
        tmp.path(),
        &["degree-report", "--config", "add.json", "--out", "a"],
    );
    assert!(out.status.success());
    assert_eq!(
        read_json(&tmp.path().join("a/report.json"))["measured_degree"],
        1
    );
}
