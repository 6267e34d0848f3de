//! Command-line behaviors: exit codes, config precedence, fingerprint
//! enforcement, and the sweep/report aggregation contracts.

use std::path::Path;
use std::process::Command;

fn owl(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_owl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn owl binary")
}

/// Tiny pipeline shared by the CLI tests (small corpus, quick training).
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn path(&self) -> &Path {
        self.dir.path()
    }
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for args in [
        vec![
            "gen-corpus",
            "--out-dir",
            ".",
            "--train-size",
            "200",
            "--eval-size",
            "60",
            "--seed",
            "11",
        ],
        vec![
            "train", "--grammar", "grammar.json", "--corpus", "train.jsonl", "--out",
            "model.owlm", "--seed", "11", "--epochs", "8",
        ],
        vec![
            "calibrate", "--model", "model.owlm", "--grammar", "grammar.json", "--corpus",
            "train.jsonl", "--out", "calib.json", "--seed", "11",
        ],
    ] {
        let out = owl(p, &args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    Fixture { dir }
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = owl(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    for sub in ["gen-corpus", "train", "calibrate", "caption", "evaluate", "report", "sweep"] {
        assert!(
            String::from_utf8_lossy(&out.stdout).contains(sub),
            "help does not mention {sub}"
        );
    }
}

#[test]
fn usage_error_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = owl(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    // Missing required artifacts is also a general failure.
    let out = owl(dir.path(), &["train", "--out", "m.owlm"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_corpus_prints_recomputable_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let out = owl(
        dir.path(),
        &[
            "gen-corpus", "--out-dir", ".", "--train-size", "40", "--eval-size", "10",
            "--seed", "3",
        ],
    );
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    for (label, file) in [("grammar", "grammar.json"), ("train", "train.jsonl"), ("eval", "eval.jsonl")] {
        let line = stdout
            .lines()
            .find(|l| l.starts_with(label))
            .unwrap_or_else(|| panic!("no {label} line in: {stdout}"));
        let printed = line.split_whitespace().nth(1).unwrap();
        let recomputed = owl_core::fingerprint::sha256_file(&dir.path().join(file)).unwrap();
        assert_eq!(printed, recomputed, "{label} hash mismatch");
    }
}

#[test]
fn numeric_blowup_exits_three() {
    let fx = fixture();
    let out = owl(
        fx.path(),
        &[
            "train", "--grammar", "grammar.json", "--corpus", "train.jsonl", "--out",
            "boom.owlm", "--seed", "11", "--epochs", "2", "--learning-rate", "1e200",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn fingerprint_mismatch_exits_two() {
    let fx = fixture();
    let p = fx.path();
    // Retrain with a different seed so the checkpoint hash changes.
    let out = owl(
        p,
        &[
            "train", "--grammar", "grammar.json", "--corpus", "train.jsonl", "--out",
            "model2.owlm", "--seed", "12", "--epochs", "1",
        ],
    );
    assert!(out.status.success());
    let out = owl(
        p,
        &[
            "evaluate", "--suite", "chair", "--strategy", "dcd", "--model", "model2.owlm",
            "--grammar", "grammar.json", "--corpus", "eval.jsonl", "--calib", "calib.json",
            "--out-dir", "reports/bad", "--seed", "11",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("calibration table"), "stderr: {stderr}");

    // --force downgrades the mismatch to a warning.
    let out = owl(
        p,
        &[
            "evaluate", "--suite", "chair", "--strategy", "dcd", "--model", "model2.owlm",
            "--grammar", "grammar.json", "--corpus", "eval.jsonl", "--calib", "calib.json",
            "--out-dir", "reports/forced", "--seed", "11", "--force",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_drives_run_and_flags_override() {
    let fx = fixture();
    let p = fx.path();
    std::fs::write(
        p.join("run.toml"),
        "model = \"model.owlm\"\ngrammar = \"grammar.json\"\ncorpus = \"eval.jsonl\"\nstrategy = \"greedy\"\nseed = 11\n",
    )
    .unwrap();
    let out = owl(
        p,
        &[
            "evaluate", "--config", "run.toml", "--suite", "chair", "--out-dir", "reports/cfg",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(p.join("reports/cfg/chair.json").exists());

    // Unknown keys in the config file are rejected.
    std::fs::write(p.join("bad.toml"), "nonsense = true\n").unwrap();
    let out = owl(
        p,
        &[
            "evaluate", "--config", "bad.toml", "--suite", "chair", "--out-dir", "reports/x",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_rows_equal_strategies_times_suites() {
    let fx = fixture();
    let p = fx.path();
    for strategy in ["greedy", "nucleus"] {
        let out = owl(
            p,
            &[
                "evaluate", "--suite", "chair", "--strategy", strategy, "--model", "model.owlm",
                "--grammar", "grammar.json", "--corpus", "eval.jsonl", "--out-dir",
                &format!("reports/{strategy}"), "--seed", "11",
            ],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let out = owl(
            p,
            &[
                "evaluate", "--suite", "pope", "--pope-setting", "random", "--strategy", strategy,
                "--model", "model.owlm", "--grammar", "grammar.json", "--corpus", "eval.jsonl",
                "--out-dir", &format!("reports/{strategy}"), "--seed", "11",
            ],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = owl(
        p,
        &["report", "--in-dir", "reports", "--out", "report.json", "--csv", "report.csv"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    // 2 strategies x 2 suites (chair + pope_random).
    assert_eq!(rows.as_array().unwrap().len(), 4);
    assert!(p.join("report.csv").exists());
}

#[test]
fn sweep_resumes_and_matches_individual_runs() {
    let fx = fixture();
    let p = fx.path();
    let sweep_args = [
        "sweep", "--model", "model.owlm", "--grammar", "grammar.json", "--corpus", "eval.jsonl",
        "--calib", "calib.json", "--out", "sweep.csv", "--alphas", "0.0,0.4", "--seed", "11",
    ];
    let out = owl(p, &sweep_args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = std::fs::read_to_string(p.join("sweep.csv")).unwrap();
    assert_eq!(first.lines().count(), 3, "header plus two rows:\n{first}");

    // Re-running skips every completed point and leaves the file unchanged.
    let out = owl(p, &sweep_args);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("skip").count(), 2, "{stdout}");
    let second = std::fs::read_to_string(p.join("sweep.csv")).unwrap();
    assert_eq!(first, second);

    // A sweep point reproduces the corresponding single evaluation.
    let out = owl(
        p,
        &[
            "evaluate", "--suite", "chair", "--strategy", "dcd", "--model", "model.owlm",
            "--grammar", "grammar.json", "--corpus", "eval.jsonl", "--calib", "calib.json",
            "--out-dir", "reports/point", "--alpha", "0.4", "--seed", "11",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let chair: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("reports/point/chair.json")).unwrap())
            .unwrap();
    let mut reader = csv::Reader::from_path(p.join("sweep.csv")).unwrap();
    let row = reader
        .deserialize::<std::collections::BTreeMap<String, f64>>()
        .map(|r| r.unwrap())
        .find(|r| r["alpha"] == 0.4)
        .expect("alpha=0.4 row");
    assert_eq!(row["chair_s"], chair["chair_s"].as_f64().unwrap());
    assert_eq!(row["chair_i"], chair["chair_i"].as_f64().unwrap());
}

#[test]
fn caption_dump_carries_scm_manifest() {
    let fx = fixture();
    let p = fx.path();
    let out = owl(
        p,
        &[
            "caption", "--model", "model.owlm", "--grammar", "grammar.json", "--corpus",
            "eval.jsonl", "--scene-id", "0", "--strategy", "dcd", "--calib", "calib.json",
            "--out", "cap.json", "--dump-vtacr", "vtacr.csv", "--seed", "11",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("cap.json")).unwrap()).unwrap();

    // VTACR dump: header plus (steps x layers) rows.
    let csv = std::fs::read_to_string(p.join("vtacr.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,token,layer,nu,tau,vtacr");
    let steps = dump["steps"].as_array().unwrap().len();
    let layers = dump["steps"][0]["profile"]["layers"].as_array().unwrap().len();
    assert_eq!(lines.count(), steps * layers);
    let interventions = dump["scm"]["interventions"].as_array().unwrap();
    assert_eq!(interventions.len(), 4, "two records per decoding path");
    for path in ["visual_favored", "text_favored"] {
        let count = interventions
            .iter()
            .filter(|r| r["path"] == path)
            .count();
        assert_eq!(count, 2);
    }

    // Baseline manifests carry zero intervention records.
    let out = owl(
        p,
        &[
            "caption", "--model", "model.owlm", "--grammar", "grammar.json", "--corpus",
            "eval.jsonl", "--scene-id", "0", "--strategy", "greedy", "--out", "cap_greedy.json",
            "--seed", "11",
        ],
    );
    assert!(out.status.success());
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("cap_greedy.json")).unwrap()).unwrap();
    assert_eq!(dump["scm"]["interventions"].as_array().unwrap().len(), 0);
}
