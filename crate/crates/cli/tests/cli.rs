use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn elmlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elmlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("ELMLAB_OUTPUT_ROOT")
        .output()
        .expect("spawn elmlab")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn parse_list(line: &str) -> Vec<f64> {
    let inner = line.split_once('[').unwrap().1.trim_end_matches(']');
    inner
        .split(',')
        .map(|s| s.trim().parse().unwrap())
        .collect()
}

fn line_with<'a>(text: &'a str, prefix: &str) -> &'a str {
    text.lines()
        .find(|l| l.starts_with(prefix))
        .unwrap_or_else(|| panic!("no `{prefix}` line in:\n{text}"))
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_CONFIG: &str = r#"{
  "data": {"source": "synthetic", "kind": "longtail", "classes": 4, "n_max": 80, "ratio": 10,
           "test_per_class": 20, "seed": 3},
  "loss": {"variant": "elm"},
  "reweight": {"beta": 0.999, "defer_epoch": 4},
  "train": {"epochs": 6, "batch_size": 32, "warmup_epochs": 2, "milestones": [4, 5]},
  "output_dir": "out",
  "seeds": [1, 2, 3]
}"#;

#[test]
fn gen_data_longtail_manifest_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "gen-data",
        "--kind",
        "longtail",
        "--classes",
        "10",
        "--nmax",
        "500",
        "--ratio",
        "100",
        "--seed",
        "1",
        "--test-per-class",
        "5",
    ];
    let first = elmlab(tmp.path(), &args);
    assert!(first.status.success(), "{}", stderr(&first));
    let manifest = json(&tmp.path().join("data/counts.json"));
    let counts: Vec<u64> = manifest["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(counts, vec![500, 300, 180, 108, 65, 39, 23, 14, 8, 5]);

    let snapshot = |name: &str| fs::read(tmp.path().join("data").join(name)).unwrap();
    let before: Vec<Vec<u8>> = ["train.csv", "test.csv", "counts.json"]
        .map(snapshot)
        .into();
    let second = elmlab(tmp.path(), &args);
    assert!(second.status.success());
    let after: Vec<Vec<u8>> = ["train.csv", "test.csv", "counts.json"]
        .map(snapshot)
        .into();
    assert_eq!(before, after);
    assert_eq!(
        String::from_utf8(before[0].clone())
            .unwrap()
            .lines()
            .count(),
        counts.iter().sum::<u64>() as usize
    );
}

#[test]
fn gen_data_ratio_one_is_balanced() {
    let tmp = tempfile::tempdir().unwrap();
    let out = elmlab(
        tmp.path(),
        &[
            "gen-data",
            "--kind",
            "step",
            "--classes",
            "4",
            "--nmax",
            "30",
            "--ratio",
            "1",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = json(&tmp.path().join("data/counts.json"));
    assert_eq!(manifest["counts"], serde_json::json!([30, 30, 30, 30]));
}

#[test]
fn gen_data_rejects_invalid_profile() {
    let tmp = tempfile::tempdir().unwrap();
    let out = elmlab(
        tmp.path(),
        &[
            "gen-data",
            "--kind",
            "longtail",
            "--classes",
            "1",
            "--nmax",
            "30",
            "--ratio",
            "10",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("data").exists());
    let out = elmlab(
        tmp.path(),
        &[
            "gen-data",
            "--kind",
            "longtail",
            "--classes",
            "3",
            "--nmax",
            "30",
            "--ratio",
            "0.5",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn output_root_variable_redirects_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_elmlab"))
        .args([
            "gen-data",
            "--kind",
            "step",
            "--classes",
            "2",
            "--nmax",
            "10",
            "--ratio",
            "2",
        ])
        .current_dir(tmp.path())
        .env("ELMLAB_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(root.join("data/counts.json").exists());
    assert!(!tmp.path().join("data").exists());
}

#[test]
fn margins_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = elmlab(
        tmp.path(),
        &["margins", "--counts", "16,81", "--max-margin", "0.5"],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    let literal = parse_list(line_with(&text, "literal:"));
    let normalized = parse_list(line_with(&text, "normalized:"));
    assert_eq!(literal, vec![0.25, 0.1666667]);
    assert_eq!(normalized, vec![0.5, 0.3333333]);

    let out = elmlab(tmp.path(), &["margins", "--counts", "5000,50"]);
    let normalized = parse_list(line_with(&stdout(&out), "normalized:"));
    assert_eq!(normalized, vec![0.1581139, 0.5]);
}

#[test]
fn margins_from_manifest_match_inline_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = elmlab(
        tmp.path(),
        &[
            "gen-data",
            "--kind",
            "longtail",
            "--classes",
            "3",
            "--nmax",
            "90",
            "--ratio",
            "9",
        ],
    );
    assert!(gen.status.success());
    let from_manifest = elmlab(tmp.path(), &["margins", "--manifest", "data/counts.json"]);
    let inline = elmlab(tmp.path(), &["margins", "--counts", "90,30,10"]);
    assert!(from_manifest.status.success());
    assert_eq!(stdout(&from_manifest), stdout(&inline));
}

#[test]
fn margins_reject_single_class() {
    let tmp = tempfile::tempdir().unwrap();
    let out = elmlab(tmp.path(), &["margins", "--counts", "7"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("2 classes"), "{}", stderr(&out));
}

#[test]
fn check_equivalence_default_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = elmlab(tmp.path(), &["check-equivalence"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    for name in ["ce-vs-lmsce", "ldam", "elm"] {
        let line = line_with(&text, &format!("PASS {name} "));
        assert!(line.contains("trials=100000"), "{line}");
    }
}

#[test]
fn check_equivalence_reports_requested_trials() {
    let tmp = tempfile::tempdir().unwrap();
    let out = elmlab(tmp.path(), &["check-equivalence", "--trials", "10"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(
        text.lines().filter(|l| l.contains("trials=10 ")).count(),
        3,
        "{text}"
    );
}

#[test]
fn printed_literal_convention_is_informational() {
    let tmp = tempfile::tempdir().unwrap();
    let out = elmlab(
        tmp.path(),
        &[
            "check-equivalence",
            "--trials",
            "200",
            "--scale-convention",
            "printed-literal",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let ldam = line_with(&text, "INFO ldam ");
    let worst: f64 = ldam
        .split_whitespace()
        .find_map(|w| w.strip_prefix("worst="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(worst > 1e-3, "mismatch should be visible, got {worst}");
}

#[test]
fn check_gradients_filters_and_step_size() {
    let tmp = tempfile::tempdir().unwrap();
    let out = elmlab(
        tmp.path(),
        &["check-gradients", "--variant", "ce", "--trials", "300"],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1, "{text}");
    assert!(text.starts_with("PASS ce "));

    let out = elmlab(
        tmp.path(),
        &[
            "check-gradients",
            "--variant",
            "elm",
            "--trials",
            "300",
            "--h",
            "1e-3",
        ],
    );
    let worst: f64 = stdout(&out)
        .split_whitespace()
        .find_map(|w| w.strip_prefix("worst="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(worst.is_finite());
}

#[test]
fn check_gradients_all_includes_model_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = elmlab(tmp.path(), &["check-gradients", "--trials", "200"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    for name in ["ce", "ldam", "elm", "model"] {
        line_with(&text, &format!("PASS {name} "));
    }
}

#[test]
fn check_gradients_exits_two_on_violation() {
    // a step this coarse cannot meet the 1e-4 bound
    let tmp = tempfile::tempdir().unwrap();
    let out = elmlab(
        tmp.path(),
        &[
            "check-gradients",
            "--variant",
            "elm",
            "--trials",
            "200",
            "--h",
            "0.5",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stdout(&out));
    assert!(stdout(&out).starts_with("FAIL elm "));
}

#[test]
fn bad_flags_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        elmlab(tmp.path(), &["check-gradients", "--variant", "hinge"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        elmlab(tmp.path(), &["check-gradients", "--h", "0"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(elmlab(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(elmlab(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn train_writes_per_seed_outputs_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("exp.json"), SMALL_CONFIG).unwrap();
    let out = elmlab(tmp.path(), &["train", "exp.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let root = tmp.path().join("out");
    for seed in 1..=3 {
        for file in ["report.json", "eval.json", "features.csv", "model.json"] {
            assert!(
                root.join(format!("seed-{seed}")).join(file).exists(),
                "seed {seed} {file}"
            );
        }
    }
    let summary = json(&root.join("summary.json"));
    assert_eq!(summary["seeds"], serde_json::json!([1, 2, 3]));
    assert_eq!(summary["evaluated_on"], "test");
    let top1 = summary["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["name"] == "top1")
        .unwrap();
    let values: Vec<f64> = top1["values"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let mean = values.iter().sum::<f64>() / 3.0;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
    assert!((top1["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((top1["std"].as_f64().unwrap() - var.sqrt()).abs() < 1e-12);

    let report = json(&root.join("seed-2/report.json"));
    assert_eq!(report["seed"], 2);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 6);
}

#[test]
fn train_is_deterministic_and_matches_sequential() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("exp.json"), SMALL_CONFIG).unwrap();
    let read_all = |dir: &Path| -> Vec<Vec<u8>> {
        let mut files = vec![fs::read(dir.join("summary.json")).unwrap()];
        for seed in 1..=3 {
            for file in ["report.json", "eval.json", "features.csv", "model.json"] {
                files.push(fs::read(dir.join(format!("seed-{seed}")).join(file)).unwrap());
            }
        }
        files
    };
    assert!(elmlab(tmp.path(), &["train", "exp.json"]).status.success());
    let first = read_all(&tmp.path().join("out"));
    assert!(elmlab(tmp.path(), &["--sequential", "train", "exp.json"])
        .status
        .success());
    let second = read_all(&tmp.path().join("out"));
    assert!(first == second, "outputs differ between runs");
}

#[test]
fn train_zero_epochs_summarizes_untrained_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SMALL_CONFIG
        .replace("\"epochs\": 6", "\"epochs\": 0")
        .replace(
            "\"warmup_epochs\": 2, \"milestones\": [4, 5]",
            "\"warmup_epochs\": 0, \"milestones\": []",
        )
        .replace("\"defer_epoch\": 4", "\"defer_epoch\": 0");
    fs::write(tmp.path().join("exp.json"), cfg).unwrap();
    let out = elmlab(tmp.path(), &["train", "exp.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = json(&tmp.path().join("out/seed-1/report.json"));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 0);
    assert!(tmp.path().join("out/summary.json").exists());
}

#[test]
fn train_rejects_bad_config_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        (
            SMALL_CONFIG.replace("\"batch_size\"", "\"batchsize\""),
            "train",
        ),
        (
            SMALL_CONFIG.replace("\"seed\": 3", "\"seed\": 3, \"noise\": 1"),
            "noise",
        ),
        (
            SMALL_CONFIG.replace("\"variant\": \"elm\"", "\"variant\": \"focal\""),
            "loss.variant",
        ),
        (
            SMALL_CONFIG.replace("\"beta\": 0.999", "\"beta\": 1.5"),
            "beta",
        ),
        (
            SMALL_CONFIG.replace("\"seeds\": [1, 2, 3]", "\"seeds\": []"),
            "seeds",
        ),
        (
            SMALL_CONFIG.replace("\"milestones\": [4, 5]", "\"milestones\": [5, 4]"),
            "milestones",
        ),
    ];
    for (cfg, needle) in cases {
        fs::write(tmp.path().join("exp.json"), &cfg).unwrap();
        let out = elmlab(tmp.path(), &["train", "exp.json"]);
        assert_eq!(out.status.code(), Some(1), "{needle}: {}", stdout(&out));
        assert!(stderr(&out).contains(needle), "{needle}: {}", stderr(&out));
        assert!(!tmp.path().join("out").exists(), "{needle}: output written");
    }
}

#[test]
fn train_from_csv_then_eval_saved_model() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = elmlab(
        tmp.path(),
        &[
            "gen-data",
            "--kind",
            "step",
            "--classes",
            "3",
            "--nmax",
            "60",
            "--ratio",
            "6",
            "--seed",
            "4",
            "--test-per-class",
            "15",
        ],
    );
    assert!(gen.status.success());
    let cfg = r#"{
      "data": {"source": "csv", "train": "data/train.csv", "test": "data/test.csv"},
      "loss": {"variant": "ldam"},
      "train": {"epochs": 4, "batch_size": 16, "warmup_epochs": 1, "milestones": []},
      "output_dir": "runs",
      "seeds": [9]
    }"#;
    fs::write(tmp.path().join("exp.json"), cfg).unwrap();
    let out = elmlab(tmp.path(), &["train", "exp.json"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let out = elmlab(
        tmp.path(),
        &[
            "eval",
            "--model",
            "runs/seed-9/model.json",
            "--data",
            "data/test.csv",
            "--counts",
            "data/counts.json",
            "--out",
            "eval/summary.json",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let from_eval = json(&tmp.path().join("eval/summary.json"));
    let from_train = json(&tmp.path().join("runs/seed-9/eval.json"));
    assert_eq!(from_eval, from_train);
    let top1: f64 = line_with(&stdout(&out), "top1:")[5..]
        .trim()
        .parse()
        .unwrap();
    assert!((top1 - from_eval["top_k"][0]["accuracy"].as_f64().unwrap()).abs() < 1e-6);
}

#[test]
fn eval_rejects_corrupt_model() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("model.json"),
        r#"{"dims": 2, "hidden": null, "classes": 2, "cosine": false, "values": [1.0]}"#,
    )
    .unwrap();
    fs::write(tmp.path().join("d.csv"), "0,1.0,2.0\n1,0.5,0.1\n").unwrap();
    let out = elmlab(
        tmp.path(),
        &["eval", "--model", "model.json", "--data", "d.csv"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reference_configs_favor_elm_drw_on_rare_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let rare = |name: &str| -> f64 {
        let cfg = configs_dir().join(format!("{name}.json"));
        let out = elmlab(tmp.path(), &["train", cfg.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        let summary = json(&tmp.path().join("runs").join(name).join("summary.json"));
        summary["metrics"]
            .as_array()
            .unwrap()
            .iter()
            .find(|m| m["name"] == "rare_recall")
            .unwrap()["mean"]
            .as_f64()
            .unwrap()
    };
    let ce = rare("ce");
    let elm = rare("elm_drw");
    assert!(elm > ce, "ELM+DRW rare recall {elm} vs CE {ce}");
}
