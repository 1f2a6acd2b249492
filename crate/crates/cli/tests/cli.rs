use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attrib-ens"))
}

fn base_config() -> Value {
    json!({
        "name": "cli-test",
        "seed": 7,
        "dataset": {
            "kind": "synthetic_classification",
            "n_train": 40, "n_test": 6, "dim": 4, "classes": 3,
            "separation": 2.0, "label_noise": 0.05
        },
        "model": {"kind": "mlp", "hidden": [8], "dropout": 0.1},
        "training": {
            "epochs": 5, "batch_size": 10,
            "optimizer": {"kind": "sgd_momentum", "lr": 0.05, "momentum": 0.9}
        },
        "ensemble": {"strategy": "naive", "method": "trak", "members": 2, "trak": {"proj_dim": 16}},
        "evaluation": {"m": 4}
    })
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, value: &Value) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, serde_json::to_vec_pretty(value).unwrap()).unwrap();
        p
    }

    fn run(&self, cmd: &str, config: &Path, extra: &[&str]) -> Output {
        bin().arg(cmd).arg("--config").arg(config).args(extra).output().unwrap()
    }

    fn ok(&self, cmd: &str, config: &Path, extra: &[&str]) {
        let out = self.run(cmd, config, extra);
        assert!(
            out.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn json_file(p: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&read(p)).unwrap()
}

#[test]
fn train_writes_members_and_manifest_deterministically() {
    let ws = Workspace::new();
    let cfg = ws.config("run.json", &base_config());
    ws.ok("train", &cfg, &[]);
    let out = ws.path("out");
    let manifest = json_file(out.join("manifest.json"));
    assert_eq!(manifest["members"].as_array().unwrap().len(), 2);
    let a = read(out.join("members/member_0.tda"));
    let b = read(out.join("members/member_1.tda"));
    let m = read(out.join("manifest.json"));
    ws.ok("train", &cfg, &[]);
    assert_eq!(a, read(out.join("members/member_0.tda")));
    assert_eq!(b, read(out.join("members/member_1.tda")));
    assert_eq!(m, read(out.join("manifest.json")));
    let seeds: Vec<u64> = manifest["members"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["seed"].as_u64().unwrap())
        .collect();
    assert_ne!(seeds[0], seeds[1]);
}

#[test]
fn missing_dataset_is_a_config_error_without_outputs() {
    let ws = Workspace::new();
    let mut c = base_config();
    c["dataset"] = json!({
        "kind": "mnist",
        "train_images": "nope-images", "train_labels": "nope-labels",
        "test_images": "nope-images", "test_labels": "nope-labels"
    });
    let cfg = ws.config("run.json", &c);
    let out = ws.run("train", &cfg, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.train_images"));
    assert!(!ws.path("out").exists());
}

#[test]
fn unknown_key_reports_its_field_path() {
    let ws = Workspace::new();
    let mut c = base_config();
    c["training"]["learning_rate"] = json!(0.1);
    let cfg = ws.config("run.json", &c);
    let out = ws.run("train", &cfg, &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("training") && err.contains("learning_rate"), "{err}");
}

#[test]
fn bad_values_are_rejected_before_compute() {
    let ws = Workspace::new();
    let mut c = base_config();
    c["evaluation"]["alpha"] = json!(1.5);
    let out = ws.run("train", &ws.config("a.json", &c), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("evaluation.alpha"));

    let mut c = base_config();
    c["ensemble"]["seed"] = json!(4);
    let out = ws.run("train", &ws.config("b.json", &c), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!ws.path("out").exists());
}

#[test]
fn divergence_exits_with_numeric_code() {
    let ws = Workspace::new();
    let mut c = base_config();
    c["dataset"] = json!({
        "kind": "synthetic_classification",
        "n_train": 40, "n_test": 4, "dim": 3, "classes": 2, "separation": 50.0
    });
    c["model"] = json!({"kind": "mlp", "hidden": [16]});
    c["training"] = json!({
        "epochs": 50, "batch_size": 40, "subset_fraction": 1.0,
        "optimizer": {"kind": "sgd_momentum", "lr": 1e6, "momentum": 0.9}
    });
    let out = ws.run("train", &ws.config("run.json", &c), &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_2() {
    let out = bin().arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn attribute_naive_grad_dot_tags_the_method() {
    let ws = Workspace::new();
    let mut c = base_config();
    c["ensemble"] = json!({"strategy": "naive", "method": "grad_dot", "members": 1});
    let cfg = ws.config("run.json", &c);
    ws.ok("train", &cfg, &[]);
    ws.ok("attribute", &cfg, &[]);
    let a = attrib_ens::artifact::load_artifact(&ws.path("out/attribution.tda")).unwrap();
    let m = attrib_ens::tda::AttributionMatrix::from_artifact(&a).unwrap();
    assert_eq!(m.method, attrib_ens::tda::Method::GradDot);
    assert_eq!((m.n_train(), m.n_test()), (40, 6));
    let ledger = json_file(ws.path("out/attribution_ledger.json"));
    assert!(ledger["verification"]["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["expected"] == c["measured"]));
    let summary = String::from_utf8(read(ws.path("out/summary.txt"))).unwrap();
    assert_eq!(summary.lines().filter(|l| l.starts_with("test ")).count(), 6);
}

#[test]
fn forward_only_with_grad_cos_is_rejected() {
    let ws = Workspace::new();
    let mut c = base_config();
    c["ensemble"] = json!({"strategy": "dropout_forward_only", "method": "grad_cos", "members": 1, "masks": 2});
    let out = ws.run("attribute", &ws.config("run.json", &c), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ensemble"));
}

#[test]
fn attribute_rerun_is_byte_identical() {
    let ws = Workspace::new();
    let mut c = base_config();
    c["ensemble"] = json!({"strategy": "dropout", "method": "trak", "members": 2, "masks": 2, "trak": {"proj_dim": 16}});
    let cfg = ws.config("run.json", &c);
    ws.ok("train", &cfg, &[]);
    ws.ok("attribute", &cfg, &[]);
    let first = read(ws.path("out/attribution.tda"));
    ws.ok("attribute", &cfg, &[]);
    assert_eq!(first, read(ws.path("out/attribution.tda")));
}

#[test]
fn attribute_needs_a_matching_manifest() {
    let ws = Workspace::new();
    let cfg = ws.config("run.json", &base_config());
    let out = ws.run("attribute", &cfg, &[]);
    assert_eq!(out.status.code(), Some(2));
    ws.ok("train", &cfg, &[]);
    let mut c = base_config();
    c["training"]["epochs"] = json!(6);
    let other = ws.config("other.json", &c);
    let out = ws.run("attribute", &other, &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn lds_outputs_agree_and_ground_truth_is_reused() {
    let ws = Workspace::new();
    let cfg = ws.config("run.json", &base_config());
    ws.ok("train", &cfg, &[]);
    ws.ok("attribute", &cfg, &[]);
    let first = ws.run("lds", &cfg, &[]);
    assert!(first.status.success());
    assert!(String::from_utf8_lossy(&first.stdout).contains("ground truth: 4 retrainings"));
    let report = json_file(ws.path("out/lds.json"));
    let csv = String::from_utf8(read(ws.path("out/lds.csv"))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "test_index,lds,constant");
    assert_eq!(lines.len(), 1 + 6);
    let col: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let mean = col.iter().sum::<f64>() / col.len() as f64;
    assert!((mean - report["mean_lds"].as_f64().unwrap()).abs() < 1e-12);

    // A second strategy on the same data reuses the saved ground truth.
    let gt = ws.path("out/ground_truth.tda");
    let gt_bytes = read(&gt);
    let mut c = base_config();
    c["ensemble"] = json!({"strategy": "naive", "method": "grad_cos", "members": 2});
    c["output_dir"] = json!("out2");
    let cfg2 = ws.config("run2.json", &c);
    ws.ok("train", &cfg2, &[]);
    ws.ok("attribute", &cfg2, &[]);
    let second = ws.run("lds", &cfg2, &["--ground-truth", gt.to_str().unwrap()]);
    assert!(second.status.success());
    assert!(String::from_utf8_lossy(&second.stdout).contains("ground truth: 0 retrainings"));
    let report2 = json_file(ws.path("out2/lds.json"));
    assert_eq!(report2["ground_truth_digest"], report["ground_truth_digest"]);
    assert_eq!(gt_bytes, read(&gt));
}

#[test]
fn lds_rejects_ground_truth_from_other_data() {
    let ws = Workspace::new();
    let cfg = ws.config("run.json", &base_config());
    ws.ok("train", &cfg, &[]);
    ws.ok("attribute", &cfg, &[]);
    ws.ok("lds", &cfg, &[]);

    let mut c = base_config();
    c["dataset"]["separation"] = json!(3.0);
    c["output_dir"] = json!("other");
    let other = ws.config("other.json", &c);
    ws.ok("train", &other, &[]);
    ws.ok("attribute", &other, &[]);
    let gt = ws.path("out/ground_truth.tda");
    let out = ws.run("lds", &other, &["--ground-truth", gt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different data"));
}

#[test]
fn sweep_over_masks_keeps_parameter_count() {
    let ws = Workspace::new();
    let mut c = base_config();
    c["ensemble"] = json!({"strategy": "dropout", "method": "trak", "members": 2, "trak": {"proj_dim": 16}});
    c["sweep"] = json!({"axis": "masks", "values": [1, 3, 10]});
    let cfg = ws.config("run.json", &c);
    ws.ok("sweep", &cfg, &[]);
    let bytes = read(ws.path("out/sweep.csv"));
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header = r.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let params: Vec<&str> = rows.iter().map(|r| &r[col("param_count")]).collect();
    assert!(params.iter().all(|p| *p == params[0]));
    let ds: Vec<&str> = rows.iter().map(|r| &r[col("D")]).collect();
    assert_eq!(ds, ["1", "3", "10"]);
    assert!(rows.iter().all(|r| &r[col("status")] == "ok"));
    // Serving backward passes scale with D under vanilla dropout.
    let bwd: Vec<u64> = rows.iter().map(|r| r[col("serve_backward")].parse().unwrap()).collect();
    assert_eq!(bwd, [2 * 46, 2 * 3 * 46, 2 * 10 * 46]);

    ws.ok("sweep", &cfg, &[]);
    assert_eq!(bytes, read(ws.path("out/sweep.csv")));
}

#[test]
fn sweep_over_members_scales_serving_linearly() {
    let ws = Workspace::new();
    let mut c = base_config();
    c["sweep"] = json!({"axis": "members", "values": [1, 2]});
    let cfg = ws.config("run.json", &c);
    ws.ok("sweep", &cfg, &[]);
    let bytes = read(ws.path("out/sweep.csv"));
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header = r.headers().unwrap().clone();
    let col = header.iter().position(|h| h == "predicted_serving").unwrap();
    let s: Vec<f64> = r.records().map(|x| x.unwrap()[col].parse().unwrap()).collect();
    assert_eq!(s[1] / s[0], 2.0);
}

#[test]
fn sweep_axis_must_fit_the_strategy() {
    let ws = Workspace::new();
    let mut c = base_config();
    c["sweep"] = json!({"axis": "adapters", "values": [1, 2]});
    let out = ws.run("sweep", &ws.config("run.json", &c), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_the_file() {
    let ws = Workspace::new();
    let cfg = ws.config("run.json", &base_config());
    let alt = ws.path("alt");
    ws.ok("train", &cfg, &["--seed", "11", "--out", alt.to_str().unwrap()]);
    let manifest = json_file(alt.join("manifest.json"));
    assert_eq!(manifest["seed"], 11);
    assert!(!ws.path("out").exists());
}

#[test]
fn costs_reports_prediction_and_space() {
    let ws = Workspace::new();
    let mut c = base_config();
    c["ensemble"] = json!({"strategy": "dropout_forward_only", "method": "trak", "members": 2, "masks": 5});
    c["costs"] = json!({
        "train": 10.0, "train_base": 8.0, "train_lora": 1.0,
        "serving": 4.0, "serving_fwd_only": 1.0, "serving_lora": 2.0
    });
    ws.ok("costs", &ws.config("run.json", &c), &[]);
    let costs = json_file(ws.path("out/costs.json"));
    assert_eq!(costs["predicted"]["training"], 20.0);
    assert_eq!(costs["predicted"]["serving"], 2.0 * 4.0 + 2.0 * 4.0 * 1.0);
    assert_eq!(costs["parameters"]["total"], 2 * (4 * 8 + 8 + 8 * 3 + 3));
}

#[test]
fn oracle_writes_leave_one_out_scores() {
    let ws = Workspace::new();
    let mut c = base_config();
    c["model"] = json!({"kind": "linear"});
    let cfg = ws.config("run.json", &c);
    ws.ok("oracle", &cfg, &[]);
    let a = attrib_ens::artifact::load_artifact(&ws.path("out/oracle.tda")).unwrap();
    let m = attrib_ens::tda::AttributionMatrix::from_artifact(&a).unwrap();
    assert_eq!(m.method, attrib_ens::tda::Method::Loo);
    let ledger = json_file(ws.path("out/oracle_ledger.json"));
    assert_eq!(ledger["ledger"]["model_trainings"], 41);

    c["dataset"]["n_train"] = json!(250);
    let out = ws.run("oracle", &ws.config("big.json", &c), &[]);
    assert_eq!(out.status.code(), Some(2));
}
