use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
num_classes = 3
seed = 5

source_scenes = 6
target_scenes = 6
heldout_scenes = 2
height = 8
width = 8
raw_dim = 4
label_fraction = 0.5
target_annotation = \"point\"
point_radius = 1

embed_dim = 4
components = 2
bank_capacity = 64
bank_push_per_class = 8

iterations = 12
warmup_iters = 4
log_interval = 4
hidden_dim = 8
labeled_batch = 24
pixels_per_scene = 10
";

fn run_cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmm-adapt")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn missing_config_exits_1() {
    let out = run_cli(&["train", "--config", "missing.cfg", "--out-dir", "unused"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn malformed_config_and_bad_override_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "num_classes = \"five\"\n").unwrap();
    let out = run_cli(&["generate", "--config", path.to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run_cli(&["generate", "--set", "no_such_key=1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_error_exits_1_and_help_exits_0() {
    assert_eq!(run_cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run_cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn infeasible_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_cli(&[
        "generate",
        "--set",
        "target_annotation=point",
        "--set",
        "height=2",
        "--set",
        "width=2",
        "--set",
        "point_count=3",
        "--out",
        dir.path().join("s.ggmm").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_train_eval_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("scenes.ggmm");
    let run = dir.path().join("run");

    let out = run_cli(&["generate", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.exists());
    let sidecar = json(&dir.path().join("scenes.ggmm.json"));
    assert_eq!(sidecar["seed"], 5);

    let out = run_cli(&[
        "train",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["checkpoint.ggmk", "metrics.csv", "config.toml", "priors.json", "summary.json"] {
        assert!(run.join(file).exists(), "{file} missing");
    }
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("iter,l_ce_l,l_ce_u,l_cl,mean_alpha,mean_w,target_miou"));
    assert_eq!(csv.lines().count(), 4);
    let summary = json(&run.join("summary.json"));
    assert_eq!(summary["iterations"], 12);
    let miou = summary["heldout"]["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));

    let ck = run.join("checkpoint.ggmk");
    let out = run_cli(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "target",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(eval["split"], "target");
    assert!(eval["result"]["miou"].is_number());

    let out = run_cli(&["dump-gmm", "--checkpoint", ck.to_str().unwrap()]);
    assert!(out.status.success());
    let gmm: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(gmm["classes"].as_array().unwrap().len(), 3);

    let out = run_cli(&["dump-priors", "--run-dir", run.to_str().unwrap()]);
    assert!(out.status.success());
    let priors: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(priors["priors"].as_array().unwrap().len(), 3);
}

#[test]
fn resume_continues_to_more_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let out = run_cli(&["train", "--config", &cfg, "--out-dir", first.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run_cli(&[
        "train",
        "--config",
        &cfg,
        "--set",
        "iterations=16",
        "--out-dir",
        second.to_str().unwrap(),
        "--resume",
        first.join("checkpoint.ggmk").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&second.join("summary.json"))["iterations"], 16);
}

#[test]
fn ablate_components_prints_every_arm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let table = dir.path().join("ablation.json");
    let out = run_cli(&[
        "ablate",
        "--config",
        &cfg,
        "--sweep",
        "components",
        "--seeds",
        "1,2",
        "--out",
        table.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for arm in ["Lb", "Lb+UL", "Lb+UL+GMM-Cl"] {
        assert!(text.contains(arm), "{text}");
    }
    let results = json(&table);
    assert_eq!(results.to_string().matches("median_miou").count(), 3);
}
