//! End-to-end runs of the binary on a small world.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "small"

[world]
n_prompts = 4
n_responses = 5

[sft]
n_initial = 300

[proxy]
n_golden = 80

[train]
steps = 40
batch_size = 8
eval_cadence = 10
learning_rate = 5.0

[eval]
eval_set_size = 40
cls_subsample = 40
"#;

fn goodhart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_goodhart")).args(args).output().unwrap()
}

fn printed_paths(out: &Output) -> Vec<PathBuf> {
    String::from_utf8(out.stdout.clone()).unwrap().lines().map(PathBuf::from).collect()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_world_writes_every_artifact_it_prints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out_dir = dir.path().join("world");
    let out = goodhart(&["gen-world", "--config", &cfg, "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let paths = printed_paths(&out);
    for name in ["lab.json", "golden.json", "sft.json", "proxy.json", "d_golden.jsonl", "summary.json"] {
        assert!(paths.contains(&out_dir.join(name)), "{name} missing from {paths:?}");
    }
    assert!(paths.iter().all(|p| p.exists()));
}

#[test]
fn train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let run_dir = dir.path().join("run");
    let out = goodhart(&["train", "--config", &cfg, "--out", s(&run_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tradeoff = run_dir.join("tradeoff.csv");
    assert!(printed_paths(&out).contains(&tradeoff));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "ok");

    let report = dir.path().join("report.csv");
    let out = goodhart(&["report", s(&tradeoff), "--q", "1.0", "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("method,rank,n_runs,n_points,quantile,win_rate"));
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn sweep_runs_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("learning_rate = [2.0, 5.0]\nseeds = [0, 1]\n\n{}", SMALL.replace("\n[", "\n[base.").replace("name =", "[base]\nname ="));
    let cfg = write_config(dir.path(), "sweep.toml", &text);
    let out_dir = dir.path().join("sweep");
    let out = goodhart(&["sweep", "--config", &cfg, "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = fs::read_dir(out_dir.join("runs")).unwrap().count();
    assert_eq!(runs, 4);
}

#[test]
fn tandem_check_passes_and_fails_as_expected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let ok = goodhart(&["tandem-check", "--config", &cfg, "--out", s(&dir.path().join("a"))]);
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stderr).contains("PASS max_diff=0"));
    let bad = goodhart(&["tandem-check", "--config", &cfg, "--out", s(&dir.path().join("b")), "--delete-batch", "5"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("FAIL first_divergent_step=6"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("b/tandem.json")).unwrap()).unwrap();
    assert_eq!(json["report"]["first_divergent_step"], 6);
}

#[test]
fn oracle_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = goodhart(&["oracle-check", "--out", s(dir.path()), "--instances", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(printed_paths(&out).len(), 4);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[train]\nno_such_key = 1\n");
    let out = goodhart(&["train", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    let out = goodhart(&["preset", "h9", "--out", s(dir.path())]);
    assert!(!out.status.success());
    let out = goodhart(&["report", s(&dir.path().join("missing.csv")), "--out", s(&dir.path().join("r.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

fn repo_config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).display().to_string()
}

#[test]
fn shipped_configs_parse_and_the_fast_preset_runs() {
    let spec = goodhart::harness::ExperimentSpec::load(Path::new(&repo_config("default.toml"))).unwrap();
    assert_eq!(spec, goodhart::harness::ExperimentSpec::default());
    goodhart::harness::ExperimentSpec::load(Path::new(&repo_config("offline_golden.toml"))).unwrap();
    let sweep = goodhart::harness::SweepSpec::load(Path::new(&repo_config("sweep.toml"))).unwrap();
    assert_eq!(sweep.points().len(), 18);

    let dir = tempfile::tempdir().unwrap();
    let out = goodhart(&["preset", "h1", "--config", &repo_config("fast_preset.toml"), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(printed_paths(&out).contains(&dir.path().join("fig3_tradeoff.csv")));
    let out = goodhart(&["ablate", "--config", &repo_config("fast_preset.toml"), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("fig11_ablation.csv").exists());
}
