use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn sep(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sep"))
        .args(args)
        .arg("--out")
        .arg(out)
        .current_dir(workspace())
        .output()
        .expect("spawn sep")
}

fn only_run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<_> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let text = fs::read_to_string(workspace().join("configs/gradcheck.json")).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    edit(&mut value);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
    path
}

#[test]
fn gradcheck_passes_on_the_toy_config() {
    let out = tempfile::tempdir().unwrap();
    let o = sep(&["gradcheck", "--config", "configs/gradcheck.json"], out.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = only_run_dir(out.path());
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("gradcheck-"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("gradcheck.json")).unwrap()).unwrap();
    assert!(report.is_object());
    let log = fs::read_to_string(run.join("log.txt")).unwrap();
    assert!(log.lines().next().unwrap().starts_with("command=gradcheck "));
    assert!(log.lines().last().unwrap().contains("status=ok"));
    assert!(run.join("config.json").exists());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |v| {
        v["loss"]["omega_x"] = 1.0.into();
    });
    let o = sep(&["gradcheck", "--config", config.to_str().unwrap()], &dir.path().join("runs"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("omega_x"));
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sep(&["synth", "--config", "no/such/file.json"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn out_of_range_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |v| {
        v["backbone"]["n_heads"] = 3.into();
    });
    let o = sep(&["gradcheck", "--config", config.to_str().unwrap()], &dir.path().join("runs"));
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn saved_prompts_only_apply_to_base_to_new() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |v| {
        v["paths"] = serde_json::json!({ "prompts": "somewhere" });
    });
    let runs = dir.path().join("runs");
    let o = sep(&["eval", "--mode", "few-shot", "--config", config.to_str().unwrap()], &runs);
    assert_eq!(o.status.code(), Some(2));
    let log = fs::read_to_string(only_run_dir(&runs).join("log.txt")).unwrap();
    assert!(log.contains("status=error"));
    assert!(log.contains("exit_code=2"));
}

#[test]
fn unknown_mode_is_rejected_by_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let o = sep(&["eval", "--mode", "sideways", "--config", "configs/gradcheck.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().exists() || fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn synth_writes_datasets_and_manifest() {
    let out = tempfile::tempdir().unwrap();
    let o = sep(&["synth", "--config", "configs/gradcheck.json"], out.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = only_run_dir(out.path());
    for name in ["benchmark.sepdata", "split.json", "datasets.json"] {
        assert!(run.join(name).exists(), "{name} missing");
    }
    let bench = sep_core::data::load_dataset(&run.join("benchmark.sepdata")).unwrap();
    assert_eq!(bench.classes().len(), 2);
}

#[test]
fn repeated_runs_get_distinct_directories() {
    let out = tempfile::tempdir().unwrap();
    for _ in 0..2 {
        assert!(sep(&["synth", "--config", "configs/gradcheck.json"], out.path()).status.success());
    }
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 2);
}
