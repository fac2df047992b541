use std::path::Path;
use std::process::{Command, Output};

fn stcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stcl")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_tiny(dir: &Path, mode: &str) -> String {
    let text = format!(
        r#"
schema_version = 1
seeds = [1]
mode = "{mode}"
output_dir = "{}"

[dataset.synthetic]
num_classes = 4
train_per_class = 10
test_per_class = 4
image_size = 8
holdout_styles = 4

[protocol]
num_classes = 4
increments = 1

[backbone]
widths = [4, 8, 8]

[trainer.schedule]
base_epochs = 1
incremental_epochs = 1
batch_size = 8

[style.model]
width = 8

[style.decoder]
steps = 5
batch_size = 4

[eval]
corruptions = ["contrast"]
severities = [1]

[eval.landscape]
alphas = [-0.5, 0.0, 0.5]
num_directions = 2
max_samples = 8
"#,
        dir.join("out").display()
    );
    let path = dir.join(format!("{mode}.toml"));
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_config_is_a_config_error() {
    let out = stcl(&["run", "--config", "/definitely/not/here.toml"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "schema_version = 1\nbogus_key = 3\n").unwrap();
    let out = stcl(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_mode_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path(), "standard");
    let out = stcl(&["run", "--config", &cfg, "--mode", "sideways"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn comparing_missing_runs_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = stcl(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_without_checkpoints_fails_at_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path(), "standard");
    let out = stcl(&["eval", "--config", &cfg]);
    assert_eq!(code(&out), 1);
}

#[test]
fn run_eval_landscape_and_compare_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let std_cfg = write_tiny(dir.path(), "standard");
    let deb_cfg = write_tiny(dir.path(), "debiased");

    for cfg in [&std_cfg, &deb_cfg] {
        let out = stcl(&["run", "--config", cfg]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("seed 1"));
    }
    let run = dir.path().join("out/standard/seed-1");
    for f in ["metrics.csv", "rc_cells.csv", "train_log.csv", "report.json", "landscape.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let out = stcl(&["eval", "--config", &std_cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let out = stcl(&["landscape", "--config", &std_cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("alpha"));

    let json = dir.path().join("cmp.json");
    let out = stcl(&[
        "compare",
        dir.path().join("out/standard").to_str().unwrap(),
        dir.path().join("out/debiased").to_str().unwrap(),
        "--out",
        json.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("forgetting") && table.contains("mce"), "{table}");
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(parsed["metrics"].as_array().is_some_and(|m| !m.is_empty()));
}
