use std::path::Path;
use std::process::{Command, Output};

fn sfuda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfuda")).args(args).output().expect("binary runs")
}

fn error_of(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let body = format!(
        r#"seed = 5
output_dir = "{}"

[arch]
levels = 3
base_width = 2

[source]
epochs = 1

[stage2]
epochs = 1

[data]
batch_size = 3

[data.synthetic]
n_samples = 6
image_size = 16
"#,
        dir.join("run").display()
    );
    let p = dir.join("tiny.toml");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn print_config_emits_parseable_defaults() {
    let out = sfuda(&["print-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[stage1.vote]"));
    assert!(text.contains("alpha = 0.75"));
}

#[test]
fn invalid_config_lists_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[stage1.vote]\nalpha = 1.5\n\n[stage2]\nema_rate = -1.0\n").unwrap();
    let err = error_of(&sfuda(&["print-config", "--config", p.to_str().unwrap()]));
    assert_eq!(err["error"], "invalid_fields");
    let details = err["details"].as_array().unwrap();
    assert!(details.iter().any(|d| d.as_str().unwrap().starts_with("stage1.vote.alpha")));
    assert!(details.iter().any(|d| d.as_str().unwrap().starts_with("stage2.ema_rate")));
}

#[test]
fn unavailable_device_is_a_config_error() {
    let err = error_of(&sfuda(&["print-config", "--device", "cuda"]));
    assert_eq!(err["error"], "invalid_fields");
    assert!(err["message"].as_str().unwrap().contains("device"));
}

#[test]
fn unknown_mode_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let err = error_of(&sfuda(&["adapt", "--config", cfg.to_str().unwrap(), "--mode", "stage3"]));
    assert_eq!(err["error"], "config");
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let err = error_of(&sfuda(&["adapt", "--config", cfg.to_str().unwrap(), "--checkpoint", "/nonexistent.ckpt"]));
    assert_eq!(err["error"], "io");
}

#[test]
fn full_workflow_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("run");

    let out = sfuda(&["train-source", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("source.ckpt").is_file());
    assert!(sfuda(&["train-source", "--config", cfg, "--oracle"]).status.success());

    for mode in ["stage1", "stage2", "stage1->stage2"] {
        let out = sfuda(&["adapt", "--config", cfg, "--mode", mode]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(v["target_label_reads_during_adaptation"], 0);
    }
    let ckpt = run.join("adapt/stage1-stage2/2_stage2.ckpt");
    let out = sfuda(&["evaluate", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--label", "again"]);
    assert!(out.status.success());

    assert!(run.join("reports/training/source_val.json").is_file());
    let out = sfuda(&["report", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = String::from_utf8(out.stdout).unwrap();
    for mode in ["| direct |", "| stage1 |", "| stage1->stage2 |", "| oracle |"] {
        assert!(md.contains(mode), "{md}");
    }
    assert!(run.join("reports/report.csv").is_file());
    assert!(run.join("reports/report_foreground.png").is_file());
}

#[test]
fn report_rejects_mixed_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    assert!(sfuda(&["train-source", "--config", cfg]).status.success());
    assert!(sfuda(&["adapt", "--config", cfg, "--mode", "stage1"]).status.success());
    let reports = dir.path().join("run/reports");
    std::fs::copy(reports.join("training/source_val.json"), reports.join("source_val.json")).unwrap();
    let err = error_of(&sfuda(&["report", "--config", cfg]));
    assert_eq!(err["error"], "incompatible");
}
