//! Drives the installed binary end to end on the tiny phantom: config
//! generation, the guarded long-run preset, dependency errors, a full run,
//! status reporting, and store re-filtering. Checks the documented exit
//! codes (0 ok, 2 config problem, 3 stage failure).

mod common;

use common::tiny_config;
use std::process::{Command, Output};
use uwfadapt::pipeline::{PipelineConfig, ScalePreset};

fn uwfadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uwfadapt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn init_writes_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    let out = uwfadapt(&[
        "pipeline",
        "init",
        "--config",
        path.to_str().unwrap(),
        "--run",
        dir.path().join("run").to_str().unwrap(),
        "--data",
        dir.path().join("data").to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let config = PipelineConfig::load(&path).unwrap();
    assert_eq!(config.seed, 9);
    assert_eq!(config.scale, ScalePreset::Desk);
}

#[test]
fn stage_without_upstream_exits_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    tiny_config(dir.path(), 1).save(&path).unwrap();
    let out = uwfadapt(&["pipeline", "stage", "stage4_train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "stdout: {}", stdout(&out));
    assert!(stderr(&out).contains("stage1_inference"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_stage_name_exits_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    tiny_config(dir.path(), 1).save(&path).unwrap();
    let out = uwfadapt(&["pipeline", "stage", "stage9_ship", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unknown stage"));
}

#[test]
fn paper_scale_is_refused_without_consent() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), 1);
    config.scale = ScalePreset::Paper;
    let path = dir.path().join("cfg.toml");
    config.save(&path).unwrap();

    let out = uwfadapt(&["pipeline", "run", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("allow_long"), "stderr: {}", stderr(&out));
}

#[test]
fn full_run_status_and_refilter() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), 23);
    let path = dir.path().join("cfg.toml");
    config.save(&path).unwrap();

    let run = uwfadapt(&["pipeline", "run", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));
    let log = stdout(&run);
    for stage in [
        "preprocess",
        "stage1_inference",
        "stage2_gan",
        "stage3_pseudo",
        "stage4_train",
        "evaluate",
    ] {
        assert!(log.contains(&format!("{stage}: ok")), "missing {stage} in: {log}");
    }
    assert!(log.contains("baseline"), "no comparison line in: {log}");
    assert!(config.out_dir.join("experiment.json").is_file());

    let status = uwfadapt(&["pipeline", "status", "--run", config.out_dir.to_str().unwrap()]);
    assert_eq!(code(&status), 0);
    assert!(stdout(&status).contains("6 of 6 stages complete"));

    // tightening the threshold keeps a subset
    let store = config.out_dir.join("stage3_pseudo/pseudo.jsonl");
    let loose = uwfadapt(&["pseudo", "filter", "--store", store.to_str().unwrap(), "--tau", "0.0"]);
    let strict = uwfadapt(&["pseudo", "filter", "--store", store.to_str().unwrap(), "--tau", "0.99"]);
    assert_eq!(code(&loose), 0);
    assert_eq!(code(&strict), 0);
    let loose_out = stdout(&loose);
    let strict_out = stdout(&strict);
    let loose_ids: Vec<&str> = loose_out.lines().collect();
    let strict_ids: Vec<&str> = strict_out.lines().collect();
    assert!(strict_ids.len() <= loose_ids.len());
    assert!(strict_ids.iter().all(|id| loose_ids.contains(id)));
}
