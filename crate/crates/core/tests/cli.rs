mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{tiny, tiny_r3l_state};
use r3l::config::{Resets, RewardMode, RunConfig, Variant};
use r3l::env::{ObsMode, TaskId};
use r3l::harness::checkpoint::Checkpoint;

fn r3l(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_r3l"));
    cmd.args(args).env_remove("R3L_SEED");
    if let Some(s) = seed {
        cmd.env("R3L_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, c: &RunConfig) -> String {
    let p = dir.join(name);
    std::fs::write(&p, c.to_json()).unwrap();
    p.to_str().unwrap().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"loop": {"horizon": 0}}"#).unwrap();
    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"sac": {"learning_rate": 1}}"#).unwrap();
    for p in [&bad, &unknown, &dir.path().join("missing.json")] {
        let o = r3l(&["train", "--config", p.to_str().unwrap()], None);
        assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let good = write_config(dir.path(), "good.json", &tiny_r3l_state());
    let o = r3l(&["train", "--config", &good], Some("not-a-number"));
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_resume_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.json", &tiny_r3l_state());
    let out_s = out.to_str().unwrap();
    let o = r3l(&["train", "--config", &cfg, "--out", out_s], Some("5"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "run.r3l", "policy_000002.r3l", "policy_000006.r3l", "eval.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(out.join("reposition_R3L_train_metric.svg").exists());
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("task,variant,seed,epoch,env_steps,metric,value\n"));
    assert!(csv.lines().skip(1).all(|l| l.starts_with("reposition,R3L,5,")));

    let o = r3l(&["eval", "--checkpoint", out.join("policy_000006.r3l").to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("successes"));
    let o = r3l(&["eval", "--checkpoint", out.join("run.r3l").to_str().unwrap(), "--rollout", "5"], None);
    assert_eq!(code(&o), 0);

    let replot = dir.path().join("replot");
    let o = r3l(
        &["plot", "--metrics", out.join("metrics.csv").to_str().unwrap(), "--out", replot.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(replot.join("metrics.csv")).unwrap(), csv.as_bytes());

    // Resuming a finished run re-emits the same outputs.
    let o = r3l(
        &["train", "--config", &cfg, "--out", out_s, "--resume", out.join("run.r3l").to_str().unwrap()],
        Some("5"),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap(), csv);
}

#[test]
fn numeric_blowup_exits_with_three_and_keeps_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_r3l_state();
    c.sac.lr = 1e30;
    c.loop_.epochs = 20;
    let cfg = write_config(dir.path(), "c.json", &c);
    let out = dir.path().join("run");
    let o = r3l(&["train", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("run_partial.r3l").exists());
}

#[test]
fn collected_goals_and_pretrained_vae_feed_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(TaskId::Valve, Variant::R3l, ObsMode::Image, RewardMode::Vice, Resets::Free);
    c.loop_.epochs = 1;
    let cfg = write_config(dir.path(), "c.json", &c);
    let goals = dir.path().join("goals");
    let vae = dir.path().join("vae.r3l");
    let o = r3l(&["collect-goals", "--config", &cfg, "--out", goals.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(goals.join("manifest.csv").exists());
    let o = r3l(&["pretrain-vae", "--config", &cfg, "--out", vae.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(Checkpoint::load(&vae).unwrap().tag, "vae");

    c.harness.goal_pool_dir = Some(goals);
    c.harness.vae_checkpoint = Some(vae);
    let cfg = write_config(dir.path(), "c2.json", &c);
    let out = dir.path().join("run");
    let o = r3l(&["train", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("vae.r3l").exists());
}

#[test]
fn reset_controller_goals_are_collected_per_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(TaskId::Reposition, Variant::ResetController, ObsMode::State, RewardMode::Vice, Resets::Free);
    c.loop_.reset_states = Some(vec![[0.0, 0.0, -std::f64::consts::FRAC_PI_2], [0.05, 0.05, 0.0]]);
    let cfg = write_config(dir.path(), "c.json", &c);
    let goals = dir.path().join("goals");
    let o = r3l(&["collect-goals", "--config", &cfg, "--out", goals.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(goals.join("state_0/manifest.csv").exists());
    assert!(goals.join("state_1/manifest.csv").exists());
}

#[test]
fn gap_and_matrix_commands_print_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(TaskId::Reposition, Variant::ViceOnly, ObsMode::State, RewardMode::Vice, Resets::Free);
    c.harness.matrix_step_cap = 60;
    c.harness.matrix_seeds = 1;
    c.harness.out_dir = Some(dir.path().join("out"));
    let cfg = write_config(dir.path(), "c.json", &c);
    let o = r3l(&["gap", "--config", &cfg], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("variant,seed,env_steps,train_pose_distance,eval_pose_distance\nVICE_Only,0,"));
    let o = r3l(&["matrix", "--config", &cfg], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 9);
    assert!(dir.path().join("out/matrix.csv").exists());
}
