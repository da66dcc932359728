mod common;

use std::sync::Arc;

use common::{tiny, tiny_r3l_state};
use r3l::config::{Resets, RewardMode, RunConfig, Variant};
use r3l::env::{pose_distance, EnvState, ObsMode, TaskId};
use r3l::harness::checkpoint::{restore, snapshot, Checkpoint};
use r3l::harness::pipeline::pretrain_vae;
use r3l::training::{combined_reward, continuity_breaks, run_reset_controller, run_training, select_policy, Trainer};
use r3l::Error;

#[test]
fn first_epoch_perturbs_and_parity_alternates() {
    assert_eq!(select_policy(1), 1);
    assert_eq!(select_policy(2), 0);
    let n = 7;
    assert_eq!(select_policy(2 * n), 0);
    let forward = (1..=2 * n).filter(|&i| select_policy(i) == 0).count();
    assert_eq!(forward, n);
}

#[test]
fn combined_reward_examples() {
    assert!((combined_reward(0, 2.0, 0.5, 1.0, 1.0) - 2.5).abs() < 1e-6);
    assert!((combined_reward(1, 2.0, 0.5, 1.0, 1.0) - 0.5).abs() < 1e-6);
    assert_eq!(combined_reward(0, 2.0, 0.5, 0.0, 1.0), combined_reward(1, 2.0, 0.5, 0.0, 1.0));
}

#[test]
fn zero_epochs_only_collects_exploration_data() {
    let mut c = tiny_r3l_state();
    c.loop_.epochs = 0;
    c.loop_.initial_exploration = RunConfig::default().loop_.initial_exploration;
    let t = run_training(c, None).unwrap();
    assert_eq!(t.buffer.len(), 1000);
    assert_eq!(t.env_steps, 1000);
    assert_eq!(t.grad_steps, 0);
    assert!(t.policies.iter().all(|a| a.updates() == 0));
    assert!(t.rows.is_empty());
}

#[test]
fn exploration_hands_over_its_last_state_and_is_reproducible() {
    let a = Trainer::new(tiny_r3l_state(), None, None).unwrap();
    let b = Trainer::new(tiny_r3l_state(), None, None).unwrap();
    assert_eq!(a.buffer.len(), 40);
    let newest = a.buffer.iter().last().unwrap();
    assert_eq!(newest.next_obs.state, a.state);
    assert_eq!(a.current.state, a.state);
    assert_eq!(a.buffer.digest(), b.buffer.digest());
}

#[test]
fn vice_only_never_builds_a_perturbation_agent() {
    let c = tiny(TaskId::Reposition, Variant::ViceOnly, ObsMode::State, RewardMode::Vice, Resets::Free);
    let t = run_training(c, None).unwrap();
    assert_eq!(t.policies.len(), 1);
    assert!(t.rnd.is_none());
    assert_eq!(t.policy_epochs, vec![6]);
    assert!(t
        .rows
        .iter()
        .filter(|r| r.metric == "policy")
        .all(|r| r.value == 0.0));
}

#[test]
fn r3l_splits_epochs_evenly_starting_with_the_perturbation_policy() {
    let t = run_training(tiny_r3l_state(), None).unwrap();
    assert_eq!(t.policy_epochs, vec![3, 3]);
    let first = t.rows.iter().find(|r| r.metric == "policy").unwrap();
    assert_eq!((first.epoch, first.value), (1, 1.0));
}

#[test]
fn reset_free_runs_are_continuous_across_epoch_boundaries() {
    let mut c = tiny_r3l_state();
    c.loop_.keep_transition_log = true;
    let t = run_training(c, None).unwrap();
    assert_eq!(t.transition_log.len() as u64, t.env_steps);
    assert!(continuity_breaks(&t.transition_log).is_empty());
    assert_eq!(t.hidden_resets, 0);
    let steps: Vec<u64> = t.buffer.iter().map(|tr| tr.step_index).collect();
    assert_eq!(steps, (0..t.env_steps).collect::<Vec<_>>());
    let items: Vec<_> = t.buffer.iter().collect();
    for w in items.windows(2) {
        assert_eq!(w[0].next_obs.state, w[1].obs.state);
    }
}

#[test]
fn episodic_runs_restart_every_horizon() {
    let mut c = tiny(TaskId::Valve, Variant::ViceOnly, ObsMode::State, RewardMode::True, Resets::Episodic);
    c.loop_.keep_transition_log = true;
    let t = run_training(c, None).unwrap();
    let breaks = continuity_breaks(&t.transition_log);
    assert!(!breaks.is_empty());
    assert!(breaks.iter().all(|&i| i % 10 == 0), "{breaks:?}");
}

#[test]
fn gradient_steps_stay_within_budget() {
    for per_step in [1, 2] {
        let mut c = tiny_r3l_state();
        c.loop_.train_steps_per_env_step = per_step;
        let t = run_training(c, None).unwrap();
        assert!(t.grad_steps <= per_step as u64 * t.env_steps);
        assert_eq!(t.grad_steps, t.policies.iter().map(|a| a.updates()).sum::<u64>());
        assert_eq!(t.grad_steps, per_step as u64 * 60);
    }
    let mut c = tiny_r3l_state();
    c.loop_.train_steps_per_env_step = 3;
    assert!(matches!(Trainer::new(c, None, None), Err(Error::Config(_))));
}

#[test]
fn perturbation_rewards_never_query_the_classifier() {
    let t = run_training(tiny_r3l_state(), None).unwrap();
    let c = t.counters;
    assert_eq!(c.vice_for_perturbation, 0);
    assert!(c.rnd_for_perturbation > 0);
    assert!(c.vice_for_task > 0);
    assert_eq!(c.vice_for_task, c.rnd_for_task);
    assert_eq!(c.vice_for_task + c.rnd_for_perturbation, t.grad_steps);
}

#[test]
fn only_the_active_policy_is_updated() {
    let mut t = Trainer::new(tiny_r3l_state(), None, None).unwrap();
    let forward_before = t.policies[0].params.actor.clone();
    t.run_epoch().unwrap();
    assert_eq!(t.policies[0].params.actor, forward_before);
    assert_eq!(t.policies[0].updates(), 0);
    assert_eq!(t.policies[1].updates(), 10);
    let perturb_before = t.policies[1].params.actor.clone();
    t.run_epoch().unwrap();
    assert_eq!(t.policies[1].params.actor, perturb_before);
    assert_eq!(t.policies[0].updates(), 10);
}

#[test]
fn true_reward_mode_skips_the_classifier() {
    let c = tiny(TaskId::Valve, Variant::R3l, ObsMode::State, RewardMode::True, Resets::Free);
    let t = run_training(c, None).unwrap();
    assert!(t.classifiers.is_empty());
    assert_eq!(t.counters.vice_for_task, 0);
    assert!(t.counters.true_reward > 0);
}

#[test]
fn forward_checkpoints_every_k_epochs() {
    let t = run_training(tiny_r3l_state(), None).unwrap();
    let epochs: Vec<usize> = t.checkpoints.iter().map(|c| c.epoch).collect();
    assert_eq!(epochs, vec![2, 4, 6]);
    assert_eq!(t.checkpoints.last().unwrap().actor, t.policies[0].params.actor);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let a = run_training(tiny_r3l_state(), None).unwrap();
    let b = run_training(tiny_r3l_state(), None).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.buffer.digest(), b.buffer.digest());
    let mut c = tiny_r3l_state();
    c.loop_.seed = 1;
    let other = run_training(c, None).unwrap();
    assert_ne!(a.buffer.digest(), other.buffer.digest());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let full = run_training(tiny_r3l_state(), None).unwrap();
    let mut part = Trainer::new(tiny_r3l_state(), None, None).unwrap();
    for _ in 0..3 {
        part.run_epoch().unwrap();
    }
    let bytes = snapshot(&part).unwrap().to_bytes();
    drop(part);
    let mut resumed = restore(&Checkpoint::from_bytes(&bytes).unwrap(), None).unwrap();
    resumed.run(|_| true).unwrap();
    assert_eq!(resumed.rows, full.rows);
    assert_eq!(resumed.buffer.digest(), full.buffer.digest());
    assert_eq!(resumed.policies[0].params.actor, full.policies[0].params.actor);
    assert_eq!(snapshot(&resumed).unwrap().to_bytes(), snapshot(&full).unwrap().to_bytes());
}

#[test]
fn snapshot_restore_snapshot_is_bit_exact() {
    let mut t = Trainer::new(tiny_r3l_state(), None, None).unwrap();
    t.run_epoch().unwrap();
    t.run_epoch().unwrap();
    let first = snapshot(&t).unwrap().to_bytes();
    let again = snapshot(&restore(&Checkpoint::from_bytes(&first).unwrap(), None).unwrap())
        .unwrap()
        .to_bytes();
    assert_eq!(first, again);
}

#[test]
fn resume_with_a_different_config_warns() {
    let t = Trainer::new(tiny_r3l_state(), None, None).unwrap();
    let ck = snapshot(&t).unwrap();
    let mut other = tiny_r3l_state();
    other.loop_.c_rnd = 0.5;
    let resumed = restore(&ck, Some(&other)).unwrap();
    assert!(resumed.warnings.iter().any(|w| w.contains("differs")));
    assert_eq!(resumed.config, tiny_r3l_state());
}

#[test]
fn exploding_updates_abort_with_a_numeric_error_and_keep_rows() {
    let mut c = tiny_r3l_state();
    c.sac.lr = 1e30;
    c.loop_.epochs = 20;
    let mut t = Trainer::new(c, None, None).unwrap();
    let err = t.run(|_| true).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(t.epoch < 40);
}

fn reset_controller(states: Vec<[f64; 3]>) -> RunConfig {
    let mut c = tiny(
        TaskId::Reposition,
        Variant::ResetController,
        ObsMode::State,
        RewardMode::Vice,
        Resets::Free,
    );
    c.loop_.reset_states = Some(states);
    c
}

#[test]
fn reset_controller_builds_one_policy_and_classifier_per_state() {
    let goal = [0.0, 0.0, -std::f64::consts::FRAC_PI_2];
    let other = [0.0, 0.0, -std::f64::consts::FRAC_PI_6];
    let t = run_reset_controller(reset_controller(vec![goal, other]), None).unwrap();
    assert_eq!(t.policies.len(), 2);
    assert_eq!(t.classifiers.len(), 2);
    assert_eq!(t.pools.len(), 2);
    assert!(t.rnd.is_none());
    assert_eq!(t.counters.rnd_for_task + t.counters.rnd_for_perturbation, 0);
    let target = EnvState::with_pose(other[0], other[1], other[2]);
    for f in t.pools[1].frames() {
        assert!(pose_distance(&f.state, &target).unwrap() < 0.15);
    }
    for f in t.pools[0].frames() {
        assert!(pose_distance(&f.state, &EnvState::goal(TaskId::Reposition)).unwrap() < 0.15);
    }
    assert_eq!(t.policy_epochs, vec![3, 3]);
    assert!(t.warnings.is_empty());
}

#[test]
fn identical_reset_states_warn() {
    let goal = [0.0, 0.0, -std::f64::consts::FRAC_PI_2];
    let t = Trainer::new(reset_controller(vec![goal, goal]), None, None).unwrap();
    assert!(!t.warnings.is_empty());
}

#[test]
fn reset_controller_rejects_bad_schedules() {
    let goal = [0.0, 0.0, -std::f64::consts::FRAC_PI_2];
    for states in [vec![goal], vec![[0.05, 0.05, 0.0], goal]] {
        let err = Trainer::new(reset_controller(states), None, None).err().unwrap();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
    let mut c = reset_controller(vec![goal, [0.0, 0.0, 0.0]]);
    c.loop_.reset_states = None;
    assert!(matches!(Trainer::new(c, None, None), Err(Error::Config(_))));
}

#[test]
fn latent_variants_require_a_frozen_encoder() {
    let c = tiny(TaskId::Reposition, Variant::R3l, ObsMode::Image, RewardMode::Vice, Resets::Free);
    assert!(matches!(Trainer::new(c.clone(), None, None), Err(Error::Config(_))));
    let unfrozen = r3l::vae::VaeModel::new(c.vae.clone(), &mut r3l::training::stream_rng(0, 9)).unwrap();
    assert!(matches!(
        Trainer::new(c, Some(Arc::new(unfrozen)), None),
        Err(Error::Config(_))
    ));
}

#[test]
fn encoder_stays_frozen_through_an_image_run() {
    let mut c = tiny(TaskId::Reposition, Variant::R3l, ObsMode::Image, RewardMode::Vice, Resets::Free);
    c.loop_.epochs = 1;
    let vae = Arc::new(pretrain_vae(&c).unwrap());
    let before = vae.encoder_digest();
    let t = run_training(c, Some(vae)).unwrap();
    assert_eq!(t.vae.as_ref().unwrap().encoder_digest(), before);
    let latent = t.current.latent.as_ref().unwrap();
    assert_eq!(latent.len(), 4);
    assert_eq!(t.hidden_resets, 0);
}

#[test]
fn pixel_variant_runs_without_an_encoder() {
    let mut c = tiny(TaskId::Beads, Variant::R3lNoVae, ObsMode::Image, RewardMode::Vice, Resets::Free);
    c.loop_.epochs = 1;
    let t = run_training(c, None).unwrap();
    assert!(t.vae.is_none());
    assert!(t.current.latent.is_none());
    assert_eq!(t.policy_epochs, vec![1, 1]);
}
