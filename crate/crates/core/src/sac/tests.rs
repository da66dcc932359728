use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorcore::{check_gradients, GradCheckOptions, Params};

use super::*;
use crate::env::{env_step, observe, sample_random_state, EnvState, ObsMode, TaskId};

fn frame(state: EnvState) -> Arc<Frame> {
    Arc::new(Frame {
        state,
        observation: observe(&state, ObsMode::State),
        latent: None,
    })
}

fn small_config() -> SacConfig {
    SacConfig {
        hidden: vec![32, 32],
        batch_size: 32,
        ..SacConfig::default()
    }
}

fn valve_agent(seed: u64, cfg: SacConfig) -> SacAgent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SacAgent::new(cfg, InputKind::State, 2, 2, &mut rng).unwrap()
}

fn valve_buffer(n: usize, seed: u64) -> ReplayBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = ReplayBuffer::new(10_000);
    let mut s = sample_random_state(TaskId::Valve, &mut rng);
    let mut cur = frame(s);
    for t in 0..n {
        let a: Vec<f32> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        s = env_step(&s, &a);
        let next = frame(s);
        buf.push(Transition {
            obs: cur,
            action: a,
            next_obs: next.clone(),
            step_index: t as u64,
        });
        cur = next;
    }
    buf
}

#[test]
fn log_prob_at_zero_is_standard_normal_density() {
    let lp = tanh_gaussian_log_prob(&[0.0], &[0.0], &[0.0]);
    assert!((lp + 0.91894).abs() < 1e-5);
}

#[test]
fn log_prob_includes_squash_correction() {
    let lp = tanh_gaussian_log_prob(&[0.0], &[0.0], &[1.0]);
    let oracle = -0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln() - (1.0 - 1f64.tanh().powi(2) + 1e-6).ln();
    assert!((lp - oracle).abs() < 1e-6);
    assert!((lp + 0.55138).abs() < 1e-5);
}

#[test]
fn sampled_log_probs_match_density_formula() {
    let agent = valve_agent(1, small_config());
    let buf = valve_buffer(16, 2);
    let frames: Vec<&Frame> = buf.iter().map(|t| &*t.obs).collect();
    let input = assemble(&frames, InputKind::State).unwrap();
    let heads = agent.actor_heads(&input).unwrap();
    let (acts, lps) = agent
        .sample_actions(&input, &mut ChaCha8Rng::seed_from_u64(5), false)
        .unwrap();
    for i in 0..frames.len() {
        let row = heads.row(i);
        let a = acts.row(i);
        let u: Vec<f32> = a.iter().map(|v| v.atanh()).collect();
        let ls: Vec<f32> = row[2..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        let oracle = tanh_gaussian_log_prob(&row[..2], &ls, &u);
        assert!((lps[i] as f64 - oracle).abs() < 1e-3, "{} vs {oracle}", lps[i]);
    }
}

#[test]
fn critic_target_examples() {
    assert_eq!(critic_target(&[0.7], &[-3.0], &[5.0], 0.0, 0.2), vec![0.7]);
    assert!((critic_target(&[0.0], &[0.0], &[1.0], 0.99, 0.0)[0] - 0.99).abs() < 1e-6);
    assert!((critic_target(&[0.0], &[-1.0], &[2.0], 0.5, 0.2)[0] - 1.1).abs() < 1e-6);
}

#[test]
fn polyak_examples() {
    let mk = |v: f32| {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::filled(vec![3], v)).unwrap();
        p
    };
    let online = mk(1.0);
    let mut t = mk(0.0);
    polyak_update(&mut t, &online, 1.0).unwrap();
    assert_eq!(t, online);
    let mut t = mk(0.0);
    polyak_update(&mut t, &online, 0.0).unwrap();
    assert_eq!(t.get("w").unwrap().data(), &[0.0; 3]);
    let mut t = mk(0.0);
    polyak_update(&mut t, &online, 0.005).unwrap();
    assert!(t.get("w").unwrap().data().iter().all(|v| (v - 0.005).abs() < 1e-9));
    let mut other = ParamSet::new();
    other.insert("w", Tensor::filled(vec![2], 1.0)).unwrap();
    assert!(polyak_update(&mut t, &other, 0.5).is_err());
}

#[test]
fn targets_start_as_copies() {
    let agent = valve_agent(3, small_config());
    assert_eq!(agent.params.target1, agent.params.critic1);
    assert_eq!(agent.params.target2, agent.params.critic2);
    assert_ne!(agent.params.critic1, agent.params.critic2);
}

#[test]
fn zero_reward_targets_are_discounted_soft_values() {
    let agent = valve_agent(4, small_config());
    let buf = valve_buffer(32, 5);
    let next: Vec<&Frame> = buf.iter().map(|t| &*t.next_obs).collect();
    let input = assemble(&next, InputKind::State).unwrap();
    let y = agent
        .compute_targets(&input, &vec![0.0; 32], &mut ChaCha8Rng::seed_from_u64(9))
        .unwrap();
    let (a, lp) = agent
        .sample_actions(&input, &mut ChaCha8Rng::seed_from_u64(9), false)
        .unwrap();
    let q1 = agent.q_values(&agent.params.target1, &input, &a).unwrap();
    let q2 = agent.q_values(&agent.params.target2, &input, &a).unwrap();
    let alpha = agent.alpha();
    for i in 0..32 {
        let expect = 0.99 * (q1[i].min(q2[i]) - alpha * lp[i]);
        assert!((y[i] - expect).abs() < 1e-6);
    }
}

#[test]
fn updates_are_deterministic() {
    let buf = valve_buffer(200, 6);
    let run = || {
        let mut agent = valve_agent(7, small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut zero = |f: &[&Frame]| Ok(vec![0.5; f.len()]);
        (0..5)
            .map(|_| agent.update_step(&buf, &mut zero, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(format!("{x:?}"), format!("{y:?}"));
    }
}

#[test]
fn deterministic_sampling_repeats() {
    let agent = valve_agent(10, small_config());
    let f = frame(EnvState::with_valve(0.3));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, _) = agent.sample_action(&f, &mut rng, true).unwrap();
    for _ in 0..5 {
        assert_eq!(agent.sample_action(&f, &mut rng, true).unwrap().0, a);
    }
}

#[test]
fn critic_loss_falls_on_a_fixed_batch() {
    let mut agent = valve_agent(11, small_config());
    let buf = valve_buffer(32, 12);
    let obs: Vec<&Frame> = buf.iter().map(|t| &*t.obs).collect();
    let next: Vec<&Frame> = buf.iter().map(|t| &*t.next_obs).collect();
    let oi = assemble(&obs, InputKind::State).unwrap();
    let ni = assemble(&next, InputKind::State).unwrap();
    let acts: Vec<f32> = buf.iter().flat_map(|t| t.action.clone()).collect();
    let acts = Tensor::new(vec![32, 2], acts).unwrap();
    let rewards: Vec<f32> = (0..32).map(|i| (i % 3) as f32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let losses: Vec<f32> = (0..100)
        .map(|_| agent.update_on_batch(&oi, &acts, &ni, &rewards, &mut rng).unwrap().critic1)
        .collect();
    assert!(losses[99] < losses[0], "{} -> {}", losses[0], losses[99]);
}

#[test]
fn temperature_stays_positive_and_moves_toward_target_entropy() {
    let mut agent = valve_agent(14, small_config());
    let buf = valve_buffer(100, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a0 = agent.alpha();
    let mut zero = |f: &[&Frame]| Ok(vec![0.0; f.len()]);
    let mut last = None;
    for _ in 0..20 {
        last = Some(agent.update_step(&buf, &mut zero, &mut rng).unwrap());
        assert!(agent.alpha() > 0.0);
    }
    // A fresh policy is near-uniform, so its entropy exceeds -dim(A) and the
    // temperature decreases.
    assert!(last.unwrap().entropy > agent.target_entropy());
    assert!(agent.alpha() < a0);
}

#[test]
fn update_rejects_small_buffer() {
    let mut agent = valve_agent(1, small_config());
    let buf = valve_buffer(5, 1);
    let mut zero = |f: &[&Frame]| Ok(vec![0.0; f.len()]);
    assert!(agent
        .update_step(&buf, &mut zero, &mut ChaCha8Rng::seed_from_u64(0))
        .is_err());
}

#[test]
fn non_finite_reward_aborts() {
    let mut agent = valve_agent(1, small_config());
    let buf = valve_buffer(64, 1);
    let mut bad = |f: &[&Frame]| Ok(vec![f32::NAN; f.len()]);
    let err = agent
        .update_step(&buf, &mut bad, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn actor_gradient_matches_finite_differences() {
    let agent = valve_agent(21, SacConfig {
        hidden: vec![12],
        ..small_config()
    });
    let buf = valve_buffer(8, 22);
    let obs: Vec<&Frame> = buf.iter().map(|t| &*t.obs).collect();
    let input = assemble(&obs, InputKind::State).unwrap();
    let alpha = 0.3;
    let g = agent
        .actor_gradient(&input, alpha, &mut ChaCha8Rng::seed_from_u64(23))
        .unwrap();
    let (actor_net, critic_net) = agent.networks();
    let x: Tensor<f64> = input.vector.cast();
    let c1: Params<f64> = agent.params.critic1.cast();
    let c2: Params<f64> = agent.params.critic2.cast();
    let eps: Vec<f64> = g.eps.iter().map(|&e| e as f64).collect();
    let b = 8;
    let loss = |p: &Params<f64>| -> std::result::Result<(f64, u64), tensorcore::TensorError> {
        let (out, cache) = actor_net.forward(p, None, &x)?;
        let mut acts = Vec::new();
        let mut lps = Vec::new();
        for i in 0..b {
            let row = out.row(i);
            let mut lp = 0.0;
            for j in 0..2 {
                let ls = row[2 + j].clamp(LOG_STD_MIN as f64, LOG_STD_MAX as f64);
                let e = eps[i * 2 + j];
                let u = row[j] + ls.exp() * e;
                let a = u.tanh();
                lp += -0.5 * e * e - ls - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    - (1.0 - a * a + SQUASH_EPS as f64).ln();
                acts.push(a);
            }
            lps.push(lp);
        }
        let acts = Tensor::new(vec![b, 2], acts)?;
        let v = Tensor::concat_cols(&x, &acts)?;
        let (q1, k1) = critic_net.forward(&c1, None, &v)?;
        let (q2, k2) = critic_net.forward(&c2, None, &v)?;
        let mut total = 0.0;
        for i in 0..b {
            total += (alpha as f64 * lps[i] - q1.data()[i].min(q2.data()[i])) / b as f64;
        }
        let which: u64 = (0..b).map(|i| ((q1.data()[i] <= q2.data()[i]) as u64) << i).sum();
        Ok((total, cache.kink_signature() ^ k1.kink_signature().rotate_left(7) ^ k2.kink_signature().rotate_left(13) ^ which))
    };
    let report = check_gradients(
        &agent.params.actor.cast(),
        &g.grads.cast(),
        loss,
        &GradCheckOptions {
            floor: 1e-4,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.checked > 50);
    // Analytic gradients are accumulated in single precision.
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn buffer_evicts_oldest_first() {
    let mut buf = ReplayBuffer::new(3);
    let f = frame(EnvState::with_valve(0.0));
    for i in 0..5u64 {
        buf.push(Transition {
            obs: f.clone(),
            action: vec![0.0, 0.0],
            next_obs: f.clone(),
            step_index: i,
        });
    }
    assert_eq!(buf.len(), 3);
    assert_eq!(buf.inserted(), 5);
    let order: Vec<u64> = buf.iter().map(|t| t.step_index).collect();
    assert_eq!(order, vec![2, 3, 4]);
}

#[test]
fn reward_function_never_touches_stored_bytes() {
    let buf = valve_buffer(300, 30);
    let before = buf.digest();
    let mut agent = valve_agent(31, small_config());
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut r1 = |f: &[&Frame]| Ok(f.iter().map(|x| x.observation.state_vec[0]).collect());
    let a = agent.update_step(&buf, &mut r1, &mut rng).unwrap();
    let mut agent = valve_agent(31, small_config());
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut r2 = |f: &[&Frame]| Ok(vec![3.0; f.len()]);
    let b = agent.update_step(&buf, &mut r2, &mut rng).unwrap();
    assert_ne!(a.mean_reward, b.mean_reward);
    assert_eq!(buf.digest(), before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn actions_lie_strictly_inside_the_box(seed in any::<u64>(), scale in 0.0f32..1000.0) {
        let agent = valve_agent(seed, small_config());
        let x = Tensor::new(vec![4, 2], vec![scale, -scale, 0.0, 1.0, -scale, scale, scale, scale]).unwrap();
        let input = NetInput { image: None, vector: x };
        let (a, lp) = agent.sample_actions(&input, &mut ChaCha8Rng::seed_from_u64(seed), false).unwrap();
        prop_assert!(a.data().iter().all(|v| v.abs() < 1.0));
        prop_assert!(lp.iter().all(|v| v.is_finite()));
    }
}
