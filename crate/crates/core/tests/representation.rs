use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use r3l::env::{goal_examples, observe, pose_distance, sample_random_state, EnvState, ObsMode, TaskId};
use r3l::vae::{random_state_images, VaeConfig, VaeModel};

/// Logistic regression by full-batch gradient descent on standardized
/// features; returns held-out accuracy.
fn linear_probe(train: &[(Vec<f32>, f64)], test: &[(Vec<f32>, f64)]) -> f64 {
    let d = train[0].0.len();
    let mut mean = vec![0.0f64; d];
    let mut sd = vec![0.0f64; d];
    for (x, _) in train {
        for j in 0..d {
            mean[j] += x[j] as f64 / train.len() as f64;
        }
    }
    for (x, _) in train {
        for j in 0..d {
            sd[j] += (x[j] as f64 - mean[j]).powi(2) / train.len() as f64;
        }
    }
    let z = |x: &[f32]| -> Vec<f64> { (0..d).map(|j| (x[j] as f64 - mean[j]) / sd[j].sqrt().max(1e-9)).collect() };
    let mut w = vec![0.0f64; d + 1];
    for _ in 0..3000 {
        let mut g = vec![0.0f64; d + 1];
        for (x, y) in train {
            let f = z(x);
            let logit = w[d] + (0..d).map(|j| w[j] * f[j]).sum::<f64>();
            let err = 1.0 / (1.0 + (-logit).exp()) - y;
            for j in 0..d {
                g[j] += err * f[j];
            }
            g[d] += err;
        }
        for j in 0..=d {
            w[j] -= 0.5 * g[j] / train.len() as f64;
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let f = z(x);
            let logit = w[d] + (0..d).map(|j| w[j] * f[j]).sum::<f64>();
            (logit > 0.0) == (*y > 0.5)
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn goal_latents_are_linearly_separable_from_far_states() {
    let task = TaskId::Reposition;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let config = VaeConfig {
        encoder_filters: vec![16, 16, 16],
        batch_size: 64,
        n_samples: 1024,
        epochs: 15,
        lr: 1e-3,
        ..VaeConfig::default()
    };
    let mut vae = VaeModel::new(config.clone(), &mut rng).unwrap();
    let images = random_state_images(task, config.n_samples, &mut rng);
    vae.fit(&images, config.epochs, &mut rng).unwrap();

    let goal = EnvState::goal(task);
    let mut data = Vec::new();
    for g in goal_examples(task, &goal, 150, 1.0, ObsMode::Image, &mut rng) {
        data.push((vae.encode(&g.observation).unwrap(), 1.0));
    }
    let mut far = 0;
    while far < 150 {
        let s = sample_random_state(task, &mut rng);
        if pose_distance(&s, &goal).unwrap() > 0.5 {
            data.push((vae.encode(&observe(&s, ObsMode::Image)).unwrap(), 0.0));
            far += 1;
        }
    }
    // Interleave classes, then hold out every fourth example.
    let (pos, neg) = data.split_at(150);
    let mixed: Vec<_> = pos.iter().zip(neg).flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
    let (test, train): (Vec<_>, Vec<_>) = mixed.into_iter().enumerate().partition(|(i, _)| i % 4 == 0);
    let train: Vec<_> = train.into_iter().map(|(_, x)| x).collect();
    let test: Vec<_> = test.into_iter().map(|(_, x)| x).collect();
    let acc = linear_probe(&train, &test);
    assert!(acc > 0.9, "held-out probe accuracy {acc}");
}
