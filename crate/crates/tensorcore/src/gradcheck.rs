//! Central finite-difference verification of analytic gradients.
//!
//! Checks run in `f64` so rounding noise stays far below the tolerance.
//! Coordinates whose ±h perturbation flips a ReLU sign or a pooling winner are
//! skipped: the function is not differentiable across such a kink.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::{Network, ParamSet, Params, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to truncation error compare in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-3,
            max_coords_per_tensor: None,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares `analytic` against central differences of `f`, which returns the
/// scalar value and a kink signature of the evaluation.
pub fn check_gradients<F>(
    params: &Params<f64>,
    analytic: &Params<f64>,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&Params<f64>) -> Result<(f64, u64), TensorError>,
{
    if !(1e-5..=1e-2).contains(&opts.h) {
        return Err(TensorError::InvalidSpec(format!("step h = {} outside [1e-5, 1e-2]", opts.h)));
    }
    params.check_same_layout(analytic)?;
    let (_, base_sig) = f(params)?;
    let mut rng = StdRng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.require(&name)?.len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        let grad = analytic.require(&name)?.data().to_vec();
        for idx in coords {
            let orig = params.require(&name)?.data()[idx];
            work.get_mut(&name).expect("same layout").data_mut()[idx] = orig + opts.h;
            let (fp, sp) = f(&work)?;
            work.get_mut(&name).expect("same layout").data_mut()[idx] = orig - opts.h;
            let (fm, sm) = f(&work)?;
            work.get_mut(&name).expect("same layout").data_mut()[idx] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = grad[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                if rel >= report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((name.clone(), idx));
                }
            }
        }
    }
    Ok(report)
}

/// Gradient check of a whole network through the scalar head
/// `Σ output ⊙ probe` with a fixed pseudo-random probe.
pub fn grad_check(
    net: &Network,
    params: &ParamSet,
    input: &Tensor<f32>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError> {
    let p64: Params<f64> = params.cast();
    let x64: Tensor<f64> = input.cast();
    let (y, cache) = net.forward(&p64, &x64)?;
    let mut rng = StdRng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let probe = Tensor::new(
        y.shape().to_vec(),
        (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let (analytic, _) = net.backward(&p64, &cache, &probe)?;
    check_gradients(
        &p64,
        &analytic,
        |p| {
            let (y, c) = net.forward(p, &x64)?;
            let v = y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
            Ok((v, c.kink_signature()))
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::LayerSpec;

    #[test]
    fn quadratic_toy_is_near_exact() {
        // f(w) = Σ w_i^2 has exact central differences up to rounding
        let mut p = Params::<f64>::new();
        p.insert("w", Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
        let mut g = Params::<f64>::new();
        g.insert("w", Tensor::new(vec![3], vec![0.6, -2.4, 4.0]).unwrap()).unwrap();
        let r = check_gradients(
            &p,
            &g,
            |p| Ok((p.get("w").unwrap().data().iter().map(|v| v * v).sum(), 0)),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut p = Params::<f64>::new();
        p.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut g = Params::<f64>::new();
        g.insert("w", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        let r = check_gradients(&p, &g, |p| Ok((p.get("w").unwrap().data()[0].powi(2), 0)), &GradCheckOptions::default())
            .unwrap();
        assert!(r.max_rel_error > 0.3);
    }

    #[test]
    fn relu_at_exact_zero_is_excluded() {
        // weight 0 and bias 0 put the ReLU input exactly at the kink
        let net = Network::new(&[1], vec![LayerSpec::dense(1), LayerSpec::Relu]).unwrap();
        let mut p = ParamSet::new();
        p.insert("0.weight", Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        p.insert("0.bias", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let r = grad_check(&net, &p, &x, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.checked, 0);
        assert_eq!(r.skipped_kinks, 2);
    }

    #[test]
    fn step_size_out_of_range_rejected() {
        let net = Network::new(&[1], vec![LayerSpec::dense(1)]).unwrap();
        let p = net.init_params(&mut StdRng::seed_from_u64(0));
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let opts = GradCheckOptions {
            h: 0.5,
            ..Default::default()
        };
        assert!(grad_check(&net, &p, &x, &opts).is_err());
    }
}
