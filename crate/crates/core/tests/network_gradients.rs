mod common;

use proptest::prelude::*;
use rand::Rng;

use deepcox::coxloss::{neg_log_partial_likelihood, partial_likelihood_score};
use deepcox::net::{init_network, DropoutMask, NetworkConfig, NetworkParams};

use common::{central_diff, min_abs_preactivation, random_network, rng, survival_instance};

fn relative_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-4)
}

fn with_flat(params: &NetworkParams, flat: &[f64]) -> NetworkParams {
    let mut p = params.clone();
    p.assign_flat(flat).unwrap();
    p
}

fn cox_loss(params: &NetworkParams, x: &[Vec<f64>], t: &[f64], e: &[bool]) -> f64 {
    let g: Vec<f64> = x.iter().map(|xi| params.predict_g(xi).unwrap()).collect();
    neg_log_partial_likelihood(&g, t, e).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn cox_loss_gradient_matches_finite_differences(
        seed in any::<u64>(),
        n in 2usize..=30,
        p0 in 1usize..=8,
        h1 in 1usize..=8,
        h2 in 0usize..=8,
    ) {
        let mut r = rng(seed);
        let mut widths = vec![p0, h1];
        if h2 > 0 {
            widths.push(h2);
        }
        widths.push(1);
        let params = random_network(&mut r, &widths);
        let (_, t, e) = survival_instance(&mut r, n, 1.0);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p0).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        prop_assume!(min_abs_preactivation(&params, &x) > 1e-4);

        let g: Vec<f64> = x.iter().map(|xi| params.predict_g(xi).unwrap()).collect();
        let d = partial_likelihood_score(&g, &t, &e).unwrap();
        let analytic = params.backward(&x, &d, None).unwrap().flatten();
        let numeric = central_diff(|th| cox_loss(&with_flat(&params, th), &x, &t, &e), &params.flatten(), 1e-6);
        for (a, f) in analytic.iter().zip(&numeric) {
            prop_assert!(relative_close(*a, *f, 1e-5), "{a} vs {f}");
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_single_gradients(seed in any::<u64>(), n in 1usize..=10) {
        let mut r = rng(seed);
        let params = random_network(&mut r, &[3, 5, 4, 1]);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let d: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let batch = params.backward(&x, &d, None).unwrap().flatten();
        let mut total = vec![0.0; batch.len()];
        for i in 0..n {
            let single = params.backward(&x[i..=i], &d[i..=i], None).unwrap().flatten();
            for (t, s) in total.iter_mut().zip(single) {
                *t += s;
            }
        }
        for (a, b) in batch.iter().zip(&total) {
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn origin_maps_to_zero(seed in any::<u64>()) {
        let params = random_network(&mut rng(seed), &[4, 6, 3, 1]);
        prop_assert_eq!(params.predict_g(&[0.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn no_dropout_mask_matches_unmasked(seed in any::<u64>()) {
        let mut r = rng(seed);
        let params = random_network(&mut r, &[4, 6, 3, 1]);
        let x: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
        let mask = DropoutMask::all_kept(&params.config);
        prop_assert_eq!(
            params.forward_raw(&x, Some(&mask)).unwrap().to_bits(),
            params.forward_raw(&x, None).unwrap().to_bits()
        );
    }
}

#[test]
fn single_sample_gradient_every_parameter() {
    let mut r = rng(99);
    let params = random_network(&mut r, &[3, 4, 3, 1]);
    let x = vec![vec![0.7, -1.1, 0.4]];
    assert!(min_abs_preactivation(&params, &x) > 1e-4);
    let d = [1.0];
    let analytic = params.backward(&x, &d, None).unwrap().flatten();
    let numeric = central_diff(|th| with_flat(&params, th).predict_g(&x[0]).unwrap(), &params.flatten(), 1e-6);
    for (a, f) in analytic.iter().zip(&numeric) {
        assert!(relative_close(*a, *f, 1e-5), "{a} vs {f}");
    }
}

#[test]
fn zero_score_gradients_give_zero_gradient() {
    let params = random_network(&mut rng(3), &[2, 3, 1]);
    let g = params.backward(&[vec![1.0, 2.0], vec![-1.0, 0.5]], &[0.0, 0.0], None).unwrap();
    assert!(g.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn he_initialisation_variance() {
    let config = NetworkConfig::new(vec![100, 100, 1], 11);
    let params = init_network(&config).unwrap();
    let w = &params.weights[0];
    assert_eq!(w.len(), 10_000);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (w.len() as f64 - 1.0);
    let target = 2.0 / 100.0;
    assert!((var - target).abs() < 0.1 * target, "{var}");
    assert!(params.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
}
