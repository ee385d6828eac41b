mod common;

use rand::SeedableRng;

use deepcox::baselines::fit_linear_cox;
use deepcox::data::{draw_covariates, generate_case, CaseId, SimulationSpec};
use deepcox::ensemble::{contrast_estimate, ensemble_predict, fit_ensemble, subsample_size};
use deepcox::net::NetworkConfig;
use deepcox::seed::derive_seed;
use deepcox::trainer::{train, TrainConfig};

use common::pearson;

fn held_out(case: CaseId, m: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..m).map(|_| draw_covariates(&mut r)).collect();
    let g = x.iter().map(|v| case.risk(v)).collect();
    (x, g)
}

#[test]
fn trained_network_tracks_true_risk() {
    let data = generate_case(&SimulationSpec::new(CaseId::Linear, 2000, 21)).unwrap();
    let net = NetworkConfig::reference(10, 5);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 300,
        seed: 6,
        ..TrainConfig::default()
    };
    let out = train(&data, &net, &cfg).unwrap();
    let (x, g) = held_out(CaseId::Linear, 200, 77);
    let pred: Vec<f64> = x.iter().map(|v| out.params.predict_g(v).unwrap()).collect();
    let rho = pearson(&pred, &g);
    assert!(rho >= 0.9, "pearson {rho}");
    let mut e1 = vec![0.0; 10];
    e1[0] = 1.0;
    let unit_contrast = out.params.predict_g(&e1).unwrap() - out.params.predict_g(&[0.0; 10]).unwrap();
    assert!((unit_contrast - 1.0).abs() < 0.35, "{unit_contrast}");
}

#[test]
fn ensemble_beats_worst_base_learner() {
    let n = 400;
    let data = generate_case(&SimulationSpec::new(CaseId::Linear, n, 8)).unwrap();
    let net = NetworkConfig::new(vec![10, 16, 8, 1], 0);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 200,
        ..TrainConfig::default()
    };
    let model = fit_ensemble(&data, &net, &cfg, subsample_size(n, 0.9), 50, 3).unwrap();
    let (x, g) = held_out(CaseId::Linear, 20, 4);
    let mae = |f: &dyn Fn(&[f64]) -> f64| x.iter().zip(&g).map(|(v, t)| (f(v) - t).abs()).sum::<f64>() / 20.0;
    let ens = mae(&|v| ensemble_predict(&model, v).unwrap());
    let worst = model
        .base_params
        .iter()
        .map(|p| mae(&|v| p.predict_g(v).unwrap()))
        .fold(0.0, f64::max);
    assert!(ens < worst, "ensemble {ens} vs worst {worst}");
    assert_eq!(contrast_estimate(&model, &x[0], &x[0]).unwrap(), 0.0);
    let ab = contrast_estimate(&model, &x[0], &x[1]).unwrap();
    let ba = contrast_estimate(&model, &x[1], &x[0]).unwrap();
    assert_eq!(ab, -ba);
    assert_eq!(ensemble_predict(&model, &[0.0; 10]).unwrap(), 0.0);
}

#[test]
fn ensemble_equals_independent_fits() {
    let data = generate_case(&SimulationSpec::new(CaseId::Additive, 80, 2)).unwrap();
    let net = NetworkConfig::new(vec![10, 6, 1], 0);
    let cfg = TrainConfig {
        epochs: 20,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let seed = 41;
    let model = fit_ensemble(&data, &net, &cfg, 30, 5, seed).unwrap();
    for b in 0..5 {
        let sub = data.subset(&model.inclusion.row_indices(b)).unwrap();
        let mut nc = net.clone();
        nc.seed = derive_seed(seed, &[b as u64, 1]);
        let mut tc = cfg.clone();
        tc.seed = derive_seed(seed, &[b as u64, 2]);
        let single = train(&sub, &nc, &tc).unwrap();
        assert_eq!(single.params, model.base_params[b]);
    }
}

#[test]
fn linear_cox_recovers_generating_coefficients() {
    let data = generate_case(&SimulationSpec::new(CaseId::Linear, 5000, 12)).unwrap();
    let fit = fit_linear_cox(&data, 100, 1e-8).unwrap();
    for (b, truth) in fit.beta.iter().zip([1.0, -1.2, 0.8]) {
        assert!((b - truth).abs() <= 0.1, "{b} vs {truth}");
    }
    assert!(fit.gradient_sup_norm < 1e-8);
}
