#![allow(dead_code)]

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deepcox::ensemble::{draw_subsamples, EnsembleMetadata, EnsembleModel, InclusionMatrix};
use deepcox::net::{NetworkConfig, NetworkParams};
use deepcox::trainer::TrainConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Literal O(n²) negative log partial likelihood with exact risk-set sums.
pub fn literal_nll(scores: &[f64], times: &[f64], events: &[bool]) -> f64 {
    let n = scores.len();
    let mut total = 0.0;
    for i in 0..n {
        if events[i] {
            let mut denom = 0.0;
            for j in 0..n {
                if times[j] >= times[i] {
                    denom += scores[j].exp();
                }
            }
            total += scores[i] - denom.ln();
        }
    }
    -total / n as f64
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let up = f(&probe);
        probe[k] = x[k] - h;
        let down = f(&probe);
        probe[k] = x[k];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Random survival instance with times drawn from a small grid (ties likely).
pub fn survival_instance(rng: &mut ChaCha8Rng, n: usize, score_scale: f64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let scores = (0..n).map(|_| rng.random_range(-score_scale..score_scale)).collect();
    let times = (0..n).map(|_| rng.random_range(1..=(n as u32).max(2)) as f64 / 2.0).collect();
    let mut events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    events[rng.random_range(0..n)] = true;
    (scores, times, events)
}

/// Network with random weights and biases drawn uniformly from [-1, 1].
pub fn random_network(rng: &mut ChaCha8Rng, widths: &[usize]) -> NetworkParams {
    let layers = widths.len() - 1;
    let weights = (0..layers)
        .map(|l| Array2::from_shape_fn((widths[l + 1], widths[l]), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let biases = (0..layers - 1)
        .map(|l| Array1::from_shape_fn(widths[l + 1], |_| rng.random_range(-1.0..1.0)))
        .collect();
    NetworkParams {
        weights,
        biases,
        config: NetworkConfig {
            widths: widths.to_vec(),
            dropout_rate: 0.0,
            weight_decay: 0.0,
            seed: 0,
        },
    }
}

/// Smallest absolute hidden pre-activation over the given inputs and the origin.
pub fn min_abs_preactivation(params: &NetworkParams, inputs: &[Vec<f64>]) -> f64 {
    let mut smallest = f64::INFINITY;
    let origin = vec![0.0; params.config.widths[0]];
    for x in inputs.iter().chain(std::iter::once(&origin)) {
        let mut h = x.clone();
        for l in 0..params.biases.len() {
            let w = &params.weights[l];
            let mut next = vec![0.0; w.nrows()];
            for i in 0..w.nrows() {
                let mut z = params.biases[l][i];
                for j in 0..w.ncols() {
                    z += w[[i, j]] * h[j];
                }
                smallest = smallest.min(z.abs());
                next[i] = z.max(0.0);
            }
            h = next;
        }
    }
    smallest
}

/// Bias-corrected IJ covariance written out term by term.
pub fn literal_ij(inclusion: &[Vec<f64>], p1: &[f64], p2: &[f64], r: usize) -> f64 {
    let b = inclusion.len();
    let n = inclusion[0].len();
    let bf = b as f64;
    let mut jbar = vec![0.0; n];
    for row in inclusion {
        for i in 0..n {
            jbar[i] += row[i];
        }
    }
    for v in jbar.iter_mut() {
        *v /= bf;
    }
    let m1 = p1.iter().sum::<f64>() / bf;
    let m2 = p2.iter().sum::<f64>() / bf;
    let z = |p: &[f64], m: f64, bi: usize, i: usize| (inclusion[bi][i] - jbar[i]) * (p[bi] - m);
    let mut leading = 0.0;
    let mut correction = 0.0;
    for i in 0..n {
        let v1 = (0..b).map(|bi| z(p1, m1, bi, i)).sum::<f64>() / bf;
        let v2 = (0..b).map(|bi| z(p2, m2, bi, i)).sum::<f64>() / bf;
        leading += v1 * v2;
        for bi in 0..b {
            correction += (z(p1, m1, bi, i) - v1) * (z(p2, m2, bi, i) - v2);
        }
    }
    let (nf, rf) = (n as f64, r as f64);
    nf * (nf - 1.0) / ((nf - rf) * (nf - rf)) * (leading - correction / (bf * (bf - 1.0)))
}

/// Harrell's C by enumerating every ordered pair.
pub fn pair_count_concordance(scores: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let (mut conc, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    for i in 0..scores.len() {
        if !events[i] {
            continue;
        }
        for j in 0..scores.len() {
            if times[i] < times[j] {
                comparable += 1;
                if scores[i] > scores[j] {
                    conc += 1;
                } else if scores[i] == scores[j] {
                    tied += 1;
                }
            }
        }
    }
    (comparable > 0).then(|| (conc as f64 + 0.5 * tied as f64) / comparable as f64)
}

fn phi_density(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Upper tail `1 - Φ(z)` for `z >= 0`: power series below 3, Laplace
/// continued fraction above.
pub fn normal_upper_tail(z: f64) -> f64 {
    assert!(z >= 0.0);
    if z < 3.0 {
        // Φ(z) - 1/2 = φ(z) Σ z^{2k+1} / (1·3·…·(2k+1))
        let mut term = z;
        let mut sum = z;
        let mut k = 0.0;
        while term.abs() > 1e-18 * sum.abs() {
            k += 1.0;
            term *= z * z / (2.0 * k + 1.0);
            sum += term;
        }
        0.5 - phi_density(z) * sum
    } else {
        let mut frac = 0.0;
        for k in (1..=300).rev() {
            frac = k as f64 / (z + frac);
        }
        phi_density(z) / (z + frac)
    }
}

/// `Φ⁻¹(p)` by bisection on the tail function.
pub fn bisection_quantile(p: f64) -> f64 {
    let tail = p.min(1.0 - p);
    let (mut lo, mut hi) = (0.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_upper_tail(mid) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z = 0.5 * (lo + hi);
    if p < 0.5 {
        -z
    } else {
        z
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

/// Base learner `b` predicts `g(x) = a_b x1 + c_b x2` on `|x| < 10`, with
/// `a_b = Σ_i J_bi h_i / r` and `c_b = Σ_i J_bi k_i / r`.
pub fn linear_in_inclusions(n: usize, r: usize, b: usize, seed: u64) -> (EnsembleModel, Vec<f64>, Vec<f64>) {
    let inclusion = draw_subsamples(n, r, b, seed).unwrap();
    let mut gen = rng(seed ^ 0xABCD);
    let h: Vec<f64> = (0..n).map(|_| gen.random_range(-1.0..1.0)).collect();
    let k: Vec<f64> = (0..n).map(|_| gen.random_range(-1.0..1.0)).collect();
    let config = NetworkConfig {
        widths: vec![2, 2, 1],
        dropout_rate: 0.0,
        weight_decay: 0.0,
        seed: 0,
    };
    let mut a_coef = Vec::new();
    let mut c_coef = Vec::new();
    let base = (0..b)
        .map(|row| {
            let idx = inclusion.row_indices(row);
            let a = idx.iter().map(|&i| h[i]).sum::<f64>() / r as f64;
            let c = idx.iter().map(|&i| k[i]).sum::<f64>() / r as f64;
            a_coef.push(a);
            c_coef.push(c);
            NetworkParams {
                weights: vec![array![[1.0, 0.0], [0.0, 1.0]], array![[a, c]]],
                biases: vec![array![10.0, 10.0]],
                config: config.clone(),
            }
        })
        .collect();
    let meta = EnsembleMetadata {
        n,
        r,
        b,
        p0: 2,
        alpha: None,
        seed,
        net_config: config.clone(),
        train_config: TrainConfig::default(),
        final_losses: vec![0.0; b],
        budget_ok: b,
    };
    (EnsembleModel::from_parts(base, inclusion, meta).unwrap(), a_coef, c_coef)
}

pub fn inclusion_rows(j: &InclusionMatrix) -> Vec<Vec<f64>> {
    j.as_f64().rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn preds(a: &[f64], c: &[f64], x: [f64; 2]) -> Vec<f64> {
    a.iter().zip(c).map(|(a, c)| a * x[0] + c * x[1]).collect()
}
