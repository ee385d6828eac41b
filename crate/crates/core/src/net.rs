//! ReLU multilayer perceptron with the identifiability correction
//! `g(x) = f(x) - f(0)`.
//!
//! Layout follows an `(L, p)` architecture with widths `(p0, p1, ..., pL, 1)`:
//! `L + 1` weight matrices (`W_l` is `p_{l+1} × p_l`) and one bias vector per
//! hidden layer. The output layer carries no bias, since any constant there
//! cancels in `g`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `(p0, p1, ..., pL, 1)`
    pub widths: Vec<usize>,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(widths: Vec<usize>, seed: u64) -> Self {
        Self {
            widths,
            dropout_rate: 0.1,
            weight_decay: 0.02,
            seed,
        }
    }

    /// The `(p0, 128, 64, 1)` architecture of the reference experiments.
    pub fn reference(p0: usize, seed: u64) -> Self {
        Self::new(vec![p0, 128, 64, 1], seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(invalid(format!(
                "need at least one hidden layer, got widths {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(invalid(format!("all widths must be positive: {:?}", self.widths)));
        }
        if *self.widths.last().unwrap() != 1 {
            return Err(invalid(format!("last width must be 1: {:?}", self.widths)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid(format!("dropout_rate must lie in [0,1), got {}", self.dropout_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }
}

/// Per-unit keep flags for one forward pass, one vector per hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<Vec<bool>>,
}

impl DropoutMask {
    pub fn all_kept(config: &NetworkConfig) -> Self {
        Self {
            keep: config.hidden_widths().iter().map(|&w| vec![true; w]).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Self {
        let rate = config.dropout_rate;
        Self {
            keep: config
                .hidden_widths()
                .iter()
                .map(|&w| (0..w).map(|_| rng.random::<f64>() >= rate).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub config: NetworkConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            weights: params.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_parts(&self.weights, &self.biases)
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

fn flatten_parts(weights: &[Array2<f64>], biases: &[Array1<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for w in weights {
        out.extend(w.iter().copied());
    }
    for b in biases {
        out.extend(b.iter().copied());
    }
    out
}

/// Activations retained by a batched forward pass for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    /// Layer inputs: `activations[0]` is the design matrix, `activations[l]`
    /// the (masked, scaled) output of hidden layer `l`.
    activations: Vec<Array2<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Array2<f64>>,
    /// Per-sample dropout scale (`0` or `1/(1-rate)`) per hidden layer.
    scales: Option<Vec<Array2<f64>>>,
    pub output: Array1<f64>,
}

pub fn init_network(config: &NetworkConfig) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = rng_from(config.seed, &[0x1217]);
    let widths = &config.widths;
    let weights = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let sd = (2.0 / fan_in as f64).sqrt();
            Array2::from_shape_simple_fn((fan_out, fan_in), || {
                sd * rng.sample::<f64, _>(StandardNormal)
            })
        })
        .collect();
    let biases = config.hidden_widths().iter().map(|&w| Array1::zeros(w)).collect();
    Ok(NetworkParams {
        weights,
        biases,
        config: config.clone(),
    })
}

impl NetworkParams {
    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_parts(&self.weights, &self.biases)
    }

    /// Overwrite every parameter from `flat` (the order of [`Self::flatten`]).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(invalid(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &DropoutMask) -> Result<()> {
        let hidden = self.config.hidden_widths();
        if mask.keep.len() != hidden.len()
            || mask.keep.iter().zip(hidden).any(|(k, &w)| k.len() != w)
        {
            return Err(invalid("dropout mask does not match hidden widths"));
        }
        Ok(())
    }

    fn keep_scale(&self) -> f64 {
        1.0 / (1.0 - self.config.dropout_rate)
    }

    /// Raw network output `f(x)`.
    pub fn forward_raw(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<f64> {
        self.check_input(x)?;
        if let Some(m) = mask {
            self.check_mask(m)?;
        }
        let scale = self.keep_scale();
        let n_hidden = self.biases.len();
        let mut h = Array1::from(x.to_vec());
        for l in 0..n_hidden {
            let mut z = self.weights[l].dot(&h);
            z += &self.biases[l];
            z.mapv_inplace(|v| v.max(0.0));
            if let Some(m) = mask {
                for (v, &keep) in z.iter_mut().zip(&m.keep[l]) {
                    *v = if keep { *v * scale } else { 0.0 };
                }
            }
            h = z;
        }
        Ok(self.weights[n_hidden].row(0).dot(&h))
    }

    /// `g(x) = f(x) - f(0)`, exactly zero at the origin.
    pub fn predict_g(&self, x: &[f64]) -> Result<f64> {
        let f0 = self.forward_raw(&vec![0.0; self.input_dim()], None)?;
        Ok(self.forward_raw(x, None)? - f0)
    }

    /// `g` at every row of `x` (no dropout).
    pub fn predict_g_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(invalid(format!(
                "inputs have {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let f0 = self.forward_raw(&vec![0.0; self.input_dim()], None)?;
        let cache = self.forward_batch(x, None);
        Ok(cache.output.mapv(|f| f - f0))
    }

    /// Batched forward pass; `scales` are per-sample dropout multipliers
    /// (`n × p_l` per hidden layer).
    pub(crate) fn forward_batch(
        &self,
        x: ArrayView2<f64>,
        scales: Option<Vec<Array2<f64>>>,
    ) -> ForwardCache {
        let n_hidden = self.biases.len();
        let mut activations = Vec::with_capacity(n_hidden + 1);
        let mut pre = Vec::with_capacity(n_hidden);
        activations.push(x.to_owned());
        for l in 0..n_hidden {
            let mut z = activations[l].dot(&self.weights[l].t());
            z += &self.biases[l].view().insert_axis(Axis(0));
            let mut h = z.mapv(|v| v.max(0.0));
            if let Some(s) = &scales {
                h *= &s[l];
            }
            pre.push(z);
            activations.push(h);
        }
        let output = activations[n_hidden].dot(&self.weights[n_hidden].row(0));
        ForwardCache {
            activations,
            pre,
            scales,
            output,
        }
    }

    /// Gradient of `Σ_i d_out[i] · f(x_i)` for the pass recorded in `cache`.
    pub(crate) fn backward_batch(&self, cache: &ForwardCache, d_out: ArrayView1<f64>) -> Gradients {
        let n_hidden = self.biases.len();
        let mut grads = Gradients::zeros_like(self);
        let top = &cache.activations[n_hidden];
        grads.weights[n_hidden]
            .row_mut(0)
            .assign(&top.t().dot(&d_out));
        // dL/dh for the last hidden layer: n × p_L
        let mut delta = d_out
            .insert_axis(Axis(1))
            .dot(&self.weights[n_hidden]);
        for l in (0..n_hidden).rev() {
            // through dropout scale and ReLU (subgradient 0 at z = 0)
            if let Some(s) = &cache.scales {
                delta *= &s[l];
            }
            ndarray::Zip::from(&mut delta)
                .and(&cache.pre[l])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            grads.weights[l] = delta.t().dot(&cache.activations[l]);
            grads.biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                delta = delta.dot(&self.weights[l]);
            }
        }
        grads
    }

    /// Gradient of `Σ_i score_grads[i] · g(x_i)` with `g = f - f(0)`;
    /// `f(0)` is always evaluated without dropout.
    pub fn backward(
        &self,
        inputs: &[Vec<f64>],
        score_grads: &[f64],
        dropout_masks: Option<&[DropoutMask]>,
    ) -> Result<Gradients> {
        if inputs.len() != score_grads.len() {
            return Err(invalid(format!(
                "{} inputs but {} score gradients",
                inputs.len(),
                score_grads.len()
            )));
        }
        if let Some(m) = dropout_masks {
            if m.len() != inputs.len() {
                return Err(invalid("one dropout mask per input is required"));
            }
            for mask in m {
                self.check_mask(mask)?;
            }
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let n = inputs.len();
        let p0 = self.input_dim();
        if n == 0 {
            return Ok(Gradients::zeros_like(self));
        }
        let flat: Vec<f64> = inputs.iter().flatten().copied().collect();
        let x = Array2::from_shape_vec((n, p0), flat).expect("checked lengths");
        let scales = dropout_masks.map(|m| self.mask_scales(m));
        let cache = self.forward_batch(x.view(), scales);
        Ok(self.g_gradient(&cache, ArrayView1::from(score_grads)))
    }

    /// Gradient of `Σ_i d_out[i] · (f(x_i) - f(0))` for the pass in `cache`.
    pub(crate) fn g_gradient(&self, cache: &ForwardCache, d_out: ArrayView1<f64>) -> Gradients {
        let mut grads = self.backward_batch(cache, d_out);
        let total: f64 = d_out.sum();
        if total != 0.0 {
            let origin = Array2::zeros((1, self.input_dim()));
            let c0 = self.forward_batch(origin.view(), None);
            let g0 = self.backward_batch(&c0, ArrayView1::from(&[total][..]));
            for (a, b) in grads.weights.iter_mut().zip(&g0.weights) {
                *a -= b;
            }
            for (a, b) in grads.biases.iter_mut().zip(&g0.biases) {
                *a -= b;
            }
        }
        grads
    }

    pub(crate) fn mask_scales(&self, masks: &[DropoutMask]) -> Vec<Array2<f64>> {
        let scale = self.keep_scale();
        self.config
            .hidden_widths()
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                Array2::from_shape_fn((masks.len(), w), |(i, u)| {
                    if masks[i].keep[l][u] {
                        scale
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    }

    /// Random inverted-dropout multipliers for a batch of `n` samples.
    pub(crate) fn sample_scales<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Array2<f64>> {
        let rate = self.config.dropout_rate;
        let scale = self.keep_scale();
        self.config
            .hidden_widths()
            .iter()
            .map(|&w| {
                Array2::from_shape_simple_fn((n, w), || {
                    if rng.random::<f64>() >= rate {
                        scale
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("<params>", e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let params: Self = serde_json::from_str(s).map_err(|e| Error::json("<params>", e))?;
        params.validate_shapes()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: Self = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
        params.validate_shapes()?;
        Ok(params)
    }

    fn validate_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let w = &self.config.widths;
        let ok = self.weights.len() == w.len() - 1
            && self.biases.len() == w.len() - 2
            && self
                .weights
                .iter()
                .enumerate()
                .all(|(l, m)| m.dim() == (w[l + 1], w[l]))
            && self.biases.iter().enumerate().all(|(l, b)| b.len() == w[l + 1]);
        if !ok {
            return Err(Error::Validation("parameter shapes do not match config".into()));
        }
        if !self.is_finite() {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Free-function forms of the network API.
pub fn forward_raw(params: &NetworkParams, x: &[f64], mask: Option<&DropoutMask>) -> Result<f64> {
    params.forward_raw(x, mask)
}

pub fn predict_g(params: &NetworkParams, x: &[f64]) -> Result<f64> {
    params.predict_g(x)
}

pub fn backward(
    params: &NetworkParams,
    inputs: &[Vec<f64>],
    score_grads: &[f64],
    dropout_masks: Option<&[DropoutMask]>,
) -> Result<Gradients> {
    params.backward(inputs, score_grads, dropout_masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_identity() -> NetworkParams {
        NetworkParams {
            weights: vec![array![[1.0]], array![[1.0]]],
            biases: vec![array![0.0]],
            config: NetworkConfig {
                widths: vec![1, 1, 1],
                dropout_rate: 0.0,
                weight_decay: 0.0,
                seed: 0,
            },
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::new(vec![3, 1], 0).validate().is_err());
        assert!(NetworkConfig::new(vec![3, 0, 1], 0).validate().is_err());
        assert!(NetworkConfig::new(vec![3, 4, 2], 0).validate().is_err());
        let mut c = NetworkConfig::new(vec![3, 4, 1], 0);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        assert!(NetworkConfig::reference(10, 0).validate().is_ok());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let c = NetworkConfig::new(vec![5, 7, 3, 1], 99);
        let a = init_network(&c).unwrap();
        assert_eq!(a, init_network(&c).unwrap());
        assert!(a.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert_ne!(a, init_network(&NetworkConfig::new(vec![5, 7, 3, 1], 100)).unwrap());
    }

    #[test]
    fn he_variance() {
        let c = NetworkConfig::new(vec![100, 100, 1], 3);
        let p = init_network(&c).unwrap();
        let w = &p.weights[0];
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / 100.0;
        assert!((var - target).abs() < 0.1 * target, "var {var}");
    }

    #[test]
    fn relu_examples() {
        let p = tiny_identity();
        assert_eq!(p.forward_raw(&[-2.0], None).unwrap(), 0.0);
        assert_eq!(p.forward_raw(&[3.0], None).unwrap(), 3.0);
        let mut z = p.clone();
        z.weights.iter_mut().for_each(|w| w.fill(0.0));
        assert_eq!(z.forward_raw(&[5.0], None).unwrap(), 0.0);
        assert_eq!(z.predict_g(&[5.0]).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = init_network(&NetworkConfig::new(vec![3, 4, 1], 1)).unwrap();
        assert!(p.forward_raw(&[1.0, 2.0], None).is_err());
        let bad_mask = DropoutMask { keep: vec![vec![true; 3]] };
        assert!(p.forward_raw(&[1.0, 2.0, 3.0], Some(&bad_mask)).is_err());
        assert!(p.backward(&[vec![1.0, 2.0, 3.0]], &[1.0, 2.0], None).is_err());
    }

    #[test]
    fn predict_g_is_zero_at_origin_and_matches_raw() {
        let p = init_network(&NetworkConfig::new(vec![4, 6, 5, 1], 8)).unwrap();
        assert_eq!(p.predict_g(&[0.0; 4]).unwrap(), 0.0);
        let x = [0.3, -1.2, 2.0, 0.7];
        let expected = p.forward_raw(&x, None).unwrap() - p.forward_raw(&[0.0; 4], None).unwrap();
        assert_eq!(p.predict_g(&x).unwrap(), expected);
        let batch = Array2::from_shape_vec((1, 4), x.to_vec()).unwrap();
        let b = p.predict_g_batch(batch.view()).unwrap();
        assert!((b[0] - expected).abs() < 1e-13);
    }

    #[test]
    fn inverted_dropout_scaling() {
        let mut p = tiny_identity();
        p.config.dropout_rate = 0.5;
        let keep = DropoutMask { keep: vec![vec![true]] };
        let drop = DropoutMask { keep: vec![vec![false]] };
        assert_eq!(p.forward_raw(&[3.0], Some(&keep)).unwrap(), 6.0);
        assert_eq!(p.forward_raw(&[3.0], Some(&drop)).unwrap(), 0.0);
    }

    #[test]
    fn zero_rate_mask_is_bitwise_transparent() {
        let mut c = NetworkConfig::new(vec![3, 5, 4, 1], 2);
        c.dropout_rate = 0.0;
        let p = init_network(&c).unwrap();
        let mask = DropoutMask::all_kept(&c);
        let x = [0.1, 0.2, -0.3];
        assert_eq!(
            p.forward_raw(&x, Some(&mask)).unwrap().to_bits(),
            p.forward_raw(&x, None).unwrap().to_bits()
        );
    }

    #[test]
    fn zero_score_grads_give_zero_gradients() {
        let p = init_network(&NetworkConfig::new(vec![3, 4, 1], 1)).unwrap();
        let g = p.backward(&[vec![1.0, 2.0, 3.0], vec![0.5, 0.0, -1.0]], &[0.0, 0.0], None).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_sample_gradients() {
        let p = init_network(&NetworkConfig::new(vec![3, 6, 4, 1], 5)).unwrap();
        let xs = vec![vec![1.0, 2.0, 3.0], vec![0.5, -0.3, -1.0], vec![-0.2, 0.9, 0.4]];
        let s = [0.7, -1.1, 0.25];
        let whole = p.backward(&xs, &s, None).unwrap().flatten();
        let mut acc = Gradients::zeros_like(&p);
        for (x, &si) in xs.iter().zip(&s) {
            acc.add_assign(&p.backward(std::slice::from_ref(x), &[si], None).unwrap());
        }
        for (a, b) in whole.iter().zip(acc.flatten()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let p = init_network(&NetworkConfig::reference(10, 77)).unwrap();
        let back = NetworkParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p.flatten(), back.flatten());
        assert_eq!(p.config, back.config);
    }

    #[test]
    fn flat_assignment_round_trips() {
        let mut p = init_network(&NetworkConfig::new(vec![2, 3, 1], 4)).unwrap();
        let flat: Vec<f64> = (0..p.n_params()).map(|i| i as f64).collect();
        p.assign_flat(&flat).unwrap();
        assert_eq!(p.flatten(), flat);
        assert!(p.assign_flat(&flat[1..]).is_err());
    }
}
