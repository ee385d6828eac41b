//! Full-batch minimisation of the negative log partial likelihood.
//!
//! The partial likelihood couples every subject through its risk sets, so
//! each step uses the whole (sub)sample rather than mini-batches.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::coxloss::{nll_sorted, score_sorted, RiskOrder};
use crate::data::SurvivalDataset;
use crate::error::{invalid, Error, Result};
use crate::net::{init_network, Gradients, NetworkConfig, NetworkParams};
use crate::seed::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    PlainGd,
    AdaptiveMoments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 500,
            weight_decay: 0.02,
            dropout_rate: 0.1,
            optimizer: Optimizer::AdaptiveMoments,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be >= 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid(format!("dropout_rate must lie in [0,1), got {}", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: NetworkParams,
    /// Training loss (with that epoch's dropout draw) before each update.
    pub loss_trace: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

struct Moments {
    m: Gradients,
    v: Gradients,
    t: i32,
}

fn step_array<D: ndarray::Dimension>(
    p: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    c1: f64,
    c2: f64,
) {
    ndarray::Zip::from(p)
        .and(g)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        });
}

impl Moments {
    fn new(params: &NetworkParams) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
        }
    }

    fn apply(&mut self, params: &mut NetworkParams, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for l in 0..params.weights.len() {
            step_array(
                &mut params.weights[l],
                &grads.weights[l],
                &mut self.m.weights[l],
                &mut self.v.weights[l],
                lr,
                c1,
                c2,
            );
        }
        for l in 0..params.biases.len() {
            step_array(
                &mut params.biases[l],
                &grads.biases[l],
                &mut self.m.biases[l],
                &mut self.v.biases[l],
                lr,
                c1,
                c2,
            );
        }
    }
}

/// Loss gradient (partial-likelihood part plus `weight_decay · W` on weights)
/// for one full-batch step. Returns the loss before the step.
pub(crate) fn loss_and_gradient(
    params: &NetworkParams,
    x: &Array2<f64>,
    risk: &RiskOrder,
    scales: Option<Vec<Array2<f64>>>,
    weight_decay: f64,
) -> (f64, Gradients) {
    let cache = params.forward_batch(x.view(), scales);
    // scores shifted by f(0) (no dropout) so they are g(x_i)
    let f0 = params
        .forward_raw(&vec![0.0; params.input_dim()], None)
        .expect("input width matches");
    let scores: Array1<f64> = cache.output.mapv(|f| f - f0);
    let scores = scores.as_slice().expect("contiguous");
    let loss = nll_sorted(scores, risk);
    let score_grads = score_sorted(scores, risk);
    let mut grads = params.g_gradient(&cache, ArrayView1::from(&score_grads[..]));
    if weight_decay > 0.0 {
        for (g, w) in grads.weights.iter_mut().zip(&params.weights) {
            g.scaled_add(weight_decay, w);
        }
    }
    (loss, grads)
}

/// Train a network from `net_config`'s initialisation. The dropout rate and
/// weight decay of `train_config` take precedence over those in
/// `net_config`; the returned params record the values actually used.
pub fn train(
    dataset: &SurvivalDataset,
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutput> {
    train_config.validate()?;
    let mut config = net_config.clone();
    config.dropout_rate = train_config.dropout_rate;
    config.weight_decay = train_config.weight_decay;
    config.validate()?;
    if config.input_dim() != dataset.p0() {
        return Err(invalid(format!(
            "network expects {} covariates, dataset has {}",
            config.input_dim(),
            dataset.p0()
        )));
    }
    if dataset.n_events() == 0 {
        return Err(Error::DegenerateLikelihood);
    }
    let mut params = init_network(&config)?;
    let x = dataset.covariate_matrix();
    let risk = RiskOrder::new(&dataset.times(), &dataset.events())?;
    let mut rng = rng_from(train_config.seed, &[0xD809]);
    let mut moments = Moments::new(&params);
    let mut loss_trace = Vec::with_capacity(train_config.epochs);
    let lr = train_config.learning_rate;

    for epoch in 0..train_config.epochs {
        let scales = (config.dropout_rate > 0.0).then(|| params.sample_scales(x.nrows(), &mut rng));
        let (loss, grads) = loss_and_gradient(&params, &x, &risk, scales, config.weight_decay);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        loss_trace.push(loss);
        match train_config.optimizer {
            Optimizer::PlainGd => {
                for (w, g) in params.weights.iter_mut().zip(&grads.weights) {
                    w.scaled_add(-lr, g);
                }
                for (b, g) in params.biases.iter_mut().zip(&grads.biases) {
                    b.scaled_add(-lr, g);
                }
            }
            Optimizer::AdaptiveMoments => moments.apply(&mut params, &grads, lr),
        }
        if !params.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                loss: f64::NAN,
            });
        }
    }
    Ok(TrainOutput { params, loss_trace })
}

/// Default plateau tolerance for [`training_budget_check`].
pub const PLATEAU_TOL: f64 = 1e-3;

/// Practical stand-in for a bounded optimisation gap: the final loss is
/// (within 1e-6) the best seen, and the loss fell by less than `plateau_tol`
/// over the last 10% of epochs.
pub fn training_budget_check(loss_trace: &[f64], plateau_tol: f64) -> bool {
    let Some(&last) = loss_trace.last() else {
        return false;
    };
    let min = loss_trace.iter().copied().fold(f64::INFINITY, f64::min);
    if last > min + 1e-6 {
        return false;
    }
    let window = loss_trace.len().div_ceil(10);
    let start = loss_trace[loss_trace.len() - window];
    start - last < plateau_tol
}

pub fn write_loss_trace(path: impl AsRef<Path>, loss_trace: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["epoch", "loss"])?;
    for (epoch, loss) in loss_trace.iter().enumerate() {
        w.write_record([(epoch + 1).to_string(), loss.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
