//! Subsample ensembles: inclusion bookkeeping, parallel base-learner
//! training, and ensemble prediction.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{invalid, Error, Result};
use crate::net::{NetworkConfig, NetworkParams};
use crate::seed::{derive_seed, rng_from};
use crate::trainer::{train, training_budget_check, TrainConfig, PLATEAU_TOL};

/// Redraws allowed for a subsample that contains no events.
pub const MAX_REDRAWS: usize = 100;

/// `B × n` 0/1 matrix; `entries[[b, i]] = 1` iff observation `i` is in subsample `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionMatrix {
    pub entries: Array2<u8>,
    pub r: usize,
    pub seed: u64,
}

impl InclusionMatrix {
    pub fn n_subsamples(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n(&self) -> usize {
        self.entries.ncols()
    }

    pub fn row_indices(&self, b: usize) -> Vec<usize> {
        self.entries
            .row(b)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.entries.mapv(f64::from)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record((1..=self.n()).map(|i| format!("i{i}")))?;
        for row in self.entries.rows() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, r: usize, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let n = reader.headers()?.len();
        let mut flat = Vec::new();
        let mut rows = 0;
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != n {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {n} fields, got {}", record.len()),
                });
            }
            for field in record.iter() {
                match field {
                    "0" => flat.push(0u8),
                    "1" => flat.push(1u8),
                    other => {
                        return Err(Error::Parse {
                            line,
                            message: format!("inclusion entries must be 0 or 1, got `{other}`"),
                        })
                    }
                }
            }
            rows += 1;
        }
        let entries = Array2::from_shape_vec((rows, n), flat).expect("row lengths checked");
        if entries.rows().into_iter().any(|row| row.iter().map(|&v| v as usize).sum::<usize>() != r) {
            return Err(Error::Validation(format!("inclusion rows must each sum to r = {r}")));
        }
        Ok(Self { entries, r, seed })
    }
}

fn draw_row(n: usize, r: usize, seed: u64, b: usize, attempt: usize) -> Vec<usize> {
    let mut rng = rng_from(seed, &[0x5AB5, b as u64, attempt as u64]);
    let mut idx = index::sample(&mut rng, n, r).into_vec();
    idx.sort_unstable();
    idx
}

fn check_sizes(n: usize, r: usize, b: usize) -> Result<()> {
    if r == 0 || r > n {
        return Err(invalid(format!("subsample size must satisfy 1 <= r <= n, got r = {r}, n = {n}")));
    }
    if b == 0 {
        return Err(invalid("need at least one subsample"));
    }
    Ok(())
}

/// `B` independent uniform size-`r` subsets of `0..n` (without replacement
/// within a row; rows may repeat).
pub fn draw_subsamples(n: usize, r: usize, b: usize, seed: u64) -> Result<InclusionMatrix> {
    check_sizes(n, r, b)?;
    let mut entries = Array2::zeros((b, n));
    for row in 0..b {
        for i in draw_row(n, r, seed, row, 0) {
            entries[[row, i]] = 1;
        }
    }
    Ok(InclusionMatrix { entries, r, seed })
}

/// Subsample size `⌊n^α⌋`, at least 1.
pub fn subsample_size(n: usize, alpha: f64) -> usize {
    ((n as f64).powf(alpha).floor() as usize).clamp(1, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMetadata {
    pub n: usize,
    pub r: usize,
    pub b: usize,
    pub p0: usize,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub net_config: NetworkConfig,
    pub train_config: TrainConfig,
    /// Final training loss of each base learner.
    pub final_losses: Vec<f64>,
    /// Number of base learners passing the training-budget check.
    pub budget_ok: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub base_params: Vec<NetworkParams>,
    pub inclusion: InclusionMatrix,
    pub meta: EnsembleMetadata,
}

/// Train one base learner per subsample (Algorithm steps 2-3). Rows with no
/// events are redrawn; the stored inclusion matrix reflects the rows used.
pub fn fit_ensemble(
    dataset: &SurvivalDataset,
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    r: usize,
    b: usize,
    seed: u64,
) -> Result<EnsembleModel> {
    let n = dataset.len();
    check_sizes(n, r, b)?;
    train_config.validate()?;
    net_config.validate()?;
    if b < n {
        log::warn!("B = {b} is smaller than n = {n}; the IJ Monte Carlo correction assumes B of order n or larger");
    }
    let events = dataset.events();
    let results: Vec<Result<(Vec<usize>, NetworkParams, Vec<f64>)>> = (0..b)
        .into_par_iter()
        .map(|row| {
            let mut attempt = 0;
            let indices = loop {
                let idx = draw_row(n, r, seed, row, attempt);
                if idx.iter().any(|&i| events[i]) {
                    break idx;
                }
                attempt += 1;
                if attempt >= MAX_REDRAWS {
                    return Err(Error::DegenerateData(format!(
                        "subsample {row}: {MAX_REDRAWS} consecutive draws contained no events"
                    )));
                }
            };
            let sub = dataset.subset(&indices)?;
            let mut nc = net_config.clone();
            nc.seed = derive_seed(seed, &[row as u64, 1]);
            let mut tc = train_config.clone();
            tc.seed = derive_seed(seed, &[row as u64, 2]);
            let out = train(&sub, &nc, &tc)?;
            Ok((indices, out.params, out.loss_trace))
        })
        .collect();

    let mut entries = Array2::zeros((b, n));
    let mut base_params = Vec::with_capacity(b);
    let mut final_losses = Vec::with_capacity(b);
    let mut budget_ok = 0;
    for (row, res) in results.into_iter().enumerate() {
        let (indices, params, trace) = res?;
        for i in indices {
            entries[[row, i]] = 1;
        }
        if training_budget_check(&trace, PLATEAU_TOL) {
            budget_ok += 1;
        }
        final_losses.push(*trace.last().expect("epochs >= 1"));
        base_params.push(params);
    }
    let mut stored_net = net_config.clone();
    stored_net.dropout_rate = train_config.dropout_rate;
    stored_net.weight_decay = train_config.weight_decay;
    Ok(EnsembleModel {
        base_params,
        inclusion: InclusionMatrix { entries, r, seed },
        meta: EnsembleMetadata {
            n,
            r,
            b,
            p0: dataset.p0(),
            alpha: None,
            seed,
            net_config: stored_net,
            train_config: train_config.clone(),
            final_losses,
            budget_ok,
        },
    })
}

impl EnsembleModel {
    /// Assemble a model from parts (used for synthetic checks and loading).
    pub fn from_parts(base_params: Vec<NetworkParams>, inclusion: InclusionMatrix, meta: EnsembleMetadata) -> Result<Self> {
        if base_params.len() != inclusion.n_subsamples() || meta.b != base_params.len() {
            return Err(Error::Validation("number of base learners does not match inclusion rows".into()));
        }
        if meta.n != inclusion.n() || meta.r != inclusion.r {
            return Err(Error::Validation("metadata does not match inclusion matrix".into()));
        }
        Ok(Self {
            base_params,
            inclusion,
            meta,
        })
    }

    pub fn n_base(&self) -> usize {
        self.base_params.len()
    }

    pub fn p0(&self) -> usize {
        self.meta.p0
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.p0() {
            return Err(invalid(format!("point has length {}, model expects {}", x.len(), self.p0())));
        }
        Ok(())
    }

    /// `ĝ^b(x)` for every base learner.
    pub fn base_predictions(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.base_params.iter().map(|p| p.predict_g(x)).collect()
    }

    /// `B × m` matrix of base predictions at the rows of `points`.
    pub fn base_prediction_matrix(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        if points.ncols() != self.p0() {
            return Err(invalid(format!("points have {} columns, model expects {}", points.ncols(), self.p0())));
        }
        let rows = self
            .base_params
            .par_iter()
            .map(|p| p.predict_g_batch(points))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Array2::zeros((self.n_base(), points.nrows()));
        for (b, row) in rows.into_iter().enumerate() {
            out.row_mut(b).assign(&row);
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (b, p) in self.base_params.iter().enumerate() {
            p.save(dir.join(format!("base_{b:05}.json")))?;
        }
        self.inclusion.write_csv(dir.join("inclusion.csv"))?;
        let meta_path = dir.join("metadata.json");
        let s = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::json(&meta_path, e))?;
        std::fs::write(&meta_path, s).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("metadata.json");
        let s = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: EnsembleMetadata = serde_json::from_str(&s).map_err(|e| Error::json(&meta_path, e))?;
        let inclusion = InclusionMatrix::read_csv(dir.join("inclusion.csv"), meta.r, meta.seed)?;
        let base_params = (0..meta.b)
            .map(|b| NetworkParams::load(dir.join(format!("base_{b:05}.json"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(base_params, inclusion, meta)
    }
}

/// `ĝ_B(x) = B⁻¹ Σ_b ĝ^b(x)`.
pub fn ensemble_predict(model: &EnsembleModel, x: &[f64]) -> Result<f64> {
    let preds = model.base_predictions(x)?;
    Ok(preds.iter().sum::<f64>() / preds.len() as f64)
}

/// `ψ̂_B = ĝ_B(x1) - ĝ_B(x2)`.
pub fn contrast_estimate(model: &EnsembleModel, x1: &[f64], x2: &[f64]) -> Result<f64> {
    Ok(ensemble_predict(model, x1)? - ensemble_predict(model, x2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_case, CaseId, SimulationSpec};
    use crate::net::init_network;
    use crate::trainer::Optimizer;

    #[test]
    fn full_subsample_is_all_ones() {
        let j = draw_subsamples(5, 5, 4, 1).unwrap();
        assert!(j.entries.iter().all(|&v| v == 1));
    }

    #[test]
    fn size_preconditions() {
        assert!(matches!(draw_subsamples(5, 0, 3, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(draw_subsamples(5, 6, 3, 1), Err(Error::InvalidArgument(_))));
        assert!(draw_subsamples(5, 2, 0, 1).is_err());
    }

    #[test]
    fn rows_sum_to_r_and_are_deterministic() {
        let j = draw_subsamples(40, 13, 25, 9).unwrap();
        for row in j.entries.rows() {
            assert_eq!(row.iter().map(|&v| v as usize).sum::<usize>(), 13);
        }
        assert_eq!(j, draw_subsamples(40, 13, 25, 9).unwrap());
        assert_ne!(j, draw_subsamples(40, 13, 25, 10).unwrap());
    }

    #[test]
    fn subsample_sizes() {
        assert_eq!(subsample_size(400, 0.9), 219);
        assert_eq!(subsample_size(800, 0.95), 572);
        assert_eq!(subsample_size(400, 0.7), 66);
        assert_eq!(subsample_size(10, 1.0), 10);
    }

    fn quick_config() -> (NetworkConfig, TrainConfig) {
        (
            NetworkConfig::new(vec![10, 6, 1], 0),
            TrainConfig {
                learning_rate: 0.01,
                epochs: 20,
                optimizer: Optimizer::AdaptiveMoments,
                ..TrainConfig::default()
            },
        )
    }

    #[test]
    fn fit_is_deterministic_and_predicts_zero_at_origin() {
        let ds = generate_case(&SimulationSpec::new(CaseId::Linear, 60, 2)).unwrap();
        let (nc, tc) = quick_config();
        let a = fit_ensemble(&ds, &nc, &tc, 30, 6, 17).unwrap();
        let b = fit_ensemble(&ds, &nc, &tc, 30, 6, 17).unwrap();
        assert_eq!(a, b);
        assert_eq!(ensemble_predict(&a, &[0.0; 10]).unwrap(), 0.0);
        for row in a.inclusion.entries.rows() {
            assert_eq!(row.iter().map(|&v| v as usize).sum::<usize>(), 30);
        }
        let x = [0.5, -0.2, 1.0, 0.0, 0.3, -1.0, 0.2, 0.1, 0.0, 0.4];
        let mean = a.base_predictions(&x).unwrap().iter().sum::<f64>() / 6.0;
        assert_eq!(ensemble_predict(&a, &x).unwrap(), mean);
        assert_eq!(contrast_estimate(&a, &x, &x).unwrap(), 0.0);
        let y = [0.0; 10];
        assert_eq!(contrast_estimate(&a, &x, &y).unwrap(), -contrast_estimate(&a, &y, &x).unwrap());
    }

    #[test]
    fn single_learner_matches_direct_training() {
        let ds = generate_case(&SimulationSpec::new(CaseId::Linear, 40, 8)).unwrap();
        let (nc, tc) = quick_config();
        let model = fit_ensemble(&ds, &nc, &tc, 25, 1, 5).unwrap();
        let idx = model.inclusion.row_indices(0);
        let sub = ds.subset(&idx).unwrap();
        let mut nc1 = nc.clone();
        nc1.seed = derive_seed(5, &[0, 1]);
        let mut tc1 = tc.clone();
        tc1.seed = derive_seed(5, &[0, 2]);
        let direct = train(&sub, &nc1, &tc1).unwrap();
        assert_eq!(model.base_params[0], direct.params);
    }

    #[test]
    fn fully_censored_rows_are_redrawn() {
        // one event among 30 subjects: most size-3 rows need redrawing
        let mut ds = generate_case(&SimulationSpec::new(CaseId::Linear, 30, 4)).unwrap();
        let obs: Vec<_> = ds
            .observations()
            .iter()
            .enumerate()
            .map(|(i, o)| crate::data::Observation { event: i == 7, ..o.clone() })
            .collect();
        ds = SurvivalDataset::new("one-event", obs).unwrap();
        let (nc, mut tc) = quick_config();
        tc.epochs = 2;
        let model = fit_ensemble(&ds, &nc, &tc, 10, 5, 3).unwrap();
        for b in 0..5 {
            let idx = model.inclusion.row_indices(b);
            assert_eq!(idx.len(), 10);
            assert!(idx.contains(&7));
        }
    }

    #[test]
    fn no_events_reachable_is_degenerate() {
        let ds = generate_case(&SimulationSpec::new(CaseId::Linear, 30, 4)).unwrap();
        let obs: Vec<_> = ds
            .observations()
            .iter()
            .enumerate()
            .map(|(i, o)| crate::data::Observation { event: i == 0, ..o.clone() })
            .collect();
        let ds = SurvivalDataset::new("rare", obs).unwrap();
        let (nc, tc) = quick_config();
        // P(index 0 in a size-1 row) = 1/30, so 100 failures in a row is likely for some row
        let res = fit_ensemble(&ds, &nc, &tc, 1, 200, 3);
        assert!(matches!(res, Err(Error::DegenerateData(_))));
    }

    #[test]
    fn model_directory_round_trip() {
        let ds = generate_case(&SimulationSpec::new(CaseId::Linear, 30, 1)).unwrap();
        let (nc, tc) = quick_config();
        let model = fit_ensemble(&ds, &nc, &tc, 20, 3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = EnsembleModel::load(dir.path()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn from_parts_validates_counts() {
        let p = init_network(&NetworkConfig::new(vec![2, 3, 1], 0)).unwrap();
        let inclusion = draw_subsamples(4, 2, 2, 0).unwrap();
        let meta = EnsembleMetadata {
            n: 4,
            r: 2,
            b: 1,
            p0: 2,
            alpha: None,
            seed: 0,
            net_config: p.config.clone(),
            train_config: TrainConfig::default(),
            final_losses: vec![],
            budget_ok: 0,
        };
        assert!(EnsembleModel::from_parts(vec![p], inclusion, meta).is_err());
    }
}
