//! Monte Carlo evaluation metrics: bias, MAE, empirical SD, mean SE,
//! coverage and average interval length.
//!
//! Sums run over sorted values so results do not depend on the order in
//! which replications arrive.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::inference::critical_value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub bias: f64,
    pub mae: f64,
    /// Per-point sample SD across replications, averaged over points.
    /// `None` when there is a single replication.
    pub emp_sd: Option<f64>,
    pub mean_se: f64,
    pub coverage: f64,
    pub avg_interval_length: f64,
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn sorted_mean(v: Vec<f64>) -> f64 {
    let n = v.len() as f64;
    sorted_sum(v) / n
}

fn sample_sd(v: &[f64]) -> f64 {
    let mean = sorted_mean(v.to_vec());
    let ss = sorted_sum(v.iter().map(|x| (x - mean) * (x - mean)).collect());
    (ss / (v.len() as f64 - 1.0)).sqrt()
}

fn check_shapes(estimates: &ArrayView2<f64>, ses: &ArrayView2<f64>, truths: &[f64]) -> Result<()> {
    if estimates.dim() != ses.dim() {
        return Err(invalid(format!("estimates {:?} and ses {:?} differ in shape", estimates.dim(), ses.dim())));
    }
    if estimates.ncols() != truths.len() {
        return Err(invalid(format!("{} points but {} truths", estimates.ncols(), truths.len())));
    }
    if estimates.nrows() == 0 || truths.is_empty() {
        return Err(Error::InsufficientReplications {
            needed: 1,
            got: estimates.nrows(),
        });
    }
    Ok(())
}

/// Metrics for an `R × m` table of estimates and standard errors.
/// Requires `R >= 2` so that the empirical SD exists.
pub fn evaluate_pointwise(
    label: &str,
    estimates: ArrayView2<f64>,
    ses: ArrayView2<f64>,
    truths: &[f64],
    level: f64,
) -> Result<MetricsRow> {
    if estimates.nrows() < 2 {
        return Err(Error::InsufficientReplications {
            needed: 2,
            got: estimates.nrows(),
        });
    }
    evaluate_pointwise_lenient(label, estimates, ses, truths, level)
}

/// As [`evaluate_pointwise`], but a single replication yields `emp_sd = None`.
pub fn evaluate_pointwise_lenient(
    label: &str,
    estimates: ArrayView2<f64>,
    ses: ArrayView2<f64>,
    truths: &[f64],
    level: f64,
) -> Result<MetricsRow> {
    check_shapes(&estimates, &ses, truths)?;
    let z = critical_value(level)?;
    let (reps, m) = estimates.dim();
    let mut bias = Vec::with_capacity(m);
    let mut mae = Vec::with_capacity(m);
    let mut sds = Vec::with_capacity(m);
    let mut se_means = Vec::with_capacity(m);
    let mut covered = 0usize;
    for j in 0..m {
        let est = estimates.column(j).to_vec();
        let se = ses.column(j).to_vec();
        let t = truths[j];
        bias.push(sorted_mean(est.iter().map(|e| e - t).collect()));
        mae.push(sorted_mean(est.iter().map(|e| (e - t).abs()).collect()));
        if reps >= 2 {
            sds.push(sample_sd(&est));
        }
        covered += est
            .iter()
            .zip(&se)
            .filter(|(e, s)| (*e - z * *s) <= t && t <= (*e + z * *s))
            .count();
        se_means.push(sorted_mean(se));
    }
    let mean_se = sorted_mean(se_means);
    Ok(MetricsRow {
        label: label.to_string(),
        bias: sorted_mean(bias),
        mae: sorted_mean(mae),
        emp_sd: (reps >= 2).then(|| sorted_mean(sds)),
        mean_se,
        coverage: covered as f64 / (reps * m) as f64,
        avg_interval_length: 2.0 * z * mean_se,
    })
}

/// Per-point `(EmpSD, mean SE)` pairs; requires `R >= 2`.
pub fn per_point_sd_se(estimates: ArrayView2<f64>, ses: ArrayView2<f64>) -> Result<Vec<(f64, f64)>> {
    if estimates.dim() != ses.dim() {
        return Err(invalid("estimates and ses differ in shape"));
    }
    if estimates.nrows() < 2 {
        return Err(Error::InsufficientReplications {
            needed: 2,
            got: estimates.nrows(),
        });
    }
    Ok((0..estimates.ncols())
        .map(|j| (sample_sd(&estimates.column(j).to_vec()), sorted_mean(ses.column(j).to_vec())))
        .collect())
}
