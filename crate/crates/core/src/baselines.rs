//! Linear Cox proportional hazards fit (Newton-Raphson, Breslow ties) and
//! Harrell's concordance index.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};

use crate::coxloss::RiskOrder;
use crate::data::SurvivalDataset;
use crate::error::{invalid, Error, Result};

/// Coefficient norm beyond which the likelihood is treated as monotone.
pub const SEPARATION_BOUND: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoxFit {
    pub beta: Vec<f64>,
    /// Log partial likelihood (sum over events, not averaged).
    pub log_likelihood: f64,
    pub gradient_sup_norm: f64,
    pub iterations: usize,
    /// Inverse observed information at `beta`.
    pub covariance: DMatrix<f64>,
}

impl LinearCoxFit {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.beta.len() {
            return Err(invalid(format!("point has length {}, fit has {} coefficients", x.len(), self.beta.len())));
        }
        Ok(self.beta.iter().zip(x).map(|(b, v)| b * v).sum())
    }

    /// Model-based standard error of `β'v`.
    pub fn linear_se(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.beta.len() {
            return Err(invalid(format!("vector has length {}, fit has {} coefficients", v.len(), self.beta.len())));
        }
        let v = DVector::from_column_slice(v);
        Ok((v.transpose() * &self.covariance * &v)[(0, 0)].max(0.0).sqrt())
    }
}

/// Log partial likelihood, gradient and Hessian of `β ↦ ℓ(β)` with `g(x) = β'x`.
pub struct CoxDerivatives {
    pub log_likelihood: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

pub fn linear_cox_derivatives(dataset: &SurvivalDataset, beta: &[f64]) -> Result<CoxDerivatives> {
    let p = dataset.p0();
    if beta.len() != p {
        return Err(invalid(format!("beta has length {}, data has {p} covariates", beta.len())));
    }
    let obs = dataset.observations();
    let risk = RiskOrder::new(&dataset.times(), &dataset.events())?;
    let eta: Vec<f64> = obs
        .iter()
        .map(|o| o.covariates.iter().zip(beta).map(|(x, b)| x * b).sum())
        .collect();
    let shift = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut s0 = 0.0;
    let mut s1 = DVector::<f64>::zeros(p);
    let mut s2 = DMatrix::<f64>::zeros(p, p);
    let mut ll = 0.0;
    let mut grad = DVector::<f64>::zeros(p);
    let mut hess = DMatrix::<f64>::zeros(p, p);
    for group in &risk.tie_groups {
        for &i in &risk.order[group.clone()] {
            let w = (eta[i] - shift).exp();
            let x = DVector::from_column_slice(&obs[i].covariates);
            s0 += w;
            s1.axpy(w, &x, 1.0);
            s2.ger(w, &x, &x, 1.0);
        }
        let d = group.clone().filter(|&pos| risk.event_flags[pos]).count();
        if d == 0 {
            continue;
        }
        let mean = &s1 / s0;
        let second = &s2 / s0 - &mean * mean.transpose();
        for pos in group.clone() {
            if risk.event_flags[pos] {
                let i = risk.order[pos];
                ll += eta[i] - shift - s0.ln();
                grad += DVector::from_column_slice(&obs[i].covariates) - &mean;
            }
        }
        hess -= second * d as f64;
    }
    Ok(CoxDerivatives {
        log_likelihood: ll,
        gradient: grad,
        hessian: hess,
    })
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Newton-Raphson maximisation of the linear Cox log partial likelihood,
/// halving the step whenever the likelihood would decrease.
pub fn fit_linear_cox(dataset: &SurvivalDataset, max_iter: usize, tol: f64) -> Result<LinearCoxFit> {
    if !(tol > 0.0) {
        return Err(invalid(format!("tolerance must be positive, got {tol}")));
    }
    if dataset.n_events() == 0 {
        return Err(Error::DegenerateLikelihood);
    }
    let p = dataset.p0();
    let mut beta = vec![0.0; p];
    let mut cur = linear_cox_derivatives(dataset, &beta)?;
    for iter in 0..=max_iter {
        let g_norm = sup_norm(&cur.gradient);
        let info = -cur.hessian.clone();
        let Some(chol) = info.clone().cholesky() else {
            if iter == 0 {
                return Err(Error::DegenerateDesign(
                    "observed information is singular (collinear or constant covariates)".into(),
                ));
            }
            return Err(Error::Separation(beta.iter().map(|b| b * b).sum::<f64>().sqrt()));
        };
        let step = chol.solve(&cur.gradient);
        let scale_beta = 1.0 + beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        if g_norm < tol && sup_norm(&step) < 1e-6 * scale_beta {
            return Ok(LinearCoxFit {
                beta,
                log_likelihood: cur.log_likelihood,
                gradient_sup_norm: g_norm,
                iterations: iter,
                covariance: chol.inverse(),
            });
        }
        if iter == max_iter {
            return Err(Error::NotConverged {
                iterations: max_iter,
                grad_norm: g_norm,
            });
        }
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let next = linear_cox_derivatives(dataset, &cand)?;
            if next.log_likelihood.is_finite() && next.log_likelihood >= cur.log_likelihood - 1e-12 * cur.log_likelihood.abs() {
                accepted = Some((cand, next));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, next)) = accepted else {
            return Err(Error::NotConverged {
                iterations: iter,
                grad_norm: g_norm,
            });
        };
        let norm = cand.iter().map(|b| b * b).sum::<f64>().sqrt();
        if norm > SEPARATION_BOUND {
            return Err(Error::Separation(norm));
        }
        beta = cand;
        cur = next;
    }
    unreachable!("loop returns by max_iter")
}

/// Fenwick tree of counts over score ranks.
struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's C: over pairs with `T_i < T_j` and `Δ_i = 1`, the fraction with
/// `score_i > score_j`, score ties counting one half.
pub fn concordance_index(scores: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    if scores.len() != times.len() || times.len() != events.len() {
        return Err(invalid(format!(
            "length mismatch: {} scores, {} times, {} events",
            scores.len(),
            times.len(),
            events.len()
        )));
    }
    if scores.iter().chain(times).any(|v| v.is_nan()) {
        return Err(invalid("scores and times must not be NaN"));
    }
    let mut distinct = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    distinct.dedup();
    let rank = |s: f64| distinct.partition_point(|&d| d < s);

    let risk = RiskOrder::new(times, events)?;
    let mut later = Fenwick::new(distinct.len());
    let mut inserted = 0u64;
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    for group in &risk.tie_groups {
        for pos in group.clone() {
            if risk.event_flags[pos] {
                let k = rank(scores[risk.order[pos]]);
                let lower = later.below(k);
                let upto = later.below(k + 1);
                concordant += lower;
                tied += upto - lower;
                comparable += inserted;
            }
        }
        for &i in &risk.order[group.clone()] {
            later.add(rank(scores[i]));
            inserted += 1;
        }
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric("no comparable pairs for the concordance index".into()));
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_case, CaseId, Observation, SimulationSpec};

    fn dataset(rows: &[(f64, bool, Vec<f64>)]) -> SurvivalDataset {
        let obs = rows
            .iter()
            .map(|(t, e, x)| Observation {
                time: *t,
                event: *e,
                covariates: x.clone(),
            })
            .collect();
        SurvivalDataset::new("t", obs).unwrap()
    }

    #[test]
    fn constant_covariates_are_degenerate() {
        let d = dataset(&[
            (1.0, true, vec![2.0]),
            (2.0, true, vec![2.0]),
            (3.0, false, vec![2.0]),
        ]);
        assert!(matches!(fit_linear_cox(&d, 100, 1e-8), Err(Error::DegenerateDesign(_))));
    }

    #[test]
    fn perfectly_separated_data_diverge() {
        // higher covariate always fails first: likelihood increases monotonically in beta
        let d = dataset(&[
            (1.0, true, vec![3.0]),
            (2.0, true, vec![2.0]),
            (3.0, true, vec![1.0]),
            (4.0, true, vec![0.0]),
        ]);
        let err = fit_linear_cox(&d, 200, 1e-8).unwrap_err();
        assert!(matches!(err, Error::Separation(_)), "{err}");
    }

    #[test]
    fn fitted_beta_is_local_maximum() {
        let spec = SimulationSpec::new(CaseId::Linear, 300, 5);
        let d = generate_case(&spec).unwrap();
        let fit = fit_linear_cox(&d, 100, 1e-8).unwrap();
        assert!(fit.gradient_sup_norm < 1e-8);
        for k in 0..d.p0() {
            for h in [-0.01, 0.01] {
                let mut b = fit.beta.clone();
                b[k] += h;
                let ll = linear_cox_derivatives(&d, &b).unwrap().log_likelihood;
                assert!(ll < fit.log_likelihood);
            }
        }
        let eig = linear_cox_derivatives(&d, &fit.beta).unwrap().hessian.symmetric_eigenvalues();
        assert!(eig.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn concordance_examples() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true; 4];
        assert_eq!(concordance_index(&[4.0, 3.0, 2.0, 1.0], &times, &events).unwrap(), 1.0);
        assert_eq!(concordance_index(&[0.0; 4], &times, &events).unwrap(), 0.5);
        assert_eq!(concordance_index(&[1.0, 2.0, 3.0, 4.0], &times, &events).unwrap(), 0.0);
        // only tied event times: incomparable
        assert!(matches!(
            concordance_index(&[1.0, 2.0], &[1.0, 1.0], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(concordance_index(&[1.0], &[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn censored_earlier_subject_is_not_an_anchor() {
        // pair (0,1): subject 0 censored first, not comparable; (1,2) comparable
        let c = concordance_index(&[0.0, 2.0, 1.0], &[1.0, 2.0, 3.0], &[false, true, false]).unwrap();
        assert_eq!(c, 1.0);
    }
}
