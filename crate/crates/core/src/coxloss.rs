//! Negative log partial likelihood and its score.
//!
//! Risk sets are inclusive (`{j : T_j >= T_i}`), i.e. the Breslow convention
//! for tied times. Both the loss and the score are computed from one sorted
//! pass with max-shifted log-sum-exp accumulation.

use std::cmp::Ordering;
use std::ops::Range;

use crate::error::{invalid, Error, Result};

/// Observation indices sorted by time, descending, with tie groups.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskOrder {
    pub order: Vec<usize>,
    pub event_flags: Vec<bool>,
    /// Ranges into `order` of equal times; they partition `0..n`.
    pub tie_groups: Vec<Range<usize>>,
}

impl RiskOrder {
    pub fn new(times: &[f64], events: &[bool]) -> Result<Self> {
        if times.len() != events.len() {
            return Err(invalid(format!(
                "{} times but {} event flags",
                times.len(),
                events.len()
            )));
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[b].partial_cmp(&times[a]).unwrap_or(Ordering::Equal));
        let event_flags = order.iter().map(|&i| events[i]).collect();
        let mut tie_groups = Vec::new();
        let mut start = 0;
        for k in 1..=order.len() {
            if k == order.len() || times[order[k]] != times[order[start]] {
                tie_groups.push(start..k);
                start = k;
            }
        }
        Ok(Self {
            order,
            event_flags,
            tie_groups,
        })
    }
}

/// Running `log Σ exp(v)` with a moving maximum.
#[derive(Debug, Clone, Copy)]
struct LogSumExp {
    max: f64,
    scaled: f64,
}

impl LogSumExp {
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            scaled: 0.0,
        }
    }

    fn push(&mut self, v: f64) {
        if v > self.max {
            self.scaled = self.scaled * (self.max - v).exp() + 1.0;
            self.max = v;
        } else {
            self.scaled += (v - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        self.max + self.scaled.ln()
    }
}

fn check_inputs(scores: &[f64], times: &[f64], events: &[bool]) -> Result<()> {
    if scores.len() != times.len() || times.len() != events.len() {
        return Err(invalid(format!(
            "length mismatch: {} scores, {} times, {} events",
            scores.len(),
            times.len(),
            events.len()
        )));
    }
    if !events.iter().any(|&e| e) {
        return Err(Error::DegenerateLikelihood);
    }
    Ok(())
}

/// `log Σ_{j: T_j >= T_i} exp(g_j)` for every position of `risk.order`.
fn log_risk_sums(scores: &[f64], risk: &RiskOrder) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    let mut acc = LogSumExp::new();
    for group in &risk.tie_groups {
        for &i in &risk.order[group.clone()] {
            acc.push(scores[i]);
        }
        let v = acc.value();
        for pos in group.clone() {
            out[pos] = v;
        }
    }
    out
}

/// `-L_n(g) = -n⁻¹ Σ_i Δ_i [g_i - log Σ_{j: T_j >= T_i} exp(g_j)]`.
pub fn neg_log_partial_likelihood(scores: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    check_inputs(scores, times, events)?;
    let risk = RiskOrder::new(times, events)?;
    Ok(nll_sorted(scores, &risk))
}

pub(crate) fn nll_sorted(scores: &[f64], risk: &RiskOrder) -> f64 {
    let log_sums = log_risk_sums(scores, risk);
    let mut total = 0.0;
    for (pos, &i) in risk.order.iter().enumerate() {
        if risk.event_flags[pos] {
            total += scores[i] - log_sums[pos];
        }
    }
    -total / scores.len() as f64
}

/// Literal O(n²) evaluation of the negative log partial likelihood.
/// Reference only: it exponentiates raw scores and can overflow.
pub fn brute_force_likelihood(scores: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    check_inputs(scores, times, events)?;
    let n = scores.len();
    let mut total = 0.0;
    for i in 0..n {
        if !events[i] {
            continue;
        }
        let mut risk_sum = 0.0;
        for j in 0..n {
            if times[j] >= times[i] {
                risk_sum += scores[j].exp();
            }
        }
        total += scores[i] - risk_sum.ln();
    }
    Ok(-total / n as f64)
}

/// `∂(-L_n)/∂g_k = -n⁻¹ [Δ_k - Σ_{i: T_i <= T_k, Δ_i = 1} exp(g_k) / Σ_{j: T_j >= T_i} exp(g_j)]`.
pub fn partial_likelihood_score(scores: &[f64], times: &[f64], events: &[bool]) -> Result<Vec<f64>> {
    check_inputs(scores, times, events)?;
    let risk = RiskOrder::new(times, events)?;
    Ok(score_sorted(scores, &risk))
}

pub(crate) fn score_sorted(scores: &[f64], risk: &RiskOrder) -> Vec<f64> {
    let n = scores.len();
    let log_sums = log_risk_sums(scores, risk);
    let mut grad = vec![0.0; n];
    // ascending sweep: log Σ_{events i, T_i <= t} 1 / S_i
    let mut hazard = LogSumExp::new();
    for group in risk.tie_groups.iter().rev() {
        for pos in group.clone() {
            if risk.event_flags[pos] {
                hazard.push(-log_sums[pos]);
            }
        }
        let log_cum = hazard.value();
        for pos in group.clone() {
            let k = risk.order[pos];
            let expected = if log_cum == f64::NEG_INFINITY {
                0.0
            } else {
                (scores[k] + log_cum).exp()
            };
            let delta = if risk.event_flags[pos] { 1.0 } else { 0.0 };
            grad[k] = -(delta - expected) / n as f64;
        }
    }
    grad
}
