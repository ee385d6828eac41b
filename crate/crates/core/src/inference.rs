//! Infinitesimal-jackknife variance and covariance estimates for subsample
//! ensembles, Wald intervals, the admissible subsample-exponent calculator,
//! and a Monte Carlo estimator of the single-overlap covariance.
//!
//! With `J` the `B × n` inclusion matrix and `ĝ^b(x)` the base predictions,
//!
//! ```text
//! Z_bi(x) = (J_bi - J̄_i)(ĝ^b(x) - ĝ_B(x)),   V_i(x) = B⁻¹ Σ_b Z_bi(x)
//! τ̂(x, x') = n(n-1)/(n-r)² { Σ_i V_i(x) V_i(x')
//!            - [B(B-1)]⁻¹ Σ_i Σ_b (Z_bi(x) - V_i(x))(Z_bi(x') - V_i(x')) }
//! ```
//!
//! and `σ̂²(x) = τ̂(x, x)`. The second term removes the Monte Carlo bias from
//! using finitely many subsamples, so the estimate can come out negative;
//! reported variances are then clamped to zero and flagged.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleModel, MAX_REDRAWS};
use crate::error::{invalid, Error, Result};
use crate::seed::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    /// The raw variance estimate was negative and was set to zero.
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    /// `max(raw, 0)`
    pub value: f64,
    pub raw: f64,
    pub clamped: bool,
}

impl VarianceEstimate {
    pub fn from_raw(raw: f64) -> Self {
        if raw < 0.0 {
            Self {
                value: 0.0,
                raw,
                clamped: true,
            }
        } else {
            Self {
                value: raw,
                raw,
                clamped: false,
            }
        }
    }

    pub fn std_error(&self) -> f64 {
        self.value.sqrt()
    }
}

/// Per-point ingredients of the IJ estimator: `V_i` and `Z_bi - V_i`.
#[derive(Debug, Clone)]
pub struct IjComponents {
    v: Array1<f64>,
    residual: Array2<f64>,
}

/// Column-centred inclusion matrix plus the constants of the estimator.
#[derive(Debug, Clone)]
pub struct IjDesign {
    centered: Array2<f64>,
    n: usize,
    r: usize,
}

impl IjDesign {
    /// `inclusion` is the `B × n` 0/1 matrix, `r` the subsample size.
    pub fn new(inclusion: ArrayView2<f64>, r: usize) -> Result<Self> {
        let (b, n) = inclusion.dim();
        if b < 2 {
            return Err(invalid(format!("IJ variance needs B >= 2 subsamples, got {b}")));
        }
        if r >= n {
            return Err(invalid(format!("IJ variance needs r < n, got r = {r}, n = {n}")));
        }
        let col_means = inclusion.mean_axis(Axis(0)).expect("B >= 2");
        let centered = &inclusion - &col_means.insert_axis(Axis(0));
        Ok(Self { centered, n, r })
    }

    pub fn from_model(model: &EnsembleModel) -> Result<Self> {
        Self::new(model.inclusion.as_f64().view(), model.inclusion.r)
    }

    pub fn n_subsamples(&self) -> usize {
        self.centered.nrows()
    }

    /// Components for base predictions `preds` (length `B`).
    pub fn components(&self, preds: ArrayView1<f64>) -> Result<IjComponents> {
        let b = self.n_subsamples();
        if preds.len() != b {
            return Err(invalid(format!("expected {b} base predictions, got {}", preds.len())));
        }
        let mean = preds.sum() / b as f64;
        let dev = preds.mapv(|p| p - mean);
        let z = &self.centered * &dev.view().insert_axis(Axis(1));
        let v = z.sum_axis(Axis(0)) / b as f64;
        let residual = &z - &v.view().insert_axis(Axis(0));
        Ok(IjComponents { v, residual })
    }

    fn scale(&self) -> f64 {
        let (n, r) = (self.n as f64, self.r as f64);
        n * (n - 1.0) / ((n - r) * (n - r))
    }

    /// Unclamped `τ̂` between two points; `covariance(a, a)` is `σ̂²`.
    pub fn covariance(&self, a: &IjComponents, c: &IjComponents) -> f64 {
        let b = self.n_subsamples() as f64;
        let mut leading = 0.0;
        let mut correction = 0.0;
        for i in 0..self.n {
            leading += a.v[i] * c.v[i];
            let ra = a.residual.column(i);
            let rc = c.residual.column(i);
            let mut s = 0.0;
            for (x, y) in ra.iter().zip(rc.iter()) {
                s += x * y;
            }
            correction += s;
        }
        self.scale() * (leading - correction / (b * (b - 1.0)))
    }
}

fn check_b(model: &EnsembleModel) -> Result<()> {
    if model.n_base() < 2 {
        return Err(invalid(format!("IJ variance needs B >= 2, got {}", model.n_base())));
    }
    Ok(())
}

/// `σ̂²(x)`, clamped at zero.
pub fn ij_pointwise_variance(model: &EnsembleModel, x: &[f64]) -> Result<VarianceEstimate> {
    check_b(model)?;
    let design = IjDesign::from_model(model)?;
    let c = design.components(Array1::from(model.base_predictions(x)?).view())?;
    Ok(VarianceEstimate::from_raw(design.covariance(&c, &c)))
}

/// `τ̂(x1, x2)`, unclamped.
pub fn ij_cross_covariance(model: &EnsembleModel, x1: &[f64], x2: &[f64]) -> Result<f64> {
    check_b(model)?;
    let design = IjDesign::from_model(model)?;
    let c1 = design.components(Array1::from(model.base_predictions(x1)?).view())?;
    let c2 = design.components(Array1::from(model.base_predictions(x2)?).view())?;
    Ok(design.covariance(&c1, &c2))
}

/// `σ̂²_{1,2} = σ̂²(x1) + σ̂²(x2) - 2 τ̂(x1, x2)` from unclamped parts, then clamped.
pub fn contrast_variance(model: &EnsembleModel, x1: &[f64], x2: &[f64]) -> Result<VarianceEstimate> {
    check_b(model)?;
    let design = IjDesign::from_model(model)?;
    let c1 = design.components(Array1::from(model.base_predictions(x1)?).view())?;
    let c2 = design.components(Array1::from(model.base_predictions(x2)?).view())?;
    Ok(contrast_from_components(&design, &c1, &c2))
}

pub fn contrast_from_components(design: &IjDesign, c1: &IjComponents, c2: &IjComponents) -> VarianceEstimate {
    let s12 = design.covariance(c1, c2);
    let sigma = [[design.covariance(c1, c1), s12], [s12, design.covariance(c2, c2)]];
    VarianceEstimate::from_raw(quadratic_form([1.0, -1.0], sigma))
}

/// `v'Σv` for a symmetric 2×2 `Σ`.
pub fn quadratic_form(v: [f64; 2], sigma: [[f64; 2]; 2]) -> f64 {
    (v[0] * v[0] * sigma[0][0] + v[1] * v[1] * sigma[1][1]) + 2.0 * v[0] * v[1] * sigma[0][1]
}

/// 2×2 IJ covariance matrix of `(ĝ_B(x1), ĝ_B(x2))`, unclamped.
pub fn ij_covariance_matrix(model: &EnsembleModel, x1: &[f64], x2: &[f64]) -> Result<[[f64; 2]; 2]> {
    check_b(model)?;
    let design = IjDesign::from_model(model)?;
    let c1 = design.components(Array1::from(model.base_predictions(x1)?).view())?;
    let c2 = design.components(Array1::from(model.base_predictions(x2)?).view())?;
    let s12 = design.covariance(&c1, &c2);
    Ok([
        [design.covariance(&c1, &c1), s12],
        [s12, design.covariance(&c2, &c2)],
    ])
}

fn poly(coeffs: &[f64], r: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * r + c)
}

const CENTRAL_NUM: [f64; 8] = [
    3.387132872796366608,
    133.14166789178437745,
    1971.5909503065514427,
    13731.693765509461125,
    45921.953931549871457,
    67265.770927008700853,
    33430.575583588128105,
    2509.0809287301226727,
];
const CENTRAL_DEN: [f64; 8] = [
    1.0,
    42.313330701600911252,
    687.1870074920579083,
    5394.1960214247511077,
    21213.794301586595867,
    39307.89580009271061,
    28729.085735721942674,
    5226.495278852545925,
];
const NEAR_NUM: [f64; 8] = [
    1.42343711074968357734,
    4.6303378461565452959,
    5.7694972214606914055,
    3.64784832476320460504,
    1.27045825245236838258,
    0.24178072517745061177,
    0.0227238449892691845833,
    7.7454501427834140764e-4,
];
const NEAR_DEN: [f64; 8] = [
    1.0,
    2.05319162663775882187,
    1.6763848301838038494,
    0.68976733498510000455,
    0.14810397642748007459,
    0.0151986665636164571966,
    5.475938084995344946e-4,
    1.05075007164441684324e-9,
];
const FAR_NUM: [f64; 8] = [
    6.6579046435011037772,
    5.4637849111641143699,
    1.7848265399172913358,
    0.29656057182850489123,
    0.026532189526576123093,
    0.0012426609473880784386,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
const FAR_DEN: [f64; 8] = [
    1.0,
    0.59983220655588793769,
    0.13692988092273580531,
    0.0148753612908506148525,
    7.868691311456132591e-4,
    1.8463183175100546818e-5,
    1.4215117583164458887e-7,
    2.04426310338993978564e-15,
];

/// Standard normal quantile `Φ⁻¹(p)` (Wichura's AS 241, ~1e-16 relative).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("quantile level must lie in (0,1), got {p}")));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return Ok(q * poly(&CENTRAL_NUM, r) / poly(&CENTRAL_DEN, r));
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        let r = r - 1.6;
        poly(&NEAR_NUM, r) / poly(&NEAR_DEN, r)
    } else {
        let r = r - 5.0;
        poly(&FAR_NUM, r) / poly(&FAR_DEN, r)
    };
    Ok(if q < 0.0 { -value } else { value })
}

/// Two-sided critical value for a `level` interval.
pub fn critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("confidence level must lie in (0,1), got {level}")));
    }
    normal_quantile(1.0 - (1.0 - level) / 2.0)
}

/// `estimate ± z_{1-(1-level)/2} · std_error`.
pub fn wald_interval(estimate: f64, std_error: f64, level: f64) -> Result<InferenceResult> {
    if !(std_error >= 0.0) {
        return Err(invalid(format!("standard error must be >= 0, got {std_error}")));
    }
    let z = critical_value(level)?;
    Ok(InferenceResult {
        estimate,
        std_error,
        ci_lower: estimate - z * std_error,
        ci_upper: estimate + z * std_error,
        level,
        clamped: false,
    })
}

/// Wald interval from an IJ variance, carrying its clamp flag.
pub fn wald_from_variance(estimate: f64, variance: VarianceEstimate, level: f64) -> Result<InferenceResult> {
    let mut res = wald_interval(estimate, variance.std_error(), level)?;
    res.clamped = variance.clamped;
    Ok(res)
}

/// Hazard-ratio interval `[exp(L), exp(U)]` from a log-hazard contrast interval.
pub fn relative_risk_interval(contrast: &InferenceResult) -> (f64, f64) {
    (contrast.ci_lower.exp(), contrast.ci_upper.exp())
}

/// Pointwise inference at `x`: ensemble estimate with IJ Wald interval.
pub fn infer_point(model: &EnsembleModel, x: &[f64], level: f64) -> Result<InferenceResult> {
    let design = IjDesign::from_model(model)?;
    let preds = Array1::from(model.base_predictions(x)?);
    let estimate = preds.sum() / preds.len() as f64;
    let c = design.components(preds.view())?;
    wald_from_variance(estimate, VarianceEstimate::from_raw(design.covariance(&c, &c)), level)
}

/// Contrast inference for `g(x1) - g(x2)`.
pub fn infer_contrast(model: &EnsembleModel, x1: &[f64], x2: &[f64], level: f64) -> Result<InferenceResult> {
    let design = IjDesign::from_model(model)?;
    let p1 = Array1::from(model.base_predictions(x1)?);
    let p2 = Array1::from(model.base_predictions(x2)?);
    let b = p1.len() as f64;
    let estimate = p1.sum() / b - p2.sum() / b;
    let c1 = design.components(p1.view())?;
    let c2 = design.components(p2.view())?;
    wald_from_variance(estimate, contrast_from_components(&design, &c1, &c2), level)
}

/// Monte Carlo estimate of the single-overlap covariance
/// `Cov{ĝ(x1; D1, D2..Dr), ĝ(x2; D1, D2'..Dr')}`.
///
/// Each replicate draws `D1` once and two independent completions of size
/// `r - 1`. A completion on which `estimator` reports a degenerate
/// likelihood is redrawn (up to [`MAX_REDRAWS`] times).
pub fn single_overlap_cov_mc<D, G, E>(
    estimator: E,
    generator: G,
    r: usize,
    x1: &[f64],
    x2: &[f64],
    reps: usize,
    seed: u64,
) -> Result<f64>
where
    D: Clone + Send,
    G: Fn(&mut rand_chacha::ChaCha8Rng) -> D + Sync,
    E: Fn(&[D], &[f64]) -> Result<f64> + Sync,
{
    if reps < 2 {
        return Err(invalid(format!("need at least 2 replicates, got {reps}")));
    }
    if r == 0 {
        return Err(invalid("subsample size must be >= 1"));
    }
    let fit = |shared: &D, x: &[f64], rep: usize, side: u64| -> Result<f64> {
        for attempt in 0..MAX_REDRAWS as u64 {
            let mut rng = rng_from(seed, &[rep as u64, side, attempt]);
            let mut sample = Vec::with_capacity(r);
            sample.push(shared.clone());
            sample.extend((1..r).map(|_| generator(&mut rng)));
            match estimator(&sample, x) {
                Err(Error::DegenerateLikelihood) => continue,
                other => return other,
            }
        }
        Err(Error::DegenerateData(format!(
            "replicate {rep}: {MAX_REDRAWS} consecutive completions were degenerate"
        )))
    };
    let pairs = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng_from(seed, &[rep as u64, 0]);
            let shared = generator(&mut rng);
            Ok((fit(&shared, x1, rep, 1)?, fit(&shared, x2, rep, 2)?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let k = pairs.len() as f64;
    let (ma, mb) = pairs
        .iter()
        .fold((0.0, 0.0), |(sa, sb), (a, b)| (sa + a, sb + b));
    let (ma, mb) = (ma / k, mb / k);
    let cov = pairs.iter().map(|(a, b)| (a - ma) * (b - mb)).sum::<f64>() / (k - 1.0);
    Ok(cov)
}

/// Composite-smoothness inputs of the subsample-exponent calculator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    /// Number of composition levels minus one.
    pub q: usize,
    /// Effective input dimensions `t_0..t_q`.
    pub t: Vec<u32>,
    /// Hölder smoothness `γ_0..γ_q`.
    pub gamma: Vec<f64>,
    /// Overparameterisation exponent.
    pub delta: f64,
    /// Bias-domination slack `ξ ∈ (0,1)`.
    pub xi: f64,
    /// Single-overlap covariance decay exponent.
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRange {
    pub gamma_star: Vec<f64>,
    pub level_rates: Vec<f64>,
    pub c_eff: f64,
    pub i_eff: usize,
    pub eta: f64,
    pub m0: f64,
    pub alpha_lower: f64,
    pub alpha_upper: f64,
    pub delta_lower: f64,
    pub delta_upper: f64,
    pub delta_admissible: bool,
    pub nu_lower: f64,
    pub nu_upper: f64,
    pub nu_admissible: bool,
    /// `alpha_lower < alpha_upper`
    pub nonempty: bool,
    /// Lower bound on α required for IJ variance consistency.
    pub ij_alpha_lower: f64,
}

pub fn alpha_range(params: &RateParams) -> Result<AlphaRange> {
    let levels = params.q + 1;
    if params.t.len() != levels || params.gamma.len() != levels {
        return Err(invalid(format!(
            "t and gamma must have length q + 1 = {levels}, got {} and {}",
            params.t.len(),
            params.gamma.len()
        )));
    }
    if params.t.contains(&0) {
        return Err(invalid("all t_i must be positive"));
    }
    if params.gamma.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
        return Err(invalid("all gamma_i must be positive and finite"));
    }
    if !(params.xi > 0.0 && params.xi < 1.0) {
        return Err(invalid(format!("xi must lie in (0,1), got {}", params.xi)));
    }
    if !(params.delta >= 0.0 && params.delta.is_finite()) || !params.nu.is_finite() {
        return Err(invalid("delta must be finite and >= 0, nu finite"));
    }

    let gamma_star: Vec<f64> = (0..levels)
        .map(|i| {
            params.gamma[i]
                * params.gamma[i + 1..]
                    .iter()
                    .map(|&g| g.min(1.0))
                    .product::<f64>()
        })
        .collect();
    let level_rates: Vec<f64> = gamma_star
        .iter()
        .zip(&params.t)
        .map(|(&gs, &t)| 2.0 * gs / (2.0 * gs + t as f64))
        .collect();
    let mut i_eff = 0;
    for (i, &rate) in level_rates.iter().enumerate() {
        if rate < level_rates[i_eff] {
            i_eff = i;
        }
    }
    let c_eff = level_rates[i_eff];
    let eta = 2.0 * params.delta * gamma_star[i_eff] / (params.t[i_eff] as f64 * c_eff);
    let m0 = c_eff * (1.0 + eta) * (1.0 - params.xi);
    let delta_lower = c_eff * (1.0 - c_eff) / (2.0 - c_eff);
    let delta_upper = c_eff;
    let nu_lower = 1.0;
    let nu_upper = 1.0 + m0 / 2.0;
    let alpha_lower = 1.0 / (2.0 - params.nu + m0);
    let alpha_upper = 1.0 / (params.nu + c_eff - params.delta);
    Ok(AlphaRange {
        gamma_star,
        level_rates,
        c_eff,
        i_eff,
        eta,
        m0,
        alpha_lower,
        alpha_upper,
        delta_lower,
        delta_upper,
        delta_admissible: params.delta > delta_lower && params.delta < delta_upper,
        nu_lower,
        nu_upper,
        nu_admissible: params.nu > nu_lower && params.nu < nu_upper,
        nonempty: alpha_lower < alpha_upper,
        ij_alpha_lower: 0.5,
    })
}

impl AlphaRange {
    /// Plain-text diagnostic report.
    pub fn report(&self) -> String {
        let flag = |ok: bool| if ok { "ok" } else { "OUTSIDE WINDOW" };
        let mut s = String::new();
        s.push_str(&format!("gamma_star      = {:?}\n", self.gamma_star));
        s.push_str(&format!("level rates     = {:?}\n", self.level_rates));
        s.push_str(&format!("c_eff           = {}\n", self.c_eff));
        s.push_str(&format!("i_eff           = {}\n", self.i_eff));
        s.push_str(&format!("eta             = {}\n", self.eta));
        s.push_str(&format!("m0              = {}\n", self.m0));
        s.push_str(&format!(
            "delta window    = ({}, {}) [{}]\n",
            self.delta_lower,
            self.delta_upper,
            flag(self.delta_admissible)
        ));
        s.push_str(&format!(
            "nu window       = ({}, {}) [{}]\n",
            self.nu_lower,
            self.nu_upper,
            flag(self.nu_admissible)
        ));
        s.push_str(&format!("alpha_lower     = {}\n", self.alpha_lower));
        s.push_str(&format!("alpha_upper     = {}\n", self.alpha_upper));
        s.push_str(&format!(
            "alpha interval  = {}\n",
            if self.nonempty { "nonempty" } else { "EMPTY" }
        ));
        s.push_str(&format!(
            "IJ consistency requires alpha > {} (and alpha < alpha_upper)\n",
            self.ij_alpha_lower
        ));
        s
    }
}
