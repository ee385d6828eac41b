//! Monte Carlo coverage study over a grid of cases, sample sizes and
//! subsample exponents.
//!
//! The test set of each case is drawn once and shared by every cell and
//! replication. Dataset and ensemble seeds depend on `(case, n, rep)` only, so
//! cells that differ in α see the same simulated data.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::fit_linear_cox;
use crate::data::{design_censoring_rate, draw_covariates, generate_with_rate, CaseId, SimulationSpec};
use crate::ensemble::{fit_ensemble, subsample_size};
use crate::error::{invalid, Error, Result};
use crate::inference::{contrast_from_components, critical_value, IjDesign, VarianceEstimate};
use crate::metrics::{evaluate_pointwise, evaluate_pointwise_lenient, per_point_sd_se, MetricsRow};
use crate::net::NetworkConfig;
use crate::seed::{derive_seed, rng_from};
use crate::trainer::TrainConfig;

/// Contrast pairs must have both true values in this range.
pub const PAIR_VALUE_RANGE: (f64, f64) = (-1.5, 2.0);
pub const PAIR_GAP: f64 = 1.0;
pub const PAIR_GAP_TOL: f64 = 0.1;

fn default_pairs() -> usize {
    10
}
fn default_level() -> f64 {
    0.95
}
fn default_censor() -> f64 {
    0.30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub cases: Vec<CaseId>,
    pub ns: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Subsamples per ensemble.
    pub b: usize,
    pub replications: usize,
    pub test_points: usize,
    #[serde(default = "default_pairs")]
    pub contrast_pairs: usize,
    /// Hidden-layer widths; input width is the covariate dimension.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_censor")]
    pub censor_rate_target: f64,
    pub seed: u64,
    #[serde(default)]
    pub include_coxph: bool,
}

impl StudyConfig {
    /// The scaled-down coverage study: Case 1, n = 400, B = 200, R = 100,
    /// m = 20, α ∈ {0.7, 0.9}, with a small network.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            cases: vec![CaseId::Linear],
            ns: vec![400],
            alphas: vec![0.7, 0.9],
            b: 200,
            replications: 100,
            test_points: 20,
            contrast_pairs: default_pairs(),
            hidden: vec![16, 8],
            train: TrainConfig {
                learning_rate: 0.01,
                epochs: 200,
                ..TrainConfig::default()
            },
            level: default_level(),
            censor_rate_target: default_censor(),
            seed,
            include_coxph: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cases.is_empty() || self.ns.is_empty() || self.alphas.is_empty() {
            return Err(invalid("cases, ns and alphas must be non-empty"));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(invalid(format!("alpha must lie in (0,1), got {a}")));
        }
        if self.ns.iter().any(|&n| n < 4) {
            return Err(invalid("every n must be >= 4"));
        }
        if self.b < 2 {
            return Err(invalid(format!("B must be >= 2, got {}", self.b)));
        }
        if self.replications == 0 || self.test_points == 0 {
            return Err(invalid("replications and test_points must be >= 1"));
        }
        critical_value(self.level)?;
        self.train.validate()?;
        self.network(10).validate()
    }

    fn network(&self, p0: usize) -> NetworkConfig {
        let mut widths = vec![p0];
        widths.extend(&self.hidden);
        widths.push(1);
        let mut net = NetworkConfig::new(widths, 0);
        net.dropout_rate = self.train.dropout_rate;
        net.weight_decay = self.train.weight_decay;
        net
    }
}

/// Fixed evaluation points of one case and the contrast pairs among them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub points: Array2<f64>,
    pub truths: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub pair_truths: Vec<f64>,
}

impl TestSet {
    pub fn draw(case: CaseId, m: usize, quota: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[0x7E57, case.number() as u64]);
        let rows: Vec<Vec<f64>> = (0..m).map(|_| draw_covariates(&mut rng)).collect();
        let p0 = rows[0].len();
        let points = Array2::from_shape_fn((m, p0), |(i, j)| rows[i][j]);
        let truths: Vec<f64> = rows.iter().map(|x| case.risk(x)).collect();
        let pairs = select_pairs(&truths, quota);
        let pair_truths = pairs.iter().map(|&(i, j)| truths[i] - truths[j]).collect();
        Self {
            points,
            truths,
            pairs,
            pair_truths,
        }
    }
}

/// Ordered pairs `(i, j)` in lexicographic order with both values inside
/// [`PAIR_VALUE_RANGE`] and `|g_i - g_j - 1| <= 0.1`, up to `quota`.
pub fn select_pairs(truths: &[f64], quota: usize) -> Vec<(usize, usize)> {
    let ok = |v: f64| (PAIR_VALUE_RANGE.0..=PAIR_VALUE_RANGE.1).contains(&v);
    let mut out = Vec::new();
    for i in 0..truths.len() {
        for j in 0..truths.len() {
            if out.len() == quota {
                return out;
            }
            if i != j && ok(truths[i]) && ok(truths[j]) && (truths[i] - truths[j] - PAIR_GAP).abs() <= PAIR_GAP_TOL {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Pointwise,
    Contrast,
}

impl Target {
    fn as_str(self) -> &'static str {
        match self {
            Target::Pointwise => "pointwise",
            Target::Contrast => "contrast",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Esm,
    Coxph,
}

impl Method {
    fn as_str(self) -> &'static str {
        match self {
            Method::Esm => "esm",
            Method::Coxph => "coxph",
        }
    }
}

/// Estimates and standard errors of one method in one replication.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Estimates {
    pub point_est: Vec<f64>,
    pub point_se: Vec<f64>,
    pub point_clamped: Vec<bool>,
    pub contrast_est: Vec<f64>,
    pub contrast_se: Vec<f64>,
    pub contrast_clamped: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub esm: Estimates,
    pub coxph: Option<Estimates>,
    /// Base learners passing the training-budget check.
    pub budget_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub method: Method,
    pub target: Target,
    pub row: MetricsRow,
    pub clamped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub case: CaseId,
    pub n: usize,
    pub alpha: f64,
    pub r: usize,
    pub metrics: Vec<CellMetrics>,
    /// Per test point `(EmpSD, mean SE)` for the ensemble.
    pub per_point: Vec<(f64, f64)>,
    pub replications: Vec<Replication>,
    pub failed_replications: Vec<(usize, String)>,
    /// Set when the cell produced no metrics at all.
    pub error: Option<String>,
}

impl CellResult {
    pub fn metric(&self, method: Method, target: Target) -> Option<&MetricsRow> {
        self.metrics
            .iter()
            .find(|m| m.method == method && m.target == target)
            .map(|m| &m.row)
    }

    pub fn failed(&self) -> bool {
        self.error.is_some() || !self.failed_replications.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub test_sets: Vec<(CaseId, TestSet)>,
    pub cells: Vec<CellResult>,
}

impl StudyReport {
    pub fn cell(&self, case: CaseId, n: usize, alpha: f64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.case == case && c.n == n && c.alpha == alpha)
    }
}

fn replication(
    config: &StudyConfig,
    case: CaseId,
    n: usize,
    r: usize,
    rep: usize,
    mu: f64,
    test: &TestSet,
) -> Result<Replication> {
    let key = [case.number() as u64, n as u64, rep as u64];
    let spec = SimulationSpec {
        case_id: case,
        n,
        censor_rate_target: config.censor_rate_target,
        seed: derive_seed(config.seed, &[0xDA7A, key[0], key[1], key[2]]),
    };
    let data = generate_with_rate(&spec, mu)?;
    let net = config.network(data.p0());
    let ens_seed = derive_seed(config.seed, &[0xE115, key[0], key[1], key[2]]);
    let model = fit_ensemble(&data, &net, &config.train, r, config.b, ens_seed)?;

    let preds = model.base_prediction_matrix(test.points.view())?;
    let design = IjDesign::from_model(&model)?;
    let comps = preds
        .axis_iter(Axis(1))
        .map(|col| design.components(col))
        .collect::<Result<Vec<_>>>()?;
    let means = preds.mean_axis(Axis(0)).expect("B >= 2");
    let mut esm = Estimates::default();
    for (j, c) in comps.iter().enumerate() {
        let v = VarianceEstimate::from_raw(design.covariance(c, c));
        esm.point_est.push(means[j]);
        esm.point_se.push(v.std_error());
        esm.point_clamped.push(v.clamped);
    }
    for &(i, j) in &test.pairs {
        let v = contrast_from_components(&design, &comps[i], &comps[j]);
        esm.contrast_est.push(means[i] - means[j]);
        esm.contrast_se.push(v.std_error());
        esm.contrast_clamped.push(v.clamped);
    }

    let coxph = if config.include_coxph {
        let fit = fit_linear_cox(&data, 100, 1e-8)?;
        let mut est = Estimates::default();
        for x in test.points.rows() {
            let x = x.to_vec();
            est.point_est.push(fit.predict(&x)?);
            est.point_se.push(fit.linear_se(&x)?);
            est.point_clamped.push(false);
        }
        for &(i, j) in &test.pairs {
            let d: Vec<f64> = test.points.row(i).iter().zip(test.points.row(j)).map(|(a, b)| a - b).collect();
            est.contrast_est.push(fit.predict(&d)?);
            est.contrast_se.push(fit.linear_se(&d)?);
            est.contrast_clamped.push(false);
        }
        Some(est)
    } else {
        None
    };
    Ok(Replication {
        rep,
        esm,
        coxph,
        budget_ok: model.meta.budget_ok,
    })
}

fn table(rows: &[&Vec<f64>]) -> Array2<f64> {
    let m = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), m), |(i, j)| rows[i][j])
}

fn summarize(
    label: &str,
    method: Method,
    target: Target,
    reps: &[&Estimates],
    truths: &[f64],
    level: f64,
) -> Result<Option<CellMetrics>> {
    if truths.is_empty() {
        return Ok(None);
    }
    let (est, se, clamped): (Vec<_>, Vec<_>, Vec<_>) = match target {
        Target::Pointwise => reps.iter().map(|e| (&e.point_est, &e.point_se, &e.point_clamped)).fold(
            (vec![], vec![], vec![]),
            |mut acc, (a, b, c)| {
                acc.0.push(a);
                acc.1.push(b);
                acc.2.push(c);
                acc
            },
        ),
        Target::Contrast => reps.iter().map(|e| (&e.contrast_est, &e.contrast_se, &e.contrast_clamped)).fold(
            (vec![], vec![], vec![]),
            |mut acc, (a, b, c)| {
                acc.0.push(a);
                acc.1.push(b);
                acc.2.push(c);
                acc
            },
        ),
    };
    let (est, se) = (table(&est), table(&se));
    let row = if reps.len() >= 2 {
        evaluate_pointwise(label, est.view(), se.view(), truths, level)?
    } else {
        evaluate_pointwise_lenient(label, est.view(), se.view(), truths, level)?
    };
    let total: usize = clamped.iter().map(|c| c.len()).sum();
    let n_clamped: usize = clamped.iter().map(|c| c.iter().filter(|&&b| b).count()).sum();
    Ok(Some(CellMetrics {
        method,
        target,
        row,
        clamped_fraction: n_clamped as f64 / total.max(1) as f64,
    }))
}

fn cell_metrics(config: &StudyConfig, label: &str, reps: &[Replication], test: &TestSet) -> Result<(Vec<CellMetrics>, Vec<(f64, f64)>)> {
    let mut out = Vec::new();
    let esm: Vec<&Estimates> = reps.iter().map(|r| &r.esm).collect();
    for (target, truths) in [(Target::Pointwise, &test.truths), (Target::Contrast, &test.pair_truths)] {
        out.extend(summarize(label, Method::Esm, target, &esm, truths, config.level)?);
    }
    if config.include_coxph {
        let cox: Vec<&Estimates> = reps.iter().filter_map(|r| r.coxph.as_ref()).collect();
        for (target, truths) in [(Target::Pointwise, &test.truths), (Target::Contrast, &test.pair_truths)] {
            out.extend(summarize(label, Method::Coxph, target, &cox, truths, config.level)?);
        }
    }
    let per_point = if reps.len() >= 2 {
        let est = table(&esm.iter().map(|e| &e.point_est).collect::<Vec<_>>());
        let se = table(&esm.iter().map(|e| &e.point_se).collect::<Vec<_>>());
        per_point_sd_se(est.view(), se.view())?
    } else {
        Vec::new()
    };
    Ok((out, per_point))
}

/// Run every `(case, n, α)` cell. Replication failures are recorded in the
/// cell and do not abort the grid.
pub fn run_monte_carlo(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let mut test_sets = Vec::new();
    let mut cells = Vec::new();
    for &case in &config.cases {
        let test = TestSet::draw(case, config.test_points, config.contrast_pairs, config.seed);
        if test.pairs.len() < config.contrast_pairs {
            log::warn!(
                "case {case}: only {} of {} contrast pairs satisfy the selection filter",
                test.pairs.len(),
                config.contrast_pairs
            );
        }
        let mu = design_censoring_rate(case, config.censor_rate_target)?;
        for &n in &config.ns {
            for &alpha in &config.alphas {
                let r = subsample_size(n, alpha);
                let label = format!("case{case}_n{n}_alpha{alpha}");
                log::info!("{label}: r = {r}, B = {}, R = {}", config.b, config.replications);
                let results: Vec<Result<Replication>> = (0..config.replications)
                    .into_par_iter()
                    .map(|rep| replication(config, case, n, r, rep, mu, &test))
                    .collect();
                let mut replications = Vec::new();
                let mut failed_replications = Vec::new();
                for (rep, res) in results.into_iter().enumerate() {
                    match res {
                        Ok(rep_out) => replications.push(rep_out),
                        Err(e) => {
                            log::warn!("{label} replication {rep}: {e}");
                            failed_replications.push((rep, e.to_string()));
                        }
                    }
                }
                let (metrics, per_point, error) = if replications.is_empty() {
                    (Vec::new(), Vec::new(), Some("all replications failed".to_string()))
                } else {
                    match cell_metrics(config, &label, &replications, &test) {
                        Ok((m, p)) => (m, p, None),
                        Err(e) => (Vec::new(), Vec::new(), Some(e.to_string())),
                    }
                };
                cells.push(CellResult {
                    case,
                    n,
                    alpha,
                    r,
                    metrics,
                    per_point,
                    replications,
                    failed_replications,
                    error,
                });
            }
        }
        test_sets.push((case, test));
    }
    Ok(StudyReport {
        config: config.clone(),
        test_sets,
        cells,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Metrics table in CSV form, one row per cell, method and target.
pub fn metrics_csv(report: &StudyReport) -> String {
    let mut s = String::from("case,n,alpha,r,method,target,replications,bias,mae,emp_sd,se,cp,ail,clamped_fraction,failed_replications,error\n");
    for c in &report.cells {
        let reps = c.replications.len();
        if c.metrics.is_empty() {
            let _ = writeln!(
                s,
                "{},{},{},{},,,{},,,,,,,,{},\"{}\"",
                c.case,
                c.n,
                c.alpha,
                c.r,
                reps,
                c.failed_replications.len(),
                c.error.as_deref().unwrap_or("").replace('"', "'")
            );
        }
        for m in &c.metrics {
            let row = &m.row;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},",
                c.case,
                c.n,
                c.alpha,
                c.r,
                m.method.as_str(),
                m.target.as_str(),
                reps,
                row.bias,
                row.mae,
                opt(row.emp_sd),
                row.mean_se,
                row.coverage,
                row.avg_interval_length,
                m.clamped_fraction,
                c.failed_replications.len()
            );
        }
    }
    s
}

/// Raw per-replication estimates.
pub fn replications_csv(report: &StudyReport) -> Result<String> {
    let z = critical_value(report.config.level)?;
    let mut s = String::from("case,n,alpha,rep,method,target,index,truth,estimate,se,ci_lo,ci_hi,clamped\n");
    for c in &report.cells {
        let test = &report
            .test_sets
            .iter()
            .find(|(case, _)| *case == c.case)
            .expect("test set per case")
            .1;
        for rep in &c.replications {
            let methods = [(Method::Esm, Some(&rep.esm)), (Method::Coxph, rep.coxph.as_ref())];
            for (method, est) in methods {
                let Some(e) = est else { continue };
                let blocks = [
                    (Target::Pointwise, &e.point_est, &e.point_se, &e.point_clamped, &test.truths),
                    (Target::Contrast, &e.contrast_est, &e.contrast_se, &e.contrast_clamped, &test.pair_truths),
                ];
                for (target, ests, ses, cl, truths) in blocks {
                    for k in 0..ests.len() {
                        let _ = writeln!(
                            s,
                            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                            c.case,
                            c.n,
                            c.alpha,
                            rep.rep,
                            method.as_str(),
                            target.as_str(),
                            k,
                            truths[k],
                            ests[k],
                            ses[k],
                            ests[k] - z * ses[k],
                            ests[k] + z * ses[k],
                            cl[k]
                        );
                    }
                }
            }
        }
    }
    Ok(s)
}

/// Write `metrics.csv`, `replications.csv`, `test_set.csv`, `study.json` and
/// gnuplot `x y` files for coverage against α and SE against EmpSD.
pub fn write_study_outputs(report: &StudyReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(report))?;
    write_file(&dir.join("replications.csv"), &replications_csv(report)?)?;
    let cfg_path = dir.join("study.json");
    let cfg = serde_json::to_string_pretty(&report.config).map_err(|e| Error::json(&cfg_path, e))?;
    write_file(&cfg_path, &cfg)?;

    let mut tests = String::from("case,kind,index,i,j,truth\n");
    for (case, t) in &report.test_sets {
        for (k, g) in t.truths.iter().enumerate() {
            let _ = writeln!(tests, "{case},point,{k},{k},,{g}");
        }
        for (k, ((i, j), g)) in t.pairs.iter().zip(&t.pair_truths).enumerate() {
            let _ = writeln!(tests, "{case},contrast,{k},{i},{j},{g}");
        }
    }
    write_file(&dir.join("test_set.csv"), &tests)?;

    for &case in &report.config.cases {
        for &n in &report.config.ns {
            for method in [Method::Esm, Method::Coxph] {
                for target in [Target::Pointwise, Target::Contrast] {
                    let mut dat = format!("# case {case} n {n} {} {}: alpha coverage\n", method.as_str(), target.as_str());
                    let mut any = false;
                    for c in report.cells.iter().filter(|c| c.case == case && c.n == n) {
                        if let Some(m) = c.metric(method, target) {
                            let _ = writeln!(dat, "{} {}", c.alpha, m.coverage);
                            any = true;
                        }
                    }
                    if any {
                        let name = format!("coverage_vs_alpha_case{case}_n{n}_{}_{}.dat", method.as_str(), target.as_str());
                        write_file(&dir.join(name), &dat)?;
                    }
                }
            }
        }
    }
    for c in &report.cells {
        if c.per_point.is_empty() {
            continue;
        }
        let mut dat = format!("# case {} n {} alpha {}: empsd se\n", c.case, c.n, c.alpha);
        for (sd, se) in &c.per_point {
            let _ = writeln!(dat, "{sd} {se}");
        }
        write_file(&dir.join(format!("se_vs_empsd_case{}_n{}_alpha{}.dat", c.case, c.n, c.alpha)), &dat)?;
    }
    Ok(())
}

/// Human-readable summary table.
pub fn summary_table(report: &StudyReport) -> String {
    let mut s = format!(
        "{:<6}{:>6}{:>7}{:>6} {:<7}{:<10}{:>8}{:>8}{:>8}{:>8}{:>7}{:>8}\n",
        "case", "n", "alpha", "r", "method", "target", "bias", "mae", "empsd", "se", "cp", "ail"
    );
    for c in &report.cells {
        for m in &c.metrics {
            let r = &m.row;
            let _ = writeln!(
                s,
                "{:<6}{:>6}{:>7}{:>6} {:<7}{:<10}{:>8.3}{:>8.3}{:>8}{:>8.3}{:>7.3}{:>8.3}",
                c.case.to_string(),
                c.n,
                c.alpha,
                c.r,
                m.method.as_str(),
                m.target.as_str(),
                r.bias,
                r.mae,
                r.emp_sd.map(|v| format!("{v:.3}")).unwrap_or_else(|| "NA".into()),
                r.mean_se,
                r.coverage,
                r.avg_interval_length
            );
        }
        if let Some(e) = &c.error {
            let _ = writeln!(s, "case {} n {} alpha {}: FAILED ({e})", c.case, c.n, c.alpha);
        }
    }
    s
}
