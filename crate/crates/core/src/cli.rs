//! `deepcox` command-line interface.
//!
//! Every command reads a JSON config (`--config`); relative paths inside a
//! config are resolved against the config file's directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::fit_linear_cox;
use crate::data::{
    design_censoring_rate, draw_observation, generate_with_rate, load_dataset, load_points, CaseId, Observation,
    SimulationSpec, SurvivalDataset,
};
use crate::ensemble::{fit_ensemble, subsample_size, EnsembleModel};
use crate::error::{invalid, Error, Result};
use crate::inference::{alpha_range, infer_contrast, infer_point, relative_risk_interval, single_overlap_cov_mc, RateParams};
use crate::net::NetworkConfig;
use crate::seed::derive_seed;
use crate::study::{run_monte_carlo, summary_table, write_study_outputs, StudyConfig};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "deepcox", version, about = "Deep Cox regression with subsample-ensemble inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Confidence level of reported intervals [default: 0.95].
    #[arg(long, global = true)]
    level: Option<f64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Simulate a survival dataset from one of the three designs.
    Simulate,
    /// Train a subsample ensemble on a CSV dataset.
    Fit,
    /// Ensemble predictions at query points.
    Predict,
    /// Predictions with IJ standard errors and Wald intervals; optional contrasts.
    Infer,
    /// Admissible subsample-exponent window from smoothness parameters.
    AlphaRange,
    /// Monte Carlo coverage study.
    Benchmark,
    /// Monte Carlo estimate of the single-overlap covariance.
    OracleZeta,
}

/// Run the CLI on `args` (including the program name) and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: could not start thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let config = cli
        .config
        .as_deref()
        .ok_or_else(|| invalid("--config <path> is required"))?;
    match cli.command {
        Command::Simulate => simulate(cli, config),
        Command::Fit => fit(cli, config),
        Command::Predict => predict(cli, config),
        Command::Infer => infer(cli, config),
        Command::AlphaRange => alpha_range_cmd(cli, config),
        Command::Benchmark => benchmark(cli, config),
        Command::OracleZeta => oracle_zeta(cli, config),
    }
}

fn read_config<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn resolve(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new("")).join(p)
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli.out.as_deref().ok_or_else(|| invalid("--out <dir> is required"))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn level(cli: &Cli, fallback: f64) -> f64 {
    cli.level.unwrap_or(fallback)
}

fn one() -> usize {
    1
}

fn default_censor() -> f64 {
    0.30
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    case_id: CaseId,
    n: usize,
    #[serde(default = "default_censor")]
    censor_rate_target: f64,
    seed: u64,
    #[serde(default = "one")]
    replicates: usize,
}

#[derive(Debug, Serialize)]
struct SimulateSummary {
    case_id: CaseId,
    n: usize,
    censor_rate_target: f64,
    censoring_rate_mu: f64,
    seed: u64,
    files: Vec<String>,
    censoring_fractions: Vec<f64>,
}

fn simulate(cli: &Cli, config_path: &Path) -> Result<()> {
    let cfg: SimulateConfig = read_config(config_path)?;
    let out = out_dir(cli)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    if cfg.replicates == 0 {
        return Err(invalid("replicates must be >= 1"));
    }
    let base = SimulationSpec {
        case_id: cfg.case_id,
        n: cfg.n,
        censor_rate_target: cfg.censor_rate_target,
        seed,
    };
    base.validate()?;
    let mu = design_censoring_rate(cfg.case_id, cfg.censor_rate_target)?;
    let mut files = Vec::new();
    let mut fractions = Vec::new();
    for k in 0..cfg.replicates {
        let spec = SimulationSpec {
            seed: if cfg.replicates == 1 { seed } else { derive_seed(seed, &[k as u64]) },
            ..base.clone()
        };
        let data = generate_with_rate(&spec, mu)?;
        let name = if cfg.replicates == 1 {
            "dataset.csv".to_string()
        } else {
            format!("dataset_{k:04}.csv")
        };
        data.write_csv(out.join(&name))?;
        fractions.push(data.censoring_fraction());
        files.push(name);
    }
    write_json(
        &out.join("simulation.json"),
        &SimulateSummary {
            case_id: cfg.case_id,
            n: cfg.n,
            censor_rate_target: cfg.censor_rate_target,
            censoring_rate_mu: mu,
            seed,
            files,
            censoring_fractions: fractions,
        },
    )
}

fn default_hidden() -> Vec<usize> {
    vec![128, 64]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    data: PathBuf,
    #[serde(default = "default_hidden")]
    hidden: Vec<usize>,
    #[serde(default)]
    train: TrainConfig,
    b: usize,
    alpha: Option<f64>,
    r: Option<usize>,
    seed: u64,
}

fn network_for(p0: usize, hidden: &[usize], train: &TrainConfig) -> NetworkConfig {
    let mut widths = vec![p0];
    widths.extend(hidden);
    widths.push(1);
    let mut net = NetworkConfig::new(widths, 0);
    net.dropout_rate = train.dropout_rate;
    net.weight_decay = train.weight_decay;
    net
}

fn fit(cli: &Cli, config_path: &Path) -> Result<()> {
    let cfg: FitConfig = read_config(config_path)?;
    let out = out_dir(cli)?;
    let data = load_dataset(resolve(config_path, &cfg.data))?;
    let n = data.len();
    let r = match (cfg.alpha, cfg.r) {
        (Some(a), None) => {
            if !(a > 0.0 && a <= 1.0) {
                return Err(invalid(format!("alpha must lie in (0,1], got {a}")));
            }
            subsample_size(n, a)
        }
        (None, Some(r)) => r,
        _ => return Err(invalid("exactly one of `alpha` and `r` must be given")),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    let net = network_for(data.p0(), &cfg.hidden, &cfg.train);
    let mut model = fit_ensemble(&data, &net, &cfg.train, r, cfg.b, seed)?;
    model.meta.alpha = cfg.alpha;
    model.save(out)?;
    log::info!(
        "trained {} base learners (r = {r}); {} passed the training-budget check",
        model.n_base(),
        model.meta.budget_ok
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictConfig {
    model: PathBuf,
    points: PathBuf,
}

fn predict(cli: &Cli, config_path: &Path) -> Result<()> {
    let cfg: PredictConfig = read_config(config_path)?;
    let out = out_dir(cli)?;
    let model = EnsembleModel::load(resolve(config_path, &cfg.model))?;
    let points = load_points(resolve(config_path, &cfg.points))?;
    let path = out.join("predictions.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["x_id", "estimate"])?;
    for (k, x) in points.iter().enumerate() {
        let est = crate::ensemble::ensemble_predict(&model, x)?;
        w.write_record([k.to_string(), est.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InferConfig {
    model: PathBuf,
    points: PathBuf,
    /// Index pairs into `points`; each yields a contrast `g(x_i) - g(x_j)`.
    #[serde(default)]
    pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Serialize)]
struct ContrastReport {
    x1_id: usize,
    x2_id: usize,
    estimate: f64,
    se: f64,
    ci_lo: f64,
    ci_hi: f64,
    hazard_ratio: f64,
    hazard_ratio_lo: f64,
    hazard_ratio_hi: f64,
    level: f64,
    clamped: bool,
}

fn infer(cli: &Cli, config_path: &Path) -> Result<()> {
    let cfg: InferConfig = read_config(config_path)?;
    let out = out_dir(cli)?;
    let level = level(cli, 0.95);
    let model = EnsembleModel::load(resolve(config_path, &cfg.model))?;
    let points = load_points(resolve(config_path, &cfg.points))?;

    let path = out.join("inference.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["x_id", "estimate", "se", "ci_lo", "ci_hi", "clamped"])?;
    for (k, x) in points.iter().enumerate() {
        let res = infer_point(&model, x, level)?;
        w.write_record([
            k.to_string(),
            res.estimate.to_string(),
            res.std_error.to_string(),
            res.ci_lower.to_string(),
            res.ci_upper.to_string(),
            res.clamped.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    if cfg.pairs.is_empty() {
        return Ok(());
    }
    let mut reports = Vec::new();
    let path = out.join("contrasts.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["pair_id", "x1_id", "x2_id", "estimate", "se", "ci_lo", "ci_hi", "clamped"])?;
    for (k, &(i, j)) in cfg.pairs.iter().enumerate() {
        if i >= points.len() || j >= points.len() {
            return Err(invalid(format!("pair ({i}, {j}) refers past the {} query points", points.len())));
        }
        let res = infer_contrast(&model, &points[i], &points[j], level)?;
        w.write_record([
            k.to_string(),
            i.to_string(),
            j.to_string(),
            res.estimate.to_string(),
            res.std_error.to_string(),
            res.ci_lower.to_string(),
            res.ci_upper.to_string(),
            res.clamped.to_string(),
        ])?;
        let (lo, hi) = relative_risk_interval(&res);
        reports.push(ContrastReport {
            x1_id: i,
            x2_id: j,
            estimate: res.estimate,
            se: res.std_error,
            ci_lo: res.ci_lower,
            ci_hi: res.ci_upper,
            hazard_ratio: res.estimate.exp(),
            hazard_ratio_lo: lo,
            hazard_ratio_hi: hi,
            level,
            clamped: res.clamped,
        });
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&out.join("contrasts.json"), &reports)
}

fn alpha_range_cmd(cli: &Cli, config_path: &Path) -> Result<()> {
    let params: RateParams = read_config(config_path)?;
    let range = alpha_range(&params)?;
    let report = range.report();
    print!("{report}");
    if let Some(out) = cli.out.as_deref() {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let txt = out.join("alpha_range.txt");
        std::fs::write(&txt, &report).map_err(|e| Error::io(&txt, e))?;
        write_json(&out.join("alpha_range.json"), &range)?;
    }
    Ok(())
}

fn benchmark(cli: &Cli, config_path: &Path) -> Result<()> {
    let mut cfg: StudyConfig = read_config(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(level) = cli.level {
        cfg.level = level;
    }
    let out = out_dir(cli)?;
    let report = run_monte_carlo(&cfg)?;
    write_study_outputs(&report, out)?;
    print!("{}", summary_table(&report));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ZetaEstimator {
    /// Mean of standard normal responses; the analytic answer is `1 / r²`.
    SampleMean,
    LinearCox,
    DeepCox,
}

fn default_reps() -> usize {
    1000
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ZetaConfig {
    estimator: ZetaEstimator,
    r: usize,
    #[serde(default = "default_reps")]
    reps: usize,
    #[serde(default)]
    x1: Vec<f64>,
    #[serde(default)]
    x2: Vec<f64>,
    #[serde(default)]
    case_id: Option<CaseId>,
    #[serde(default = "default_censor")]
    censor_rate_target: f64,
    #[serde(default = "default_hidden")]
    hidden: Vec<usize>,
    #[serde(default)]
    train: TrainConfig,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct ZetaReport {
    estimator: String,
    r: usize,
    reps: usize,
    seed: u64,
    covariance: f64,
    analytic: Option<f64>,
}

fn oracle_zeta(cli: &Cli, config_path: &Path) -> Result<()> {
    let cfg: ZetaConfig = read_config(config_path)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let (covariance, analytic, name) = match cfg.estimator {
        ZetaEstimator::SampleMean => {
            let est = |s: &[f64], _x: &[f64]| Ok(s.iter().sum::<f64>() / s.len() as f64);
            let gen = |rng: &mut rand_chacha::ChaCha8Rng| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            let v = single_overlap_cov_mc(est, gen, cfg.r, &cfg.x1, &cfg.x2, cfg.reps, seed)?;
            (v, Some(1.0 / (cfg.r * cfg.r) as f64), "sample-mean")
        }
        ZetaEstimator::LinearCox | ZetaEstimator::DeepCox => {
            let case = cfg
                .case_id
                .ok_or_else(|| invalid("case_id is required for the Cox estimators"))?;
            if cfg.x1.len() != crate::data::SIM_DIM || cfg.x2.len() != crate::data::SIM_DIM {
                return Err(invalid(format!("x1 and x2 must have length {}", crate::data::SIM_DIM)));
            }
            let mu = design_censoring_rate(case, cfg.censor_rate_target)?;
            let gen = move |rng: &mut rand_chacha::ChaCha8Rng| draw_observation(case, mu, rng);
            if cfg.estimator == ZetaEstimator::LinearCox {
                let est = |s: &[Observation], x: &[f64]| {
                    let d = SurvivalDataset::new("overlap", s.to_vec())?;
                    fit_linear_cox(&d, 100, 1e-8)?.predict(x)
                };
                (single_overlap_cov_mc(est, gen, cfg.r, &cfg.x1, &cfg.x2, cfg.reps, seed)?, None, "linear-cox")
            } else {
                cfg.train.validate()?;
                let net = network_for(crate::data::SIM_DIM, &cfg.hidden, &cfg.train);
                net.validate()?;
                let est = |s: &[Observation], x: &[f64]| {
                    let d = SurvivalDataset::new("overlap", s.to_vec())?;
                    let mut tc = cfg.train.clone();
                    tc.seed = derive_seed(seed, &[0x7A1A]);
                    let mut nc = net.clone();
                    nc.seed = derive_seed(seed, &[0x7A1B]);
                    train(&d, &nc, &tc)?.params.predict_g(x)
                };
                (single_overlap_cov_mc(est, gen, cfg.r, &cfg.x1, &cfg.x2, cfg.reps, seed)?, None, "deep-cox")
            }
        }
    };
    let report = ZetaReport {
        estimator: name.to_string(),
        r: cfg.r,
        reps: cfg.reps,
        seed,
        covariance,
        analytic,
    };
    println!("single-overlap covariance ({name}, r = {}, reps = {}): {covariance}", cfg.r, cfg.reps);
    if let Some(a) = analytic {
        println!("analytic value: {a}");
    }
    if let Some(out) = cli.out.as_deref() {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(&out.join("overlap_covariance.json"), &report)?;
    }
    Ok(())
}
