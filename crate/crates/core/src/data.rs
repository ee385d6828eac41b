//! Right-censored survival data: representation, CSV I/O and the simulation
//! designs used by the benchmark harness.
//!
//! Simulated subjects follow the hazard `λ(t | x) = 0.1 t exp{g0(x)}`, so the
//! cumulative hazard is `Λ(t | x) = 0.05 t² exp{g0(x)}` and event times are
//! drawn by exact inversion. Censoring times are exponential with a rate
//! calibrated per design to hit a target censoring fraction.

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Exp1, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed::rng_from;

/// Covariate dimension of the simulation designs.
pub const SIM_DIM: usize = 10;
/// Covariates are standard normal truncated to `[-TRUNCATION, TRUNCATION]`.
pub const TRUNCATION: f64 = 3.0;
/// Probe size used by [`generate_case`] when calibrating the censoring rate.
pub const CALIBRATION_PROBE: usize = 20_000;

const MU_LO: f64 = 1e-6;
const MU_HI: f64 = 1e3;
const CALIBRATION_TOL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    observations: Vec<Observation>,
    p0: usize,
    name: String,
}

impl SurvivalDataset {
    pub fn new(name: impl Into<String>, observations: Vec<Observation>) -> Result<Self> {
        let first = observations
            .first()
            .ok_or_else(|| Error::Validation("dataset has no observations".into()))?;
        let p0 = first.covariates.len();
        if p0 == 0 {
            return Err(Error::Validation("observations have no covariates".into()));
        }
        for (i, obs) in observations.iter().enumerate() {
            if !obs.time.is_finite() || obs.time < 0.0 {
                return Err(Error::Validation(format!(
                    "observation {i}: time must be finite and >= 0, got {}",
                    obs.time
                )));
            }
            if obs.covariates.len() != p0 {
                return Err(Error::Validation(format!(
                    "observation {i}: expected {p0} covariates, got {}",
                    obs.covariates.len()
                )));
            }
            if obs.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "observation {i}: non-finite covariate"
                )));
            }
        }
        if !observations.iter().any(|o| o.event) {
            return Err(Error::DegenerateLikelihood);
        }
        Ok(Self {
            observations,
            p0,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn p0(&self) -> usize {
        self.p0
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn times(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.observations.iter().map(|o| o.event).collect()
    }

    pub fn n_events(&self) -> usize {
        self.observations.iter().filter(|o| o.event).count()
    }

    pub fn censoring_fraction(&self) -> f64 {
        1.0 - self.n_events() as f64 / self.len() as f64
    }

    /// Row-major `n × p0` covariate matrix.
    pub fn covariate_matrix(&self) -> Array2<f64> {
        let n = self.len();
        let flat: Vec<f64> = self
            .observations
            .iter()
            .flat_map(|o| o.covariates.iter().copied())
            .collect();
        Array2::from_shape_vec((n, self.p0), flat).expect("shape checked at construction")
    }

    /// The sub-dataset indexed by `indices`; fails if it holds no events.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let obs = indices
            .iter()
            .map(|&i| {
                self.observations
                    .get(i)
                    .cloned()
                    .ok_or_else(|| invalid(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.name.clone(), obs)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["time".to_string(), "event".to_string()];
        header.extend((1..=self.p0).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for o in &self.observations {
            let mut rec = Vec::with_capacity(self.p0 + 2);
            rec.push(o.time.to_string());
            rec.push(if o.event { "1" } else { "0" }.to_string());
            rec.extend(o.covariates.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Read a dataset from a CSV file with header `time,event,x1,...,xp`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<SurvivalDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader.headers()?.clone();
    if header.len() < 3 || &header[0] != "time" || &header[1] != "event" {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `time,event,x1,...,xp`, got `{}`", join(&header)),
        });
    }
    let p0 = header.len() - 2;
    let mut observations = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != p0 + 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, got {}", p0 + 2, record.len()),
            });
        }
        let num = |idx: usize| -> Result<f64> {
            record[idx].parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("column `{}`: {e}", &header[idx]),
            })
        };
        let time = num(0)?;
        if !time.is_finite() || time < 0.0 {
            return Err(Error::Validation(format!(
                "line {line}: time must be finite and >= 0, got {time}"
            )));
        }
        let event = match &record[1] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Validation(format!(
                    "line {line}: event must be 0 or 1, got `{other}`"
                )))
            }
        };
        let covariates = (2..p0 + 2).map(num).collect::<Result<Vec<_>>>()?;
        observations.push(Observation {
            time,
            event,
            covariates,
        });
    }
    if observations.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SurvivalDataset::new(name, observations)
}

fn join(rec: &csv::StringRecord) -> String {
    rec.iter().collect::<Vec<_>>().join(",")
}

/// Read a headered CSV of covariate rows (`x1,...,xp`), e.g. query points.
pub fn load_points(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let width = reader.headers()?.len();
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, got {}", record.len()),
            });
        }
        let row = record
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        points.push(row);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    Ok(points)
}

/// The three log-risk functions of the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum CaseId {
    /// `x1 - 1.2 x2 + 0.8 x3`
    Linear,
    /// `0.7 x1 - 0.5 x3 + 0.4 x2² + 0.3 x1 x2`
    Additive,
    /// `0.7 x1 - 0.8 x3 + 0.5 x2² + sin(0.5 x1 x2) + 1.2 exp(-0.25(x1-1)² - 0.25(x2+1)²) - 1.2 exp(-0.5)`
    Compositional,
}

impl CaseId {
    pub fn number(self) -> u8 {
        match self {
            CaseId::Linear => 1,
            CaseId::Additive => 2,
            CaseId::Compositional => 3,
        }
    }

    /// True log-risk `g0(x)`; only `x[0..3]` matter.
    pub fn risk(self, x: &[f64]) -> f64 {
        let (x1, x2, x3) = (x[0], x[1], x[2]);
        match self {
            CaseId::Linear => x1 - 1.2 * x2 + 0.8 * x3,
            CaseId::Additive => 0.7 * x1 - 0.5 * x3 + 0.4 * x2 * x2 + 0.3 * x1 * x2,
            CaseId::Compositional => {
                let bump = (-0.25 * (x1 - 1.0).powi(2) - 0.25 * (x2 + 1.0).powi(2)).exp();
                0.7 * x1 - 0.8 * x3 + 0.5 * x2 * x2 + (0.5 * x1 * x2).sin() + 1.2 * bump
                    - 1.2 * (-0.5f64).exp()
            }
        }
    }
}

impl TryFrom<u8> for CaseId {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(CaseId::Linear),
            2 => Ok(CaseId::Additive),
            3 => Ok(CaseId::Compositional),
            other => Err(invalid(format!("unknown case id {other} (expected 1, 2 or 3)"))),
        }
    }
}

impl From<CaseId> for u8 {
    fn from(c: CaseId) -> u8 {
        c.number()
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

pub fn true_risk(case_id: u8, x: &[f64]) -> Result<f64> {
    let case = CaseId::try_from(case_id)?;
    if x.len() != SIM_DIM {
        return Err(invalid(format!(
            "expected covariate vector of length {SIM_DIM}, got {}",
            x.len()
        )));
    }
    Ok(case.risk(x))
}

/// Inverse-transform draw from `Λ(t) = 0.05 t² e^g`: `t = sqrt(-ln u / (0.05 e^g))`.
pub fn sample_event_time(g_value: f64, rng_draw: f64) -> Result<f64> {
    if !(rng_draw > 0.0 && rng_draw < 1.0) {
        return Err(invalid(format!("uniform draw must lie in (0,1), got {rng_draw}")));
    }
    Ok((-rng_draw.ln() / (0.05 * g_value.exp())).sqrt())
}

pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if (-TRUNCATION..=TRUNCATION).contains(&z) {
            return z;
        }
    }
}

pub fn draw_covariates<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    (0..SIM_DIM).map(|_| truncated_normal(rng)).collect()
}

/// One simulated subject under `case` with exponential censoring at rate `mu`.
pub fn draw_observation<R: Rng + ?Sized>(case: CaseId, mu: f64, rng: &mut R) -> Observation {
    let covariates = draw_covariates(rng);
    let u: f64 = rng.sample(Open01);
    let event_time = sample_event_time(case.risk(&covariates), u).expect("Open01 draw");
    let e: f64 = rng.sample(Exp1);
    let censor_time = if mu > 0.0 { e / mu } else { f64::INFINITY };
    if event_time <= censor_time {
        Observation {
            time: event_time,
            event: true,
            covariates,
        }
    } else {
        Observation {
            time: censor_time,
            event: false,
            covariates,
        }
    }
}

/// Event times and unit-rate exponential draws for a fixed probe sample;
/// censoring at rate `mu` is then `T_C = E / mu` (common random numbers).
#[derive(Debug, Clone)]
pub struct CensoringProbe {
    event_times: Vec<f64>,
    unit_exp: Vec<f64>,
}

impl CensoringProbe {
    pub fn new(case: CaseId, n_probe: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[0xC3_4501, case.number() as u64]);
        let mut event_times = Vec::with_capacity(n_probe);
        let mut unit_exp = Vec::with_capacity(n_probe);
        for _ in 0..n_probe {
            let x = draw_covariates(&mut rng);
            let u: f64 = rng.sample(Open01);
            event_times.push(sample_event_time(case.risk(&x), u).expect("Open01 draw"));
            unit_exp.push(rng.sample(Exp1));
        }
        Self {
            event_times,
            unit_exp,
        }
    }

    /// Fraction of probe subjects with `T_C < T_U` at censoring rate `mu`.
    pub fn censoring_fraction(&self, mu: f64) -> f64 {
        if mu <= 0.0 {
            return 0.0;
        }
        let censored = self
            .event_times
            .iter()
            .zip(&self.unit_exp)
            .filter(|(&t, &e)| e / mu < t)
            .count();
        censored as f64 / self.event_times.len() as f64
    }
}

/// Exponential censoring rate giving `target` censoring on a probe sample,
/// found by bisection (geometric midpoints) over `[1e-6, 1e3]`.
pub fn calibrate_censoring_rate(case_id: u8, n_probe: usize, target: f64, seed: u64) -> Result<f64> {
    let case = CaseId::try_from(case_id)?;
    if !(target > 0.0 && target < 1.0) {
        return Err(invalid(format!("censoring target must lie in (0,1), got {target}")));
    }
    if n_probe < 10_000 {
        return Err(invalid(format!("probe size must be >= 10^4, got {n_probe}")));
    }
    let probe = CensoringProbe::new(case, n_probe, seed);
    let (mut lo, mut hi) = (MU_LO, MU_HI);
    let (f_lo, f_hi) = (probe.censoring_fraction(lo), probe.censoring_fraction(hi));
    if !(f_lo <= target && target <= f_hi) {
        return Err(Error::CalibrationFailure(format!(
            "target {target} not bracketed: fraction({lo:e}) = {f_lo}, fraction({hi:e}) = {f_hi}"
        )));
    }
    let mut best = (f64::INFINITY, lo);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let frac = probe.censoring_fraction(mid);
        let gap = (frac - target).abs();
        if gap < best.0 {
            best = (gap, mid);
        }
        if gap <= 1.0 / n_probe as f64 || hi / lo < 1.0 + 1e-12 {
            break;
        }
        if frac < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > CALIBRATION_TOL {
        return Err(Error::CalibrationFailure(format!(
            "closest probe censoring fraction misses target {target} by {}",
            best.0
        )));
    }
    Ok(best.1)
}

fn default_censor_rate() -> f64 {
    0.30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub case_id: CaseId,
    pub n: usize,
    #[serde(default = "default_censor_rate")]
    pub censor_rate_target: f64,
    pub seed: u64,
}

impl SimulationSpec {
    pub fn new(case_id: CaseId, n: usize, seed: u64) -> Self {
        Self {
            case_id,
            n,
            censor_rate_target: default_censor_rate(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(invalid(format!("n must be >= 2, got {}", self.n)));
        }
        if !(self.censor_rate_target > 0.0 && self.censor_rate_target < 1.0) {
            return Err(invalid(format!(
                "censor_rate_target must lie in (0,1), got {}",
                self.censor_rate_target
            )));
        }
        Ok(())
    }
}

/// Fixed probe seed: the censoring rate is a property of the design, not of
/// the replication.
pub const CALIBRATION_SEED: u64 = 0x5EED_CA1B;

pub fn design_censoring_rate(case: CaseId, target: f64) -> Result<f64> {
    calibrate_censoring_rate(case.number(), CALIBRATION_PROBE, target, CALIBRATION_SEED)
}

pub fn generate_case(spec: &SimulationSpec) -> Result<SurvivalDataset> {
    spec.validate()?;
    let mu = design_censoring_rate(spec.case_id, spec.censor_rate_target)?;
    generate_with_rate(spec, mu)
}

/// As [`generate_case`] with an explicit censoring rate. With very small `n`
/// a draw can be fully censored; the first event-bearing redraw is used.
pub fn generate_with_rate(spec: &SimulationSpec, mu: f64) -> Result<SurvivalDataset> {
    spec.validate()?;
    let name = format!("case{}_n{}_seed{}", spec.case_id, spec.n, spec.seed);
    for attempt in 0..100u64 {
        let mut rng = rng_from(spec.seed, &[0xDA7A, attempt]);
        let obs: Vec<Observation> = (0..spec.n)
            .map(|_| draw_observation(spec.case_id, mu, &mut rng))
            .collect();
        if obs.iter().any(|o| o.event) {
            return SurvivalDataset::new(name, obs);
        }
    }
    Err(Error::DegenerateData(
        "100 consecutive simulated datasets were fully censored".into(),
    ))
}
