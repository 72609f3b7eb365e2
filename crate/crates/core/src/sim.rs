//! Simulation design, censoring calibration and Monte Carlo aggregation.
//!
//! Stream layout: the calibration draws come from a generator keyed by
//! `derive_seed(seed, CALIBRATION_LABEL)`; replication `r` draws its data from
//! the generator keyed by `derive_seed(seed, DATA_LABEL)` on stream `r`, and
//! its optimizer jitter from `derive_seed(seed, r)`. Within a replication each
//! observation draws, in order, the covariate coordinates (component choice,
//! then a standard normal), the error, and the censoring time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{derive_seed, fit_detailed, fixed_tau_fit, FitConfig, IndexModelFit};
use crate::survival::CensoredSample;

pub const CALIBRATION_LABEL: u64 = 0xCA11_B8A7;
pub const DATA_LABEL: u64 = 0xDA7A;
pub const CALIBRATION_DRAWS: usize = 100_000;
pub const CALIBRATION_TOLERANCE: f64 = 0.005;
/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.2;

/// Six equally spaced bandwidths from 1 to 1.5.
pub fn table_h_grid() -> Vec<f64> {
    (0..6).map(|k| 1.0 + 0.1 * k as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// `θ̂ = θ̂^τ̂`.
    Adaptive,
    /// `θ̂^τ₀`.
    FixedTau0,
    #[default]
    Both,
}

/// Each covariate coordinate is `w·N(0,1) + (1-w)·N(mean, variance)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovariateLaw {
    pub standard_weight: f64,
    pub mean: f64,
    pub variance: f64,
}

impl Default for CovariateLaw {
    fn default() -> Self {
        Self {
            standard_weight: 0.2,
            mean: 0.25,
            variance: 2.0,
        }
    }
}

impl CovariateLaw {
    pub fn moments(&self) -> (f64, f64) {
        let w = self.standard_weight;
        let mean = (1.0 - w) * self.mean;
        let second = w + (1.0 - w) * (self.variance + self.mean * self.mean);
        (mean, second - mean * mean)
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        let standard = rng.random::<f64>() < self.standard_weight;
        let e: f64 = StandardNormal.sample(rng);
        if standard {
            e
        } else {
            self.mean + self.variance.sqrt() * e
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimDesign {
    pub n: usize,
    pub theta0: Vec<f64>,
    pub covariates: CovariateLaw,
    /// `false` forces `ε ≡ 0`.
    pub noise: bool,
    pub target_p: f64,
    /// Censoring rate; calibrated to `target_p` when absent. Zero disables
    /// censoring.
    pub lambda: Option<f64>,
    pub reps: usize,
    pub seed: u64,
    pub mode: FitMode,
    pub fit: FitConfig,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self {
            n: 100,
            theta0: vec![1.0, 0.5, 1.4, 0.2],
            covariates: CovariateLaw::default(),
            noise: true,
            target_p: 0.25,
            lambda: None,
            reps: 50,
            seed: 1,
            mode: FitMode::Both,
            fit: FitConfig {
                h_grid: Some(table_h_grid()),
                ..FitConfig::default()
            },
        }
    }
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        if self.n < 20 {
            return Err(Error::InvalidInput(format!(
                "n = {} must be at least 20",
                self.n
            )));
        }
        if !(0.0..0.9).contains(&self.target_p) {
            return Err(Error::InvalidInput(format!(
                "target_p = {} must lie in [0, 0.9)",
                self.target_p
            )));
        }
        if self.reps < 1 {
            return Err(Error::InvalidInput("reps must be at least 1".into()));
        }
        if self.theta0.is_empty() || self.theta0[0] != 1.0 {
            return Err(Error::InvalidInput("theta0 must start with 1".into()));
        }
        let c = &self.covariates;
        if !(0.0..=1.0).contains(&c.standard_weight) || !(c.variance >= 0.0) {
            return Err(Error::InvalidInput("invalid covariate mixture".into()));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidInput(format!("lambda = {l} must be >= 0")));
            }
        }
        self.fit.validate()
    }

    pub fn d(&self) -> usize {
        self.theta0.len()
    }

    /// One observation as `(x, y, standard exponential)`.
    fn draw_latent<R: Rng>(&self, rng: &mut R, x: &mut [f64]) -> (f64, f64) {
        for v in x.iter_mut() {
            *v = self.covariates.draw(rng);
        }
        let index: f64 = x.iter().zip(&self.theta0).map(|(a, b)| a * b).sum();
        let e: f64 = StandardNormal.sample(rng);
        let y = if self.noise {
            index + index.abs().sqrt() * e
        } else {
            index
        };
        let c: f64 = Exp1.sample(rng);
        (y, c)
    }
}

fn censored_share(latent: &[(f64, f64)], lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let hits = latent.iter().filter(|(y, e)| *y > e / lambda).count();
    hits as f64 / latent.len() as f64
}

/// Censoring rate `λ` whose Monte Carlo censoring share is within
/// `CALIBRATION_TOLERANCE` of `target_p`. The same draws are used at every
/// trial rate.
pub fn calibrate_censoring_rate(design: &SimDesign, target_p: f64) -> Result<f64> {
    if !(0.0..0.9).contains(&target_p) {
        return Err(Error::InvalidInput(format!(
            "target_p = {target_p} must lie in [0, 0.9)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(design.seed, CALIBRATION_LABEL));
    let mut x = vec![0.0; design.d()];
    let latent: Vec<(f64, f64)> = (0..CALIBRATION_DRAWS)
        .map(|_| design.draw_latent(&mut rng, &mut x))
        .collect();

    let (mut lo, mut hi) = (1e-8_f64, 1e4_f64);
    let (p_lo, p_hi) = (censored_share(&latent, lo), censored_share(&latent, hi));
    if (p_lo - target_p).abs() <= CALIBRATION_TOLERANCE && target_p < CALIBRATION_TOLERANCE {
        return Ok(lo);
    }
    if p_lo > target_p + CALIBRATION_TOLERANCE || p_hi < target_p - CALIBRATION_TOLERANCE {
        return Err(Error::Calibration(format!(
            "target {target_p} outside the attainable range [{p_lo:.4}, {p_hi:.4}]"
        )));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let p = censored_share(&latent, mid);
        if (p - target_p).abs() <= 1e-4 {
            return Ok(mid);
        }
        if p < target_p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = (lo * hi).sqrt();
    let p = censored_share(&latent, mid);
    if (p - target_p).abs() <= CALIBRATION_TOLERANCE {
        Ok(mid)
    } else {
        Err(Error::Calibration(format!(
            "bisection stalled at lambda = {mid} with share {p:.4}"
        )))
    }
}

/// Replication `rep` of the design with censoring rate `lambda`.
pub fn generate_dataset(design: &SimDesign, lambda: f64, rep: u64) -> Result<CensoredSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(design.seed, DATA_LABEL));
    rng.set_stream(rep);
    let d = design.d();
    let mut xs = vec![0.0; design.n * d];
    let mut z = Vec::with_capacity(design.n);
    let mut delta = Vec::with_capacity(design.n);
    for i in 0..design.n {
        let (y, e) = design.draw_latent(&mut rng, &mut xs[i * d..(i + 1) * d]);
        let c = if lambda > 0.0 {
            e / lambda
        } else {
            f64::INFINITY
        };
        z.push(y.min(c));
        delta.push(y <= c);
    }
    CensoredSample::new(z, delta, xs, d)
}

/// Summary of one fit within a replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepFit {
    pub theta: Vec<f64>,
    pub h: f64,
    pub tau: f64,
    pub n_retained: usize,
    pub weight_inf: f64,
    pub weight_tau: f64,
    pub weight_tau_raw: f64,
    pub e2: f64,
    pub e2_sandwich: f64,
    pub delta_min_eigenvalue: f64,
    /// The selected `τ̂` is strictly below `τ₀`.
    pub below_tau0: bool,
}

impl RepFit {
    pub fn from_fit(fit: &IndexModelFit) -> Self {
        let k = fit.delta_hat.len();
        let m = nalgebra::DMatrix::from_fn(k, k, |r, c| fit.delta_hat[r][c]);
        let min_eig = if k == 0 {
            0.0
        } else {
            m.symmetric_eigenvalues().min()
        };
        Self {
            theta: fit.theta_hat.clone(),
            h: fit.h_hat,
            tau: fit.tau_hat,
            n_retained: fit.n_retained,
            weight_inf: fit.weight_inf,
            weight_tau: fit.weight_tau,
            weight_tau_raw: fit.weight_tau_raw,
            e2: fit.e2,
            e2_sandwich: fit.e2_sandwich,
            delta_min_eigenvalue: min_eig,
            below_tau0: fit.tau_hat < fit.tau0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: u64,
    pub censored_fraction: f64,
    pub adaptive: Option<RepFit>,
    pub fixed_tau0: Option<RepFit>,
    pub errors: Vec<String>,
}

/// Bias, covariance and mean squared error of the free coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub successes: usize,
    pub failures: usize,
    pub bias: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub mse: f64,
    pub mean_n: f64,
    pub weight_inf: f64,
    pub weight_tau: f64,
    pub weight_tau_raw: f64,
}

impl EstimatorSummary {
    /// Aggregates over the successful fits. Covariances divide by the
    /// number of fits, so `mse = ‖bias‖² + tr(covariance)`.
    pub fn aggregate(theta0: &[f64], fits: &[&RepFit], failures: usize) -> Self {
        let k = theta0.len() - 1;
        let r = fits.len() as f64;
        let mut mean = vec![0.0; k];
        let mut mse = 0.0;
        for f in fits {
            for c in 0..k {
                mean[c] += f.theta[c + 1] / r;
            }
            mse += (1..=k)
                .map(|c| (f.theta[c] - theta0[c]).powi(2))
                .sum::<f64>()
                / r;
        }
        let mut covariance = vec![vec![0.0; k]; k];
        for f in fits {
            for a in 0..k {
                for b in 0..k {
                    covariance[a][b] += (f.theta[a + 1] - mean[a]) * (f.theta[b + 1] - mean[b]) / r;
                }
            }
        }
        let avg = |g: &dyn Fn(&RepFit) -> f64| fits.iter().map(|f| g(f)).sum::<f64>() / r;
        Self {
            successes: fits.len(),
            failures,
            bias: (0..k).map(|c| mean[c] - theta0[c + 1]).collect(),
            covariance,
            mse,
            mean_n: avg(&|f| f.n_retained as f64),
            weight_inf: avg(&|f| f.weight_inf),
            weight_tau: avg(&|f| f.weight_tau),
            weight_tau_raw: avg(&|f| f.weight_tau_raw),
        }
    }

    /// `|mse - (‖bias‖² + tr(covariance))|`.
    pub fn decomposition_gap(&self) -> f64 {
        let b2: f64 = self.bias.iter().map(|b| b * b).sum();
        let tr: f64 = (0..self.bias.len()).map(|c| self.covariance[c][c]).sum();
        (self.mse - b2 - tr).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub design: SimDesign,
    pub lambda: f64,
    pub mean_censored_fraction: f64,
    pub adaptive: Option<EstimatorSummary>,
    pub fixed_tau0: Option<EstimatorSummary>,
    pub records: Vec<RepRecord>,
}

/// Mean retained count and mean largest-observation weights of the adaptive
/// fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub mean_n: f64,
    pub weight_inf: f64,
    pub weight_tau: f64,
    pub weight_tau_raw: f64,
}

impl MonteCarloReport {
    pub fn weight_diagnostics(&self) -> Option<WeightDiagnostics> {
        self.adaptive.as_ref().map(|s| WeightDiagnostics {
            mean_n: s.mean_n,
            weight_inf: s.weight_inf,
            weight_tau: s.weight_tau,
            weight_tau_raw: s.weight_tau_raw,
        })
    }
}

/// Runs one replication.
pub fn run_rep(design: &SimDesign, lambda: f64, mode: FitMode, rep: u64) -> RepRecord {
    let mut record = RepRecord {
        rep,
        censored_fraction: f64::NAN,
        adaptive: None,
        fixed_tau0: None,
        errors: Vec::new(),
    };
    let sample = match generate_dataset(design, lambda, rep) {
        Ok(s) => s,
        Err(e) => {
            record.errors.push(format!("generate: {e}"));
            return record;
        }
    };
    record.censored_fraction = sample.censored_count() as f64 / sample.n() as f64;
    let config = FitConfig {
        seed: derive_seed(design.seed, rep),
        ..design.fit.clone()
    };
    let fixed = |record: &mut RepRecord| match tau0_of(&sample, &config)
        .and_then(|t| fixed_tau_fit(&sample, &config, t))
    {
        Ok(f) => record.fixed_tau0 = Some(RepFit::from_fit(&f)),
        Err(e) => record.errors.push(format!("fixed_tau0: {e}")),
    };
    match mode {
        FitMode::FixedTau0 => fixed(&mut record),
        FitMode::Adaptive | FitMode::Both => match fit_detailed(&sample, &config) {
            Ok(detail) => {
                record.adaptive = Some(RepFit::from_fit(&detail.fit));
                if mode == FitMode::Both {
                    match detail.branch_fit(&sample, &config, detail.fit.tau0) {
                        Some(f) => record.fixed_tau0 = Some(RepFit::from_fit(&f)),
                        None => fixed(&mut record),
                    }
                }
            }
            Err(e) => {
                record.errors.push(format!("adaptive: {e}"));
                if mode == FitMode::Both {
                    fixed(&mut record);
                }
            }
        },
    }
    record
}

fn tau0_of(sample: &CensoredSample, config: &FitConfig) -> Result<f64> {
    match config.tau0 {
        Some(t) => Ok(t),
        None => sample.default_tau0(),
    }
}

fn summarize(
    design: &SimDesign,
    records: &[RepRecord],
    pick: impl Fn(&RepRecord) -> Option<&RepFit>,
    label: &str,
) -> Result<EstimatorSummary> {
    let fits: Vec<&RepFit> = records.iter().filter_map(&pick).collect();
    let failures = records.len() - fits.len();
    if failures as f64 > MAX_FAILURE_RATE * records.len() as f64 || fits.is_empty() {
        let reasons: Vec<String> = records
            .iter()
            .filter(|r| pick(r).is_none())
            .take(5)
            .map(|r| format!("rep {}: {}", r.rep, r.errors.join("; ")))
            .collect();
        return Err(Error::Harness(format!(
            "{label}: {failures} of {} replications failed ({})",
            records.len(),
            reasons.join(" | ")
        )));
    }
    Ok(EstimatorSummary::aggregate(&design.theta0, &fits, failures))
}

/// Runs every replication, in parallel, and aggregates them in order.
pub fn monte_carlo_report(design: &SimDesign, mode: FitMode) -> Result<MonteCarloReport> {
    let reps: Vec<u64> = (0..design.reps as u64).collect();
    monte_carlo_report_ordered(design, mode, &reps)
}

/// As [`monte_carlo_report`], executing replications in the given order.
pub fn monte_carlo_report_ordered(
    design: &SimDesign,
    mode: FitMode,
    execution_order: &[u64],
) -> Result<MonteCarloReport> {
    design.validate()?;
    let lambda = match design.lambda {
        Some(l) => l,
        None => calibrate_censoring_rate(design, design.target_p)?,
    };
    let mut records: Vec<RepRecord> = execution_order
        .par_iter()
        .map(|&rep| run_rep(design, lambda, mode, rep))
        .collect();
    records.sort_by_key(|r| r.rep);
    let mean_censored_fraction =
        records.iter().map(|r| r.censored_fraction).sum::<f64>() / records.len() as f64;
    let adaptive = match mode {
        FitMode::FixedTau0 => None,
        _ => Some(summarize(
            design,
            &records,
            |r| r.adaptive.as_ref(),
            "adaptive",
        )?),
    };
    let fixed_tau0 = match mode {
        FitMode::Adaptive => None,
        _ => Some(summarize(
            design,
            &records,
            |r| r.fixed_tau0.as_ref(),
            "fixed_tau0",
        )?),
    };
    Ok(MonteCarloReport {
        design: design.clone(),
        lambda,
        mean_censored_fraction,
        adaptive,
        fixed_tau0,
        records,
    })
}

/// Weight diagnostics of the adaptive estimator on the design.
pub fn weight_diagnostics(design: &SimDesign) -> Result<WeightDiagnostics> {
    let report = monte_carlo_report(design, FitMode::Adaptive)?;
    report
        .weight_diagnostics()
        .ok_or_else(|| Error::Internal("adaptive summary missing".into()))
}
