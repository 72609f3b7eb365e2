//! Two-stage estimation of the index parameter.
//!
//! 1. A preliminary estimator `θ_n` maximizes the pseudo-log-likelihood at a
//!    pilot bandwidth `h₀` with the box trimming `J_B`, over the whole
//!    parameter box, truncated at `τ₀`.
//! 2. The pilot fit defines the estimated trimming `Ĵ₀`.
//! 3. For every candidate `τ`, the bandwidth and `θ` are updated alternately
//!    (cross-validated `ĥ(θ)`, then `θ̂(h)` over the ball of radius
//!    `radius` around `θ_n`) until they stop moving.
//! 4. `τ̂` minimizes the estimated mean squared error over the candidates.
//!
//! The first index coefficient is pinned to one throughout; searches run over
//! the remaining `d - 1` coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::objective::{AdaptiveTrim, BoxTrim, LoglikValue, SelfTerm, WindowedLikelihood};
use crate::optimize::{nelder_mead, OptimizerSettings, SimplexResult};
use crate::selection::{
    asymptotic_components, choose_truncation, cv_bandwidth, default_h_grid, default_tau_grid,
    robust_inverse, sandwich, validate_h_grid, AsymptoticComponents, TauOutcome,
    DEFAULT_QUAD_POINTS,
};
use crate::survival::{CensoredSample, SurvivalEstimates, TauWindow};

/// How the bandwidth follows `θ` in the final stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    /// Alternate `ĥ(θ)` and `θ̂(h)` until both settle.
    #[default]
    Alternating,
    /// Re-select the bandwidth at every objective evaluation.
    PerTheta,
}

/// Criterion minimized over the truncation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationCriterion {
    /// `n⁻¹ tr(V̂⁻¹ Δ̂ V̂⁻¹)`.
    #[default]
    Sandwich,
    /// `n⁻¹ Ŵ' V̂⁻² Ŵ`.
    ScoreNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Box `B` for the preliminary trimming; `None` uses sample quantiles.
    pub trim_box: Option<Vec<(f64, f64)>>,
    pub trim_box_quantiles: (f64, f64),
    /// Level `c` of `Ĵ₀`; `None` uses the 5% quantile of the positive pilot densities.
    pub trim_level: Option<f64>,
    /// Pilot bandwidth; `None` uses `σ̂ n^{-1/7}`.
    pub h0: Option<f64>,
    pub h_grid: Option<Vec<f64>>,
    pub tau_grid: Option<Vec<f64>>,
    pub tau1: Option<f64>,
    pub tau0: Option<f64>,
    /// Radius of the search ball around `θ_n`.
    pub radius: f64,
    /// Free coordinates of the preliminary search lie in `[-bound, bound]`.
    pub param_bound: f64,
    /// Spread of the jittered preliminary starts around the pilot direction.
    pub prelim_jitter: f64,
    /// Also start the preliminary search at the origin.
    pub prelim_origin_start: bool,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
    pub self_term: SelfTerm,
    pub bandwidth_mode: BandwidthMode,
    pub max_alternations: usize,
    pub alternation_tolerance: f64,
    pub quad_points: usize,
    /// Fewest uncensored, untrimmed observations a window may hold.
    pub min_window_events: usize,
    pub criterion: TruncationCriterion,
    pub parallel: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            trim_box: None,
            trim_box_quantiles: (0.05, 0.95),
            trim_level: None,
            h0: None,
            h_grid: None,
            tau_grid: None,
            tau1: None,
            tau0: None,
            radius: 0.5,
            param_bound: 10.0,
            prelim_jitter: 0.1,
            prelim_origin_start: false,
            optimizer: OptimizerSettings::default(),
            seed: 0,
            self_term: SelfTerm::LeaveOneOut,
            bandwidth_mode: BandwidthMode::Alternating,
            max_alternations: 5,
            alternation_tolerance: 1e-4,
            quad_points: DEFAULT_QUAD_POINTS,
            min_window_events: 10,
            criterion: TruncationCriterion::Sandwich,
            parallel: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad(format!("radius must be positive, got {}", self.radius));
        }
        if !(self.param_bound > 0.0) {
            return bad("param_bound must be positive".into());
        }
        if !(self.prelim_jitter >= 0.0 && self.prelim_jitter.is_finite()) {
            return bad(format!(
                "prelim_jitter must be nonnegative, got {}",
                self.prelim_jitter
            ));
        }
        let o = &self.optimizer;
        if o.max_iters < 1 {
            return bad("optimizer.max_iters must be at least 1".into());
        }
        if !(o.x_tolerance > 0.0 && o.f_tolerance > 0.0 && o.initial_step > 0.0) {
            return bad("optimizer tolerances and initial_step must be positive".into());
        }
        if !(self.alternation_tolerance > 0.0) || self.max_alternations < 1 {
            return bad("alternation settings must be positive".into());
        }
        if self.quad_points < 2 {
            return bad("quad_points must be at least 2".into());
        }
        let (lo, hi) = self.trim_box_quantiles;
        if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
            return bad(format!(
                "trim_box_quantiles ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1"
            ));
        }
        if let Some(h0) = self.h0 {
            if !(h0 > 0.0 && h0.is_finite()) {
                return bad(format!("h0 must be positive, got {h0}"));
            }
        }
        if let Some(c) = self.trim_level {
            if !(c >= 0.0 && c.is_finite()) {
                return bad(format!("trim_level must be >= 0, got {c}"));
            }
        }
        if let Some(g) = &self.h_grid {
            validate_h_grid(g)?;
        }
        Ok(())
    }
}

/// Output of the preliminary stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreliminaryFit {
    pub theta: Vec<f64>,
    pub loglik: LoglikValue,
    pub h0: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub trim_box: Option<Vec<(f64, f64)>>,
    pub starts: usize,
    pub evals: usize,
    pub converged: bool,
}

/// One candidate truncation point, fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFit {
    pub tau: f64,
    pub theta: Vec<f64>,
    pub h: f64,
    pub loglik: LoglikValue,
    /// Objective at `θ_n` with the same `(h, τ, Ĵ₀)`.
    pub loglik_at_prelim: f64,
    pub components: AsymptoticComponents,
    pub criterion: f64,
    pub alternations: usize,
    pub converged: bool,
    pub evals: usize,
    pub n_retained: usize,
    pub largest_weight_raw: f64,
    pub largest_weight: f64,
}

/// Per-candidate row of the truncation diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRecord {
    pub tau: f64,
    pub ok: bool,
    pub theta: Option<Vec<f64>>,
    pub h: Option<f64>,
    pub e2: Option<f64>,
    pub e2_sandwich: Option<f64>,
    pub criterion: Option<f64>,
    pub n_retained: usize,
    pub largest_weight: Option<f64>,
    pub largest_weight_raw: Option<f64>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub prelim_converged: bool,
    pub prelim_evals: usize,
    pub alternations: usize,
    pub converged: bool,
    pub evals: usize,
}

/// Final estimate with its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexModelFit {
    pub n: usize,
    pub d: usize,
    pub theta_hat: Vec<f64>,
    pub theta_prelim: Vec<f64>,
    pub h_hat: f64,
    pub tau_hat: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub h0: f64,
    pub trim_level: f64,
    pub trim_retained: usize,
    pub h_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
    pub e2_table: Vec<TauRecord>,
    pub criterion: TruncationCriterion,
    pub e2: f64,
    pub e2_sandwich: f64,
    pub v_hat: Vec<Vec<f64>>,
    pub w_hat: Vec<f64>,
    pub delta_hat: Vec<Vec<f64>>,
    pub sigma_hat: Vec<Vec<f64>>,
    pub singular: bool,
    pub loglik: LoglikValue,
    pub loglik_at_prelim: f64,
    pub prelim_loglik: LoglikValue,
    pub convergence: ConvergenceReport,
    pub n_retained: usize,
    pub weight_inf: f64,
    pub weight_tau: f64,
    pub weight_tau_raw: f64,
    pub censored: usize,
    pub no_censoring: bool,
}

/// `Σ̂ / n` and per-coordinate standard errors of the free coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    pub sigma_over_n: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub singular: bool,
}

/// Everything shared by the candidate truncation branches.
#[derive(Debug, Clone)]
pub struct Setup {
    pub est: SurvivalEstimates,
    pub prelim: PreliminaryFit,
    pub trim: AdaptiveTrim,
    pub h_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
}

pub(crate) fn to_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>]) -> nalgebra::DMatrix<f64> {
    let k = rows.len();
    nalgebra::DMatrix::from_fn(k, k, |r, c| rows[r][c])
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent seed for a labelled sub-computation.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix(splitmix(seed) ^ label)
}

fn with_pinned(free: &[f64]) -> Vec<f64> {
    let mut t = Vec::with_capacity(free.len() + 1);
    t.push(1.0);
    t.extend_from_slice(free);
    t
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Direction of the Kaplan-Meier weighted least-squares fit of `Z` on `X`,
/// rescaled so the first coefficient is one. Falls back to `e₁`.
pub fn least_squares_direction(sample: &CensoredSample, weights: &crate::KmWeights) -> Vec<f64> {
    let d = sample.d();
    let p = d + 1;
    let mut xtx = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut xty = nalgebra::DVector::<f64>::zeros(p);
    for i in 0..sample.n() {
        let w = weights.get(i);
        if w == 0.0 {
            continue;
        }
        let mut row = nalgebra::DVector::<f64>::zeros(p);
        row[0] = 1.0;
        for c in 0..d {
            row[c + 1] = sample.x_row(i)[c];
        }
        xtx += w * &row * row.transpose();
        xty += w * sample.z()[i] * &row;
    }
    let mut e1 = vec![0.0; d];
    e1[0] = 1.0;
    let Some(beta) = xtx.lu().solve(&xty) else {
        return e1;
    };
    let lead = beta[1];
    if !(lead.abs() > 1e-8) || beta.iter().any(|b| !b.is_finite()) {
        return e1;
    }
    (0..d).map(|c| beta[c + 1] / lead).collect()
}

fn resolve_tau_bounds(sample: &CensoredSample, config: &FitConfig) -> Result<(f64, f64)> {
    let tau1 = config.tau1.unwrap_or_else(|| sample.min_z());
    let tau0 = match config.tau0 {
        Some(t) => {
            if t > sample.max_z() {
                return Err(Error::InvalidInput(format!(
                    "tau0 = {t} exceeds the largest follow-up time {}",
                    sample.max_z()
                )));
            }
            t
        }
        None => sample.default_tau0()?,
    };
    if !(tau1 < tau0) {
        return Err(Error::InvalidInput(format!(
            "tau1 = {tau1} must be below tau0 = {tau0}"
        )));
    }
    Ok((tau1, tau0))
}

fn in_ball(free: &[f64], centre: &[f64], radius: f64) -> bool {
    free.iter()
        .zip(centre)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        <= radius * radius
}

fn best_of(results: &[SimplexResult]) -> Option<&SimplexResult> {
    results
        .iter()
        .filter(|r| r.value.is_finite())
        .min_by(|a, b| a.value.total_cmp(&b.value))
}

/// Preliminary estimator `θ_n`.
pub fn preliminary_fit(sample: &CensoredSample, config: &FitConfig) -> Result<PreliminaryFit> {
    config.validate()?;
    let est = SurvivalEstimates::new(sample);
    preliminary_with(sample, &est, config)
}

fn preliminary_with(
    sample: &CensoredSample,
    est: &SurvivalEstimates,
    config: &FitConfig,
) -> Result<PreliminaryFit> {
    let d = sample.d();
    let (tau1, tau0) = resolve_tau_bounds(sample, config)?;
    let window = TauWindow::new(tau1, tau0)?;
    let pilot = least_squares_direction(sample, &est.weights);
    let h0 = match config.h0 {
        Some(h) => h,
        None => {
            let sd = std_dev(&sample.index(&pilot));
            let sd = if sd > 0.0 { sd } else { 1.0 };
            sd * (sample.n() as f64).powf(-1.0 / 7.0)
        }
    };
    let bx = match &config.trim_box {
        Some(iv) => BoxTrim::new(iv.clone())?,
        None => {
            let (lo, hi) = config.trim_box_quantiles;
            BoxTrim::from_quantiles(sample, lo, hi)?
        }
    };
    let flags: Vec<bool> = (0..sample.n())
        .map(|i| bx.contains(sample.x_row(i)))
        .collect();
    let lik = WindowedLikelihood::new(sample, &est.weights, window, &flags, h0, config.self_term)?;

    if d == 1 {
        let theta = vec![1.0];
        let loglik = lik.evaluate(&theta)?;
        return Ok(PreliminaryFit {
            theta,
            loglik,
            h0,
            tau0,
            tau1,
            trim_box: Some(bx.intervals().to_vec()),
            starts: 0,
            evals: 1,
            converged: true,
        });
    }

    let bound = config.param_bound;
    let clip = |v: f64| v.clamp(-bound, bound);
    let pilot_free: Vec<f64> = pilot[1..].iter().map(|&v| clip(v)).collect();
    let mut starts = vec![pilot_free.clone()];
    if config.prelim_origin_start {
        starts.push(vec![0.0; d - 1]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5052_454c));
    for _ in 0..config.optimizer.restarts {
        starts.push(
            pilot_free
                .iter()
                .map(|&v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    clip(v + config.prelim_jitter * e)
                })
                .collect(),
        );
    }

    let objective = |free: &[f64]| -> f64 {
        if free.iter().any(|v| v.abs() > bound) {
            return f64::INFINITY;
        }
        match lik.evaluate(&with_pinned(free)) {
            Ok(v) if v.contributing > 0 => -v.value,
            _ => f64::INFINITY,
        }
    };
    let results: Vec<SimplexResult> = starts
        .iter()
        .map(|s| nelder_mead(objective, s, &config.optimizer))
        .collect();
    let evals = results.iter().map(|r| r.evals).sum();
    let best = best_of(&results).ok_or_else(|| {
        Error::Convergence(format!(
            "preliminary objective is degenerate from all {} starts",
            starts.len()
        ))
    })?;
    if !results.iter().any(|r| r.converged) {
        let trace: Vec<String> = results
            .iter()
            .map(|r| format!("value={:.6} iters={}", -r.value, r.iters))
            .collect();
        return Err(Error::Convergence(format!(
            "preliminary search did not converge from any start: {}",
            trace.join(", ")
        )));
    }
    let theta = with_pinned(&best.x);
    let loglik = lik.evaluate(&theta)?;
    Ok(PreliminaryFit {
        theta,
        loglik,
        h0,
        tau0,
        tau1,
        trim_box: Some(bx.intervals().to_vec()),
        starts: starts.len(),
        evals,
        converged: best.converged,
    })
}

/// Runs the shared stages: survival estimates, `θ_n`, `Ĵ₀` and the grids.
pub fn prepare(sample: &CensoredSample, config: &FitConfig) -> Result<Setup> {
    config.validate()?;
    let est = SurvivalEstimates::new(sample);
    let prelim = preliminary_with(sample, &est, config).stage("preliminary")?;
    let window0 = TauWindow::new(prelim.tau1, prelim.tau0)?;
    let trim = AdaptiveTrim::build(
        sample,
        &est.weights,
        &prelim.theta,
        prelim.h0,
        window0,
        config.trim_level,
    )
    .stage("trimming")?;
    if trim.retained() == 0 {
        return Err(Error::DegenerateObjective {
            excluded: sample.n(),
        }
        .at("trimming"));
    }
    let h_grid = match &config.h_grid {
        Some(g) => g.clone(),
        None => {
            let sd = std_dev(&sample.index(&prelim.theta));
            default_h_grid(if sd > 0.0 { sd } else { 1.0 }, sample.n())
        }
    };
    let tau_grid = match &config.tau_grid {
        Some(g) => g.clone(),
        None => default_tau_grid(sample, prelim.tau0),
    };
    crate::selection::SelectionGrids::new(
        h_grid.clone(),
        tau_grid.clone(),
        prelim.tau1,
        prelim.tau0,
    )
    .stage("grids")?;
    Ok(Setup {
        est,
        prelim,
        trim,
        h_grid,
        tau_grid,
    })
}

/// Smallest admissible truncation point: the uncensored order statistic at
/// the first decile.
pub fn lowest_truncation(sample: &CensoredSample) -> f64 {
    let times = sample.uncensored_times();
    let m = times.len();
    if m == 0 {
        return f64::INFINITY;
    }
    times[((0.1 * m as f64).ceil() as usize).clamp(1, m) - 1]
}

/// Fits `θ̂^τ` with its bandwidth and asymptotic components.
pub fn fit_branch(
    sample: &CensoredSample,
    setup: &Setup,
    config: &FitConfig,
    tau: f64,
) -> Result<BranchFit> {
    let d = sample.d();
    let prelim = &setup.prelim;
    let floor = lowest_truncation(sample);
    if tau < floor {
        return Err(Error::InsufficientData(format!(
            "truncation point {tau} lies below the 10% uncensored quantile {floor}"
        )));
    }
    if !(tau > prelim.tau1 && tau <= prelim.tau0) {
        return Err(Error::InvalidInput(format!(
            "truncation point {tau} outside ({}, {}]",
            prelim.tau1, prelim.tau0
        )));
    }
    let window = TauWindow::new(prelim.tau1, tau)?;
    let weights = &setup.est.weights;
    let flags = &setup.trim.flags;
    let events = (0..sample.n())
        .filter(|&i| sample.delta()[i] && window.contains(sample.z()[i]) && flags[i])
        .count();
    if events < config.min_window_events.max(d + 1) {
        return Err(Error::InsufficientData(format!(
            "{events} usable uncensored observations in [{}, {tau}]",
            prelim.tau1
        )));
    }

    let centre: Vec<f64> = prelim.theta[1..].to_vec();
    let radius = config.radius;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, tau.to_bits()));
    let jitters: Vec<Vec<f64>> = (0..config.optimizer.restarts)
        .map(|_| {
            let step: Vec<f64> = centre
                .iter()
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    0.5 * radius * e
                })
                .collect();
            let norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
            let shrink = if norm > 0.9 * radius {
                0.9 * radius / norm
            } else {
                1.0
            };
            centre
                .iter()
                .zip(&step)
                .map(|(c, s)| c + s * shrink)
                .collect()
        })
        .collect();

    let index_floor = 0.5 * setup.trim.level;
    let cv = |theta: &[f64]| {
        cv_bandwidth(
            sample,
            weights,
            theta,
            window,
            &setup.h_grid,
            config.quad_points,
        )
        .map(|c| c.h)
    };

    let mut evals = 0usize;
    let mut converged;
    let (theta, h, alternations) = match config.bandwidth_mode {
        BandwidthMode::Alternating => {
            let mut theta = prelim.theta.clone();
            let mut last_h: Option<f64> = None;
            let mut rounds = 0;
            loop {
                rounds += 1;
                let h = cv(&theta).stage("bandwidth")?;
                let lik =
                    WindowedLikelihood::new(sample, weights, window, flags, h, config.self_term)?;
                let objective = |free: &[f64]| -> f64 {
                    if !in_ball(free, &centre, radius) {
                        return f64::INFINITY;
                    }
                    match lik.evaluate(&with_pinned(free)) {
                        Ok(v) if v.contributing > 0 => -v.value,
                        _ => f64::INFINITY,
                    }
                };
                let mut starts: Vec<Vec<f64>> = vec![theta[1..].to_vec()];
                if theta != prelim.theta {
                    starts.push(centre.clone());
                }
                starts.extend(jitters.iter().cloned());
                let results: Vec<SimplexResult> = starts
                    .iter()
                    .map(|s| nelder_mead(objective, s, &config.optimizer))
                    .collect();
                evals += results.iter().map(|r| r.evals).sum::<usize>();
                let best = best_of(&results).ok_or_else(|| {
                    Error::DegenerateObjective { excluded: events }.at("maximization")
                })?;
                converged = best.converged;
                let next = with_pinned(&best.x);
                let change = next
                    .iter()
                    .zip(&theta)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    / theta.iter().map(|v| v * v).sum::<f64>().sqrt();
                let settled = last_h == Some(h) && change < config.alternation_tolerance;
                theta = next;
                last_h = Some(h);
                if settled || rounds >= config.max_alternations {
                    break (theta, h, rounds);
                }
            }
        }
        BandwidthMode::PerTheta => {
            let objective = |free: &[f64]| -> f64 {
                if !in_ball(free, &centre, radius) {
                    return f64::INFINITY;
                }
                let theta = with_pinned(free);
                let Ok(h) = cv(&theta) else {
                    return f64::INFINITY;
                };
                let Ok(lik) =
                    WindowedLikelihood::new(sample, weights, window, flags, h, config.self_term)
                else {
                    return f64::INFINITY;
                };
                match lik.evaluate(&theta) {
                    Ok(v) if v.contributing > 0 => -v.value,
                    _ => f64::INFINITY,
                }
            };
            let mut starts = vec![centre.clone()];
            starts.extend(jitters.iter().cloned());
            let results: Vec<SimplexResult> = starts
                .iter()
                .map(|s| nelder_mead(objective, s, &config.optimizer))
                .collect();
            evals += results.iter().map(|r| r.evals).sum::<usize>();
            let best = best_of(&results).ok_or_else(|| {
                Error::DegenerateObjective { excluded: events }.at("maximization")
            })?;
            converged = best.converged;
            let theta = with_pinned(&best.x);
            let h = cv(&theta).stage("bandwidth")?;
            (theta, h, 1)
        }
    };

    let lik = WindowedLikelihood::new(sample, weights, window, flags, h, config.self_term)?;
    let loglik = lik
        .evaluate(&theta)?
        .require_contributions()
        .stage("objective")?;
    let loglik_at_prelim = lik.evaluate(&prelim.theta)?.value;
    let components = asymptotic_components(
        sample,
        &setup.est,
        &theta,
        h,
        window,
        prelim.tau0,
        flags,
        config.self_term,
        index_floor,
    )
    .stage("asymptotic components")?;
    let criterion = match config.criterion {
        TruncationCriterion::Sandwich => components.e2_sandwich,
        TruncationCriterion::ScoreNorm => components.e2,
    };
    let (largest_weight_raw, largest_weight, n_retained) =
        truncated_weight(sample, &setup.est, tau);
    Ok(BranchFit {
        tau,
        theta,
        h,
        loglik,
        loglik_at_prelim,
        components,
        criterion,
        alternations,
        converged,
        evals,
        n_retained,
        largest_weight_raw,
        largest_weight,
    })
}

/// Kaplan-Meier mass of the largest uncensored `Z ≤ τ` (raw, and relative to
/// the total mass at or below `τ`) and the count `#{Z_i ≤ τ}`.
pub fn truncated_weight(
    sample: &CensoredSample,
    est: &SurvivalEstimates,
    tau: f64,
) -> (f64, f64, usize) {
    let mut raw = 0.0;
    let mut total = 0.0;
    let mut count = 0;
    for &i in sample.order() {
        if sample.z()[i] > tau {
            break;
        }
        count += 1;
        if sample.delta()[i] {
            raw = est.weights.get(i);
            total += raw;
        }
    }
    let rel = if total > 0.0 { raw / total } else { 0.0 };
    (raw, rel, count)
}

/// Mass of the largest uncensored observation in the full sample.
pub fn largest_weight(sample: &CensoredSample, est: &SurvivalEstimates) -> f64 {
    sample
        .order()
        .iter()
        .rev()
        .find(|&&i| sample.delta()[i])
        .map_or(0.0, |&i| est.weights.get(i))
}

fn record_of(
    outcome: &TauOutcome<BranchFit>,
    sample: &CensoredSample,
    est: &SurvivalEstimates,
) -> TauRecord {
    match outcome {
        TauOutcome::Fitted { value: b, .. } => TauRecord {
            tau: b.tau,
            ok: true,
            theta: Some(b.theta.clone()),
            h: Some(b.h),
            e2: Some(b.components.e2),
            e2_sandwich: Some(b.components.e2_sandwich),
            criterion: Some(b.criterion),
            n_retained: b.n_retained,
            largest_weight: Some(b.largest_weight),
            largest_weight_raw: Some(b.largest_weight_raw),
            reason: None,
        },
        TauOutcome::Failed { tau, reason } => TauRecord {
            tau: *tau,
            ok: false,
            theta: None,
            h: None,
            e2: None,
            e2_sandwich: None,
            criterion: None,
            n_retained: truncated_weight(sample, est, *tau).2,
            largest_weight: None,
            largest_weight_raw: None,
            reason: Some(reason.clone()),
        },
    }
}

fn assemble(
    sample: &CensoredSample,
    setup: &Setup,
    config: &FitConfig,
    branch: &BranchFit,
    e2_table: Vec<TauRecord>,
    tau_grid: Vec<f64>,
) -> IndexModelFit {
    let c = &branch.components;
    IndexModelFit {
        n: sample.n(),
        d: sample.d(),
        theta_hat: branch.theta.clone(),
        theta_prelim: setup.prelim.theta.clone(),
        h_hat: branch.h,
        tau_hat: branch.tau,
        tau0: setup.prelim.tau0,
        tau1: setup.prelim.tau1,
        h0: setup.prelim.h0,
        trim_level: setup.trim.level,
        trim_retained: setup.trim.retained(),
        h_grid: setup.h_grid.clone(),
        tau_grid,
        e2_table,
        criterion: config.criterion,
        e2: c.e2,
        e2_sandwich: c.e2_sandwich,
        v_hat: to_rows(&c.v_hat),
        w_hat: c.w_hat.iter().copied().collect(),
        delta_hat: to_rows(&c.delta_hat),
        sigma_hat: to_rows(&c.sigma_hat),
        singular: c.singular,
        loglik: branch.loglik,
        loglik_at_prelim: branch.loglik_at_prelim,
        prelim_loglik: setup.prelim.loglik,
        convergence: ConvergenceReport {
            prelim_converged: setup.prelim.converged,
            prelim_evals: setup.prelim.evals,
            alternations: branch.alternations,
            converged: branch.converged,
            evals: branch.evals,
        },
        n_retained: branch.n_retained,
        weight_inf: largest_weight(sample, &setup.est),
        weight_tau: branch.largest_weight,
        weight_tau_raw: branch.largest_weight_raw,
        censored: sample.censored_count(),
        no_censoring: sample.is_fully_observed(),
    }
}

/// The adaptive fit together with every candidate branch.
#[derive(Debug, Clone)]
pub struct DetailedFit {
    pub fit: IndexModelFit,
    pub setup: Setup,
    pub branches: Vec<TauOutcome<BranchFit>>,
}

impl DetailedFit {
    /// The branch fitted at exactly `tau`, as a stand-alone fit.
    pub fn branch_fit(
        &self,
        sample: &CensoredSample,
        config: &FitConfig,
        tau: f64,
    ) -> Option<IndexModelFit> {
        self.branches.iter().find_map(|o| match o {
            TauOutcome::Fitted { tau: t, value, .. } if *t == tau => {
                let outcome = TauOutcome::Fitted {
                    tau,
                    e2: value.criterion,
                    value: value.clone(),
                };
                let table = vec![record_of(&outcome, sample, &self.setup.est)];
                Some(assemble(
                    sample,
                    &self.setup,
                    config,
                    value,
                    table,
                    vec![tau],
                ))
            }
            _ => None,
        })
    }
}

pub fn fit_detailed(sample: &CensoredSample, config: &FitConfig) -> Result<DetailedFit> {
    let setup = prepare(sample, config)?;
    let run = |&tau: &f64| match fit_branch(sample, &setup, config, tau) {
        Ok(b) => TauOutcome::Fitted {
            tau,
            e2: b.criterion,
            value: b,
        },
        Err(e) => TauOutcome::Failed {
            tau,
            reason: e.to_string(),
        },
    };
    let branches: Vec<TauOutcome<BranchFit>> = if config.parallel {
        setup.tau_grid.par_iter().map(run).collect()
    } else {
        setup.tau_grid.iter().map(run).collect()
    };
    let table: Vec<TauRecord> = branches
        .iter()
        .map(|o| record_of(o, sample, &setup.est))
        .collect();
    let choice = choose_truncation(branches).stage("truncation")?;
    let TauOutcome::Fitted {
        value: selected, ..
    } = &choice.table[choice.index]
    else {
        return Err(Error::Internal(
            "selected truncation branch has no fit".into(),
        ));
    };
    let fit = assemble(
        sample,
        &setup,
        config,
        selected,
        table,
        setup.tau_grid.clone(),
    );
    Ok(DetailedFit {
        fit,
        branches: choice.table,
        setup,
    })
}

/// Adaptive estimator `θ̂ = θ̂^τ̂`.
pub fn fit(sample: &CensoredSample, config: &FitConfig) -> Result<IndexModelFit> {
    fit_detailed(sample, config).map(|d| d.fit)
}

/// `θ̂^τ` at a single truncation point.
pub fn fixed_tau_fit(
    sample: &CensoredSample,
    config: &FitConfig,
    tau: f64,
) -> Result<IndexModelFit> {
    let setup = prepare(sample, config)?;
    let branch = fit_branch(sample, &setup, config, tau).stage("fixed truncation")?;
    let outcome = TauOutcome::Fitted {
        tau,
        e2: branch.criterion,
        value: branch,
    };
    let table = vec![record_of(&outcome, sample, &setup.est)];
    let TauOutcome::Fitted { value: branch, .. } = &outcome else {
        unreachable!()
    };
    Ok(assemble(sample, &setup, config, branch, table, vec![tau]))
}

/// `Σ̂ = V̂⁻¹ Δ̂ V̂⁻¹` scaled by `1/n`, and `sqrt(diag(Σ̂) / n)`.
pub fn standard_errors(fit: &IndexModelFit, n: usize) -> StandardErrors {
    sandwich_standard_errors(&from_rows(&fit.v_hat), &from_rows(&fit.delta_hat), n)
}

pub fn sandwich_standard_errors(
    v_hat: &nalgebra::DMatrix<f64>,
    delta_hat: &nalgebra::DMatrix<f64>,
    n: usize,
) -> StandardErrors {
    let (sigma, singular) = sandwich(v_hat, delta_hat);
    let scaled = sigma / n as f64;
    let se = (0..scaled.nrows())
        .map(|k| scaled[(k, k)].max(0.0).sqrt())
        .collect();
    StandardErrors {
        sigma_over_n: to_rows(&scaled),
        se,
        singular: singular || robust_inverse(v_hat).1,
    }
}
