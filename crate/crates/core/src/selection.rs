//! Data-driven choice of the bandwidth and of the truncation point.
//!
//! The bandwidth minimizes a Kaplan-Meier weighted cross-validation version
//! of the integrated squared error of `f̂`. The truncation point minimizes a
//! plug-in estimate of the asymptotic mean squared error of `θ̂^τ`, built
//! from `V̂`, `Ŵ` and `Δ̂` below. All matrices live in the `d - 1` free
//! coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{scaled, FourthOrderKernel, KernelEstimator, DENOMINATOR_FLOOR};
use crate::objective::{SelfTerm, DENSITY_FLOOR};
use crate::survival::{influence_psi, CensoredSample, KmWeights, SurvivalEstimates, TauWindow};

/// Default number of trapezoid nodes for `∫_{A_τ} f̂² dz`.
pub const DEFAULT_QUAD_POINTS: usize = 128;

/// Candidate bandwidths and truncation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionGrids {
    pub h_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
}

impl SelectionGrids {
    pub fn new(h_grid: Vec<f64>, tau_grid: Vec<f64>, tau1: f64, tau0: f64) -> Result<Self> {
        validate_h_grid(&h_grid)?;
        if tau_grid.is_empty() {
            return Err(Error::InvalidInput("truncation grid is empty".into()));
        }
        if tau_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "truncation grid must be strictly increasing".into(),
            ));
        }
        if let Some(t) = tau_grid.iter().find(|&&t| !(t > tau1 && t <= tau0)) {
            return Err(Error::InvalidInput(format!(
                "truncation point {t} outside ({tau1}, {tau0}]"
            )));
        }
        Ok(Self { h_grid, tau_grid })
    }
}

pub fn validate_h_grid(h_grid: &[f64]) -> Result<()> {
    if h_grid.is_empty() {
        return Err(Error::InvalidInput("bandwidth grid is empty".into()));
    }
    if h_grid.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(Error::InvalidInput(
            "bandwidths must be positive and finite".into(),
        ));
    }
    if h_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput(
            "bandwidth grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Ten log-spaced bandwidths over `[0.5, 2] · σ · n^{-1/7}`.
pub fn default_h_grid(index_sd: f64, n: usize) -> Vec<f64> {
    let base = index_sd * (n as f64).powf(-1.0 / 7.0);
    let (lo, hi) = ((0.5 * base).ln(), (2.0 * base).ln());
    (0..10)
        .map(|k| (lo + (hi - lo) * k as f64 / 9.0).exp())
        .collect()
}

/// Uncensored order statistics at the deciles from 50% to 100%, capped at
/// `tau0`, deduplicated.
pub fn default_tau_grid(sample: &CensoredSample, tau0: f64) -> Vec<f64> {
    let times = sample.uncensored_times();
    let m = times.len();
    let mut grid: Vec<f64> = Vec::new();
    if m == 0 {
        return grid;
    }
    for k in 5..=10 {
        let q = k as f64 / 10.0;
        let pos = ((q * m as f64).ceil() as usize).clamp(1, m) - 1;
        let t = times[pos].min(tau0);
        if grid.last().is_none_or(|&last| t > last) {
            grid.push(t);
        }
    }
    grid
}

/// Cross-validation criterion for each bandwidth, and the chosen one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthChoice {
    pub h: f64,
    pub criteria: Vec<Option<f64>>,
}

/// Precomputed pieces of the cross-validation criterion at fixed `A_τ`.
struct CvWorkspace<'a> {
    sample: &'a CensoredSample,
    members: Vec<usize>,
    mass: Vec<f64>,
    grid: Vec<f64>,
    quad_weights: Vec<f64>,
}

impl<'a> CvWorkspace<'a> {
    fn new(
        sample: &'a CensoredSample,
        weights: &KmWeights,
        window: TauWindow,
        quad_points: usize,
    ) -> Result<Self> {
        if quad_points < 2 {
            return Err(Error::InvalidInput(
                "quadrature needs at least 2 points".into(),
            ));
        }
        let members: Vec<usize> = (0..sample.n())
            .filter(|&i| sample.delta()[i] && window.contains(sample.z()[i]))
            .collect();
        let mass = members.iter().map(|&i| weights.get(i)).collect();
        let step = (window.upper - window.lower) / (quad_points - 1) as f64;
        let grid = (0..quad_points)
            .map(|g| window.lower + g as f64 * step)
            .collect();
        let mut quad_weights = vec![step; quad_points];
        quad_weights[0] *= 0.5;
        quad_weights[quad_points - 1] *= 0.5;
        Ok(Self {
            sample,
            members,
            mass,
            grid,
            quad_weights,
        })
    }

    fn criterion(&self, u: &[f64], h: f64) -> Option<f64> {
        let m = self.members.len();
        let gn = self.grid.len();
        let reach = FourthOrderKernel::SUPPORT * h;
        let z: Vec<f64> = self.members.iter().map(|&i| self.sample.z()[i]).collect();
        // K_h(z_g - Z_q), row per member
        let mut zgrid = vec![0.0; m * gn];
        for q in 0..m {
            for (g, &zg) in self.grid.iter().enumerate() {
                zgrid[q * gn + g] = scaled(zg - z[q], h);
            }
        }
        let mut total = 0.0;
        let mut terms = 0usize;
        let mut active: Vec<(usize, f64)> = Vec::with_capacity(m);
        let mut num = vec![0.0; gn];
        for p in 0..m {
            active.clear();
            let mut den = 0.0;
            for q in 0..m {
                let du = u[p] - u[q];
                if du.abs() < reach {
                    let a = self.mass[q] * scaled(du, h);
                    den += a;
                    active.push((q, a));
                }
            }
            let self_a = active
                .iter()
                .find(|(q, _)| *q == p)
                .map_or(0.0, |(_, a)| *a);
            let den_loo = den - self_a;
            if den <= DENOMINATOR_FLOOR || den_loo <= DENOMINATOR_FLOOR {
                continue;
            }
            num.iter_mut().for_each(|v| *v = 0.0);
            let mut num_loo = 0.0;
            for &(q, a) in &active {
                let row = &zgrid[q * gn..(q + 1) * gn];
                for (acc, k) in num.iter_mut().zip(row) {
                    *acc += a * k;
                }
                if q != p {
                    num_loo += a * scaled(z[p] - z[q], h);
                }
            }
            let integral: f64 = num
                .iter()
                .zip(&self.quad_weights)
                .map(|(v, w)| {
                    let f = v / den;
                    w * f * f
                })
                .sum();
            let loo = num_loo / den_loo;
            total += self.mass[p] * (integral - 2.0 * loo);
            terms += 1;
        }
        (terms > 0).then_some(total)
    }
}

/// Cross-validation criterion at a single bandwidth; `None` when every term
/// is excluded by a vanishing denominator.
pub fn cv_criterion(
    sample: &CensoredSample,
    weights: &KmWeights,
    theta: &[f64],
    window: TauWindow,
    h: f64,
    quad_points: usize,
) -> Result<Option<f64>> {
    let ws = CvWorkspace::new(sample, weights, window, quad_points)?;
    let u: Vec<f64> = ws
        .members
        .iter()
        .map(|&i| sample.x_row(i).iter().zip(theta).map(|(a, b)| a * b).sum())
        .collect();
    Ok(ws.criterion(&u, h))
}

/// Bandwidth minimizing
/// `Σ_i W_in 𝟙{Z_i ∈ A_τ} { ∫_{A_τ} f̂(z, θ'X_i)² dz - 2 f̂_{-i}(Z_i, θ'X_i) }`
/// over the grid. Ties go to the larger bandwidth.
pub fn cv_bandwidth(
    sample: &CensoredSample,
    weights: &KmWeights,
    theta: &[f64],
    window: TauWindow,
    h_grid: &[f64],
    quad_points: usize,
) -> Result<BandwidthChoice> {
    validate_h_grid(h_grid)?;
    crate::kernel::validate_theta(theta, sample.d())?;
    let ws = CvWorkspace::new(sample, weights, window, quad_points)?;
    let u: Vec<f64> = ws
        .members
        .iter()
        .map(|&i| sample.x_row(i).iter().zip(theta).map(|(a, b)| a * b).sum())
        .collect();
    let criteria: Vec<Option<f64>> = h_grid.iter().map(|&h| ws.criterion(&u, h)).collect();
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in criteria.iter().enumerate() {
        if let Some(c) = *c {
            if best.is_none_or(|(_, b)| c <= b) {
                best = Some((k, c));
            }
        }
    }
    match best {
        Some((k, _)) => Ok(BandwidthChoice {
            h: h_grid[k],
            criteria,
        }),
        None => Err(Error::Selection(
            "cross-validation criterion is degenerate for every bandwidth".into(),
        )),
    }
}

/// Plug-in pieces of the asymptotic variance at a fitted `θ̂^τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticComponents {
    pub v_hat: DMatrix<f64>,
    pub w_hat: DVector<f64>,
    pub delta_hat: DMatrix<f64>,
    /// `n⁻¹ Ŵ' V̂⁻¹ V̂⁻¹ Ŵ`.
    pub e2: f64,
    /// `n⁻¹ tr(V̂⁻¹ Δ̂ V̂⁻¹)`.
    pub e2_sandwich: f64,
    pub sigma_hat: DMatrix<f64>,
    /// `V̂` was rank deficient and a pseudo-inverse was used.
    pub singular: bool,
    pub contributing: usize,
    pub n: usize,
}

/// Inverse of a symmetric matrix, falling back to the pseudo-inverse. The
/// flag reports the fallback.
pub fn robust_inverse(v: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let k = v.nrows();
    if k == 0 {
        return (DMatrix::zeros(0, 0), false);
    }
    let svd = v.clone().svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    let singular = !(max > 0.0) || min <= 1e-12 * max;
    if !singular {
        if let Some(inv) = v.clone().try_inverse() {
            return (inv, false);
        }
    }
    let pinv = v
        .clone()
        .pseudo_inverse(1e-12 * max.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(k, k));
    (pinv, true)
}

/// `n⁻¹ Ŵ' V̂⁻¹ V̂⁻¹ Ŵ`, with the singularity flag of `V̂`.
pub fn score_norm_e2(v_hat: &DMatrix<f64>, w_hat: &DVector<f64>, n: usize) -> (f64, bool) {
    let (inv, singular) = robust_inverse(v_hat);
    let step = &inv * w_hat;
    (step.norm_squared() / n as f64, singular)
}

/// `V̂⁻¹ Δ̂ V̂⁻¹`, symmetrized.
pub fn sandwich(v_hat: &DMatrix<f64>, delta_hat: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let (inv, singular) = robust_inverse(v_hat);
    let s = &inv * delta_hat * &inv;
    let sym = (&s + s.transpose()) * 0.5;
    (sym, singular)
}

/// `f̂₁(X_i, Z_i) = Ĵ₀(X_i) ∇_θ f̂ / f̂` in the free coordinates, for the
/// uncensored in-window observations whose estimate is not trimmed.
///
/// Observations whose normalized in-window index density falls below
/// `index_floor` are dropped as well.
#[allow(clippy::too_many_arguments)]
pub fn score_contributions(
    sample: &CensoredSample,
    weights: &KmWeights,
    theta: &[f64],
    h: f64,
    window: TauWindow,
    trim: &[bool],
    self_term: SelfTerm,
    index_floor: f64,
) -> Result<Vec<Option<Vec<f64>>>> {
    let est = KernelEstimator::new(sample, weights, theta, h, window)?;
    let total: f64 = est.mass().iter().sum();
    let out = (0..sample.n())
        .map(|i| {
            let z = sample.z()[i];
            if !sample.delta()[i] || !window.contains(z) || !trim[i] {
                return None;
            }
            let exclude = self_term.exclude(i);
            let f = est.conditional_density_excluding(z, est.index()[i], exclude);
            if f.trimmed || !(f.value >= DENSITY_FLOOR) || f.denominator < index_floor * total {
                return None;
            }
            let g = est.gradient(z, sample.x_row(i), exclude);
            Some(g[1..].iter().map(|c| c / f.value).collect())
        })
        .collect();
    Ok(out)
}

/// `V̂`, `Ŵ`, `Δ̂` and the two mean-squared-error estimates at `θ̂^τ(h)`.
///
/// `index_floor` is passed to [`score_contributions`].
#[allow(clippy::too_many_arguments)]
pub fn asymptotic_components(
    sample: &CensoredSample,
    est: &SurvivalEstimates,
    theta_hat: &[f64],
    h: f64,
    window: TauWindow,
    tau0: f64,
    trim: &[bool],
    self_term: SelfTerm,
    index_floor: f64,
) -> Result<AsymptoticComponents> {
    let n = sample.n();
    let k = sample.d() - 1;
    let f1 = score_contributions(
        sample,
        &est.weights,
        theta_hat,
        h,
        window,
        trim,
        self_term,
        index_floor,
    )?;
    let contributing = f1.iter().filter(|v| v.is_some()).count();
    if contributing < k + 1 {
        return Err(Error::InsufficientData(format!(
            "{contributing} contributing observations for {k} free index coefficients"
        )));
    }

    let mut v_hat = DMatrix::<f64>::zeros(k, k);
    for (i, row) in f1.iter().enumerate() {
        if let Some(g) = row {
            let g = DVector::from_column_slice(g);
            v_hat += est.weights.get(i) * &g * g.transpose();
        }
    }
    let v_hat = (&v_hat + v_hat.transpose()) * 0.5;

    let psi = influence_psi(sample, est, window, tau0, k, |i, _, _| {
        f1[i].clone().unwrap_or_else(|| vec![0.0; k])
    })?;
    let mut mean = DVector::<f64>::zeros(k);
    for row in &psi {
        mean += DVector::from_column_slice(&row.psi);
    }
    let w_hat = &mean / (n as f64).sqrt();
    mean /= n as f64;
    let mut delta_hat = DMatrix::<f64>::zeros(k, k);
    for row in &psi {
        let c = DVector::from_column_slice(&row.psi) - &mean;
        delta_hat += &c * c.transpose();
    }
    delta_hat /= n as f64;
    let delta_hat = (&delta_hat + delta_hat.transpose()) * 0.5;

    let (e2, singular) = score_norm_e2(&v_hat, &w_hat, n);
    let (sigma_hat, _) = sandwich(&v_hat, &delta_hat);
    let e2_sandwich = sigma_hat.trace() / n as f64;
    Ok(AsymptoticComponents {
        v_hat,
        w_hat,
        delta_hat,
        e2,
        e2_sandwich,
        sigma_hat,
        singular,
        contributing,
        n,
    })
}

/// Result of one candidate truncation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TauOutcome<T> {
    Fitted { tau: f64, e2: f64, value: T },
    Failed { tau: f64, reason: String },
}

impl<T> TauOutcome<T> {
    pub fn tau(&self) -> f64 {
        match self {
            TauOutcome::Fitted { tau, .. } | TauOutcome::Failed { tau, .. } => *tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationChoice<T> {
    pub index: usize,
    pub tau: f64,
    pub table: Vec<TauOutcome<T>>,
}

/// Picks the fitted candidate with the smallest criterion; ties go to the
/// larger `τ`. Outcomes must be ordered by increasing `τ`.
pub fn choose_truncation<T>(table: Vec<TauOutcome<T>>) -> Result<TruncationChoice<T>> {
    let mut best: Option<(usize, f64)> = None;
    for (k, outcome) in table.iter().enumerate() {
        if let TauOutcome::Fitted { e2, .. } = outcome {
            if e2.is_finite() && best.is_none_or(|(_, b)| *e2 <= b) {
                best = Some((k, *e2));
            }
        }
    }
    match best {
        Some((index, _)) => Ok(TruncationChoice {
            index,
            tau: table[index].tau(),
            table,
        }),
        None => {
            let reasons: Vec<String> = table
                .iter()
                .map(|o| match o {
                    TauOutcome::Failed { tau, reason } => format!("tau={tau}: {reason}"),
                    TauOutcome::Fitted { tau, e2, .. } => format!("tau={tau}: criterion {e2}"),
                })
                .collect();
            Err(Error::Selection(format!(
                "every truncation candidate failed ({})",
                reasons.join("; ")
            )))
        }
    }
}

/// Fits each candidate with `per_tau`, which returns the fit and its
/// criterion, and selects the minimizer.
pub fn select_truncation<T, F>(tau_grid: &[f64], mut per_tau: F) -> Result<TruncationChoice<T>>
where
    F: FnMut(f64) -> Result<(T, f64)>,
{
    if tau_grid.is_empty() {
        return Err(Error::InvalidInput("truncation grid is empty".into()));
    }
    let table = tau_grid
        .iter()
        .map(|&tau| match per_tau(tau) {
            Ok((value, e2)) => TauOutcome::Fitted { tau, e2, value },
            Err(e) => TauOutcome::Failed {
                tau,
                reason: e.to_string(),
            },
        })
        .collect();
    choose_truncation(table)
}
