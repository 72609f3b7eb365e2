//! Trimming functions and the Kaplan-Meier weighted pseudo-log-likelihood
//!
//! ```text
//! L_n^τ(θ) = Σ_i δ_i W_in 𝟙{Z_i ∈ A_τ} J(X_i) log f̂_θ(Z_i, θ'X_i)
//! ```
//!
//! Terms whose density estimate is trimmed or below the density floor
//! contribute zero and are counted in an exclusion tally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    scaled, validate_theta, DensityEstimate, FourthOrderKernel, KernelEstimator, DENOMINATOR_FLOOR,
};
use crate::survival::{CensoredSample, KmWeights, TauWindow};

/// Default floor below which `f̂` is treated as trimmed.
pub const DENSITY_FLOOR: f64 = 1e-10;

/// Closed box `B` for the preliminary trimming `J_B(x) = 𝟙{x ∈ B}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxTrim {
    intervals: Vec<(f64, f64)>,
}

impl BoxTrim {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::InvalidInput(
                "trimming box has no coordinates".into(),
            ));
        }
        for (c, &(lo, hi)) in intervals.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidInput(format!(
                    "trimming box coordinate {c} interval [{lo}, {hi}] is empty or degenerate"
                )));
            }
        }
        Ok(Self { intervals })
    }

    /// Coordinate-wise `[lower_q, upper_q]` sample quantiles of `X`.
    pub fn from_quantiles(sample: &CensoredSample, lower_q: f64, upper_q: f64) -> Result<Self> {
        let d = sample.d();
        let intervals = (0..d)
            .map(|c| {
                let mut col: Vec<f64> = (0..sample.n()).map(|i| sample.x_row(i)[c]).collect();
                col.sort_by(f64::total_cmp);
                (
                    quantile_sorted(&col, lower_q),
                    quantile_sorted(&col, upper_q),
                )
            })
            .collect();
        Self::new(intervals)
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn contains(&self, x_row: &[f64]) -> bool {
        trimming_fixed(x_row, self)
    }
}

/// `J_B(x)`: one iff every coordinate lies in its closed interval.
pub fn trimming_fixed(x_row: &[f64], bx: &BoxTrim) -> bool {
    x_row.len() == bx.intervals.len()
        && x_row
            .iter()
            .zip(&bx.intervals)
            .all(|(&v, &(lo, hi))| v >= lo && v <= hi)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// `Ĵ₀(x)`: one iff the pilot index density at `θ_pilot'x` exceeds `c`.
pub fn trimming_adaptive(
    x_row: &[f64],
    theta_pilot: &[f64],
    h0: f64,
    window: TauWindow,
    c: f64,
    sample: &CensoredSample,
    weights: &KmWeights,
) -> Result<bool> {
    let est = KernelEstimator::new(sample, weights, theta_pilot, h0, window)?;
    let u: f64 = x_row.iter().zip(theta_pilot).map(|(a, b)| a * b).sum();
    Ok(est.index_density(u)? > c)
}

/// Estimated trimming `Ĵ₀` evaluated at every observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveTrim {
    pub level: f64,
    pub densities: Vec<f64>,
    pub flags: Vec<bool>,
}

impl AdaptiveTrim {
    /// Quantile of the positive pilot index densities used when no level is
    /// given.
    pub const DEFAULT_LEVEL_QUANTILE: f64 = 0.05;

    pub fn build(
        sample: &CensoredSample,
        weights: &KmWeights,
        theta_pilot: &[f64],
        h0: f64,
        window: TauWindow,
        level: Option<f64>,
    ) -> Result<Self> {
        let est = KernelEstimator::new(sample, weights, theta_pilot, h0, window)?;
        let densities = est
            .index()
            .iter()
            .map(|&u| est.index_density(u))
            .collect::<Result<Vec<f64>>>()?;
        let level = match level {
            Some(c) => {
                if !(c >= 0.0 && c.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "trimming level {c} must be >= 0"
                    )));
                }
                c
            }
            None => {
                let mut sorted: Vec<f64> = densities.iter().copied().filter(|&f| f > 0.0).collect();
                if sorted.is_empty() {
                    return Err(Error::DegenerateWindow(
                        "no positive pilot index density".into(),
                    ));
                }
                sorted.sort_by(f64::total_cmp);
                quantile_sorted(&sorted, Self::DEFAULT_LEVEL_QUANTILE)
            }
        };
        let flags = densities.iter().map(|&f| f > level).collect();
        Ok(Self {
            level,
            densities,
            flags,
        })
    }

    pub fn retained(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }
}

/// How the `i`-th observation enters its own density estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfTerm {
    /// Observation `i` is removed from both kernel sums.
    #[default]
    LeaveOneOut,
    PlugIn,
}

impl SelfTerm {
    pub fn exclude(self, i: usize) -> Option<usize> {
        match self {
            SelfTerm::LeaveOneOut => Some(i),
            SelfTerm::PlugIn => None,
        }
    }
}

/// Objective value with its exclusion tally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoglikValue {
    pub value: f64,
    /// Terms `δ_i = 1, Z_i ∈ A_τ` that entered the sum.
    pub contributing: usize,
    /// Terms `δ_i = 1, Z_i ∈ A_τ` dropped by `J` or by a trimmed density.
    pub excluded: usize,
}

impl LoglikValue {
    pub fn require_contributions(self) -> Result<Self> {
        if self.contributing == 0 {
            Err(Error::DegenerateObjective {
                excluded: self.excluded,
            })
        } else {
            Ok(self)
        }
    }
}

/// `L_n^τ` with a caller-supplied density: `density(i)` returns the estimate
/// of `f(Z_i, θ'X_i)` for observation `i`.
pub fn pseudo_loglik<F>(
    sample: &CensoredSample,
    weights: &KmWeights,
    window: TauWindow,
    trim: &[bool],
    density_floor: f64,
    mut density: F,
) -> Result<LoglikValue>
where
    F: FnMut(usize) -> DensityEstimate,
{
    if trim.len() != sample.n() {
        return Err(Error::InvalidInput(
            "trimming flags do not match the sample".into(),
        ));
    }
    let mut out = LoglikValue {
        value: 0.0,
        contributing: 0,
        excluded: 0,
    };
    for i in 0..sample.n() {
        if !sample.delta()[i] || !window.contains(sample.z()[i]) {
            continue;
        }
        if !trim[i] {
            out.excluded += 1;
            continue;
        }
        let f = density(i);
        if f.trimmed || !(f.value >= density_floor) {
            out.excluded += 1;
            continue;
        }
        out.value += weights.get(i) * f.value.ln();
        out.contributing += 1;
    }
    Ok(out)
}

/// Pseudo-log-likelihood at fixed `(h, A_τ, J)` with the response-kernel
/// matrix `K_h(Z_p - Z_q)` precomputed, so that only the index kernel is
/// re-evaluated per `θ`.
#[derive(Debug, Clone)]
pub struct WindowedLikelihood<'a> {
    sample: &'a CensoredSample,
    members: Vec<usize>,
    mass: Vec<f64>,
    is_term: Vec<bool>,
    zker: Vec<f64>,
    h: f64,
    self_term: SelfTerm,
    floor: f64,
}

impl<'a> WindowedLikelihood<'a> {
    pub fn new(
        sample: &'a CensoredSample,
        weights: &KmWeights,
        window: TauWindow,
        trim: &[bool],
        h: f64,
        self_term: SelfTerm,
    ) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "bandwidth must be positive, got {h}"
            )));
        }
        if trim.len() != sample.n() {
            return Err(Error::InvalidInput(
                "trimming flags do not match the sample".into(),
            ));
        }
        let members: Vec<usize> = (0..sample.n())
            .filter(|&i| sample.delta()[i] && window.contains(sample.z()[i]))
            .collect();
        let mass: Vec<f64> = members.iter().map(|&i| weights.get(i)).collect();
        let is_term: Vec<bool> = members.iter().map(|&i| trim[i]).collect();
        let m = members.len();
        let mut zker = vec![0.0; m * m];
        for p in 0..m {
            let zp = sample.z()[members[p]];
            for q in 0..m {
                zker[p * m + q] = scaled(zp - sample.z()[members[q]], h);
            }
        }
        Ok(Self {
            sample,
            members,
            mass,
            is_term,
            zker,
            h,
            self_term,
            floor: DENSITY_FLOOR,
        })
    }

    pub fn with_density_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    /// Observations with `δ_i = 1` and `Z_i ∈ A_τ`.
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn evaluate(&self, theta: &[f64]) -> Result<LoglikValue> {
        validate_theta(theta, self.sample.d())?;
        let m = self.members.len();
        let u: Vec<f64> = self
            .members
            .iter()
            .map(|&i| {
                self.sample
                    .x_row(i)
                    .iter()
                    .zip(theta)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let reach = FourthOrderKernel::SUPPORT * self.h;
        let loo = self.self_term == SelfTerm::LeaveOneOut;
        let mut out = LoglikValue {
            value: 0.0,
            contributing: 0,
            excluded: 0,
        };
        for p in 0..m {
            if !self.is_term[p] {
                out.excluded += 1;
                continue;
            }
            let row = &self.zker[p * m..(p + 1) * m];
            let mut num = 0.0;
            let mut den = 0.0;
            for q in 0..m {
                if loo && q == p {
                    continue;
                }
                let du = u[p] - u[q];
                if du.abs() >= reach {
                    continue;
                }
                let a = self.mass[q] * scaled(du, self.h);
                den += a;
                num += a * row[q];
            }
            if den <= DENOMINATOR_FLOOR {
                out.excluded += 1;
                continue;
            }
            let f = num / den;
            if !(f >= self.floor) {
                out.excluded += 1;
                continue;
            }
            out.value += self.mass[p] * f.ln();
            out.contributing += 1;
        }
        Ok(out)
    }
}
