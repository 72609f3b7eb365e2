//! Product-limit estimators and Kaplan-Meier integrals.
//!
//! Observations are processed in the order `Z` ascending, and among tied `Z`
//! uncensored before censored: a censored observation tied with an event is
//! still at risk for that event. Under that ordering the Kaplan-Meier jump at
//! an uncensored observation satisfies
//!
//! ```text
//! W_i = 1 / (n (1 - Ĝ(Z_i-)))
//! ```
//!
//! where `Ĝ` is the product-limit estimator of the censoring distribution,
//! computed with the events at a tied time already removed from its risk set.
//! Left limits `F(t-)` are evaluated as strict-inequality sums.

use crate::error::{Error, Result};

/// Observed triples `(Z_i, δ_i, X_i)`.
///
/// `x` is stored row-major with `d` columns. Column 0 carries the index
/// coefficient pinned to one.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoredSample {
    z: Vec<f64>,
    delta: Vec<bool>,
    x: Vec<f64>,
    d: usize,
    order: Vec<usize>,
}

impl CensoredSample {
    pub fn new(z: Vec<f64>, delta: Vec<bool>, x: Vec<f64>, d: usize) -> Result<Self> {
        let n = z.len();
        if n == 0 {
            return Err(Error::InvalidInput("sample is empty".into()));
        }
        if d == 0 {
            return Err(Error::InvalidInput(
                "covariate dimension must be at least 1".into(),
            ));
        }
        if delta.len() != n {
            return Err(Error::InvalidInput(format!(
                "z has {n} entries but delta has {}",
                delta.len()
            )));
        }
        if x.len() != n * d {
            return Err(Error::InvalidInput(format!(
                "covariate matrix has {} entries, expected {n} x {d}",
                x.len()
            )));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("z[{i}] is not finite")));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "x[{}][{}] is not finite",
                k / d,
                k % d
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        // events before censored among ties
        order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(delta[b].cmp(&delta[a])));
        Ok(Self {
            z,
            delta,
            x,
            d,
            order,
        })
    }

    /// Builds a sample from numeric event flags, rejecting anything but 0 and 1.
    pub fn from_flags(z: Vec<f64>, flags: &[f64], x: Vec<f64>, d: usize) -> Result<Self> {
        let delta = flags
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                if f == 1.0 {
                    Ok(true)
                } else if f == 0.0 {
                    Ok(false)
                } else {
                    Err(Error::InvalidInput(format!(
                        "delta[{i}] = {f} is not 0 or 1"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(z, delta, x, d)
    }

    pub fn from_rows(z: Vec<f64>, delta: Vec<bool>, rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput(
                "covariate rows have unequal lengths".into(),
            ));
        }
        Self::new(z, delta, rows.concat(), d)
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn delta(&self) -> &[bool] {
        &self.delta
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Observation indices sorted by `Z`, events first among ties.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn min_z(&self) -> f64 {
        self.z[self.order[0]]
    }

    pub fn max_z(&self) -> f64 {
        self.z[*self.order.last().expect("non-empty")]
    }

    pub fn censored_count(&self) -> usize {
        self.delta.iter().filter(|d| !**d).count()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.delta.iter().all(|d| *d)
    }

    /// Index values `θ'X_i` for every observation.
    pub fn index(&self, theta: &[f64]) -> Vec<f64> {
        debug_assert_eq!(theta.len(), self.d);
        self.x
            .chunks_exact(self.d)
            .map(|row| row.iter().zip(theta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Default upper truncation bound: the largest uncensored `Z` strictly
    /// below the overall maximum.
    pub fn default_tau0(&self) -> Result<f64> {
        let max = self.max_z();
        self.order
            .iter()
            .rev()
            .find(|&&i| self.delta[i] && self.z[i] < max)
            .map(|&i| self.z[i])
            .ok_or_else(|| {
                Error::InsufficientData(
                    "no uncensored observation strictly below the largest follow-up time".into(),
                )
            })
    }

    /// Uncensored follow-up times in increasing order.
    pub fn uncensored_times(&self) -> Vec<f64> {
        self.order
            .iter()
            .filter(|&&i| self.delta[i])
            .map(|&i| self.z[i])
            .collect()
    }
}

/// Closed response window `A_τ = [τ₁, τ]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TauWindow {
    pub lower: f64,
    pub upper: f64,
}

impl TauWindow {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite()) || upper < lower {
            return Err(Error::InvalidInput(format!(
                "window [{lower}, {upper}] is not a finite interval"
            )));
        }
        Ok(Self { lower, upper })
    }

    /// Window covering every observation.
    pub fn covering(sample: &CensoredSample) -> Self {
        Self {
            lower: sample.min_z(),
            upper: sample.max_z(),
        }
    }

    #[inline]
    pub fn contains(&self, z: f64) -> bool {
        z >= self.lower && z <= self.upper
    }
}

/// Right-continuous piecewise-constant function starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    /// `values[k]` is the function value on `[times[k], times[k + 1])`.
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidInput("step function length mismatch".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "step function jump times must be strictly increasing".into(),
            ));
        }
        Ok(Self { times, values })
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at `t`.
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.values[k - 1]
        }
    }

    /// Left limit at `t`.
    pub fn eval_left(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            0.0
        } else {
            self.values[k - 1]
        }
    }

    /// `(time, jump size)` pairs.
    pub fn jumps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().enumerate().map(|(k, &t)| {
            let prev = if k == 0 { 0.0 } else { self.values[k - 1] };
            (t, self.values[k] - prev)
        })
    }
}

/// Per-observation Kaplan-Meier masses `δ_i W_in`, indexed like the sample.
///
/// Censored observations carry zero mass.
#[derive(Debug, Clone, PartialEq)]
pub struct KmWeights {
    w: Vec<f64>,
}

impl KmWeights {
    pub fn from_vec(w: Vec<f64>) -> Self {
        Self { w }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn get(&self, i: usize) -> f64 {
        self.w[i]
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// `F̂_Y(max Z)`.
    pub fn total_mass(&self) -> f64 {
        self.w.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            w: self.w.iter().map(|w| w * factor).collect(),
        }
    }
}

/// Jumps of the Kaplan-Meier estimator of `F_Y` at each observation.
///
/// The jump at an uncensored observation is `S(Z_i-) / r_i`, with `r_i` its
/// position-wise risk set size. It is accumulated in the equivalent form
/// `(1/n) ∏ r_c / (r_c - 1)` over censored observations sorted before `i`,
/// which reproduces `1/n` exactly when nothing is censored.
pub fn km_jump_weights(sample: &CensoredSample) -> KmWeights {
    let n = sample.n();
    let mut w = vec![0.0; n];
    let mut inflation = 1.0;
    for (pos, &i) in sample.order().iter().enumerate() {
        let at_risk = (n - pos) as f64;
        if sample.delta()[i] {
            w[i] = inflation / n as f64;
        } else if at_risk > 1.0 {
            inflation *= at_risk / (at_risk - 1.0);
        }
    }
    KmWeights { w }
}

/// Product-limit estimator `Ĝ` of the censoring distribution function.
pub fn censoring_distribution(sample: &CensoredSample) -> StepFunction {
    let n = sample.n();
    let mut times: Vec<f64> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut survival = 1.0;
    for (pos, &i) in sample.order().iter().enumerate() {
        if sample.delta()[i] {
            continue;
        }
        let at_risk = (n - pos) as f64;
        survival *= 1.0 - 1.0 / at_risk;
        let t = sample.z()[i];
        let value = 1.0 - survival;
        match times.last() {
            Some(&last) if last == t => *values.last_mut().expect("paired") = value,
            _ => {
                times.push(t);
                values.push(value);
            }
        }
    }
    StepFunction { times, values }
}

/// Empirical distribution function `Ĥ` of the follow-up times.
pub fn empirical_cdf(sample: &CensoredSample) -> StepFunction {
    let n = sample.n() as f64;
    let mut times: Vec<f64> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (pos, &i) in sample.order().iter().enumerate() {
        let t = sample.z()[i];
        let value = (pos + 1) as f64 / n;
        match times.last() {
            Some(&last) if last == t => *values.last_mut().expect("paired") = value,
            _ => {
                times.push(t);
                values.push(value);
            }
        }
    }
    StepFunction { times, values }
}

/// Kaplan-Meier weights together with `Ĝ` and `Ĥ`, computed once per sample.
#[derive(Debug, Clone)]
pub struct SurvivalEstimates {
    pub weights: KmWeights,
    pub censoring: StepFunction,
    pub observed: StepFunction,
}

impl SurvivalEstimates {
    pub fn new(sample: &CensoredSample) -> Self {
        Self {
            weights: km_jump_weights(sample),
            censoring: censoring_distribution(sample),
            observed: empirical_cdf(sample),
        }
    }
}

/// `∫ φ dF̂ = Σ δ_i W_in φ(X_i, Z_i)`.
pub fn stute_integral<F>(sample: &CensoredSample, weights: &KmWeights, mut phi: F) -> Result<f64>
where
    F: FnMut(&[f64], f64) -> f64,
{
    let mut acc = 0.0;
    for i in 0..sample.n() {
        if !sample.delta()[i] {
            continue;
        }
        let v = phi(sample.x_row(i), sample.z()[i]);
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        acc += weights.get(i) * v;
    }
    Ok(acc)
}

/// Vector-valued Kaplan-Meier integral.
pub fn stute_integral_vec<F>(
    sample: &CensoredSample,
    weights: &KmWeights,
    dim: usize,
    mut phi: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Vec<f64>,
{
    let mut acc = vec![0.0; dim];
    for i in 0..sample.n() {
        if !sample.delta()[i] {
            continue;
        }
        let v = phi(sample.x_row(i), sample.z()[i]);
        if v.len() != dim || v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        let w = weights.get(i);
        for (a, c) in acc.iter_mut().zip(&v) {
            *a += w * c;
        }
    }
    Ok(acc)
}

/// One row of the estimated influence function.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceRow {
    pub psi: Vec<f64>,
}

/// Estimated influence function `ψ̂(Z_i, δ_i, X_i; f₁ 𝟙_{A_τ})` of the
/// Kaplan-Meier integral of `f₁`, for every observation.
///
/// `f1(i, x_row, z)` is called only for uncensored observations with
/// `Z_i ∈ A_τ`. The censoring-martingale integral is evaluated in closed
/// form: with `γ̂(y) = Σ_j δ_j W_j f₁(X_j, Z_j) 𝟙{y ≤ Z_j ≤ τ₀, Z_j ∈ A_τ}`,
///
/// ```text
/// ψ̂_i = δ_i f₁_i 𝟙{Z_i ∈ A_τ} / (1 - Ĝ(Z_i-))
///      + (1 - δ_i) γ̂(Z_i) / (1 - Ĥ(Z_i-))
///      - Σ_{t ≤ Z_i, ΔĜ(t) > 0} γ̂(t) ΔĜ(t) / ((1 - Ĝ(t-)) (1 - Ĥ(t-)))
/// ```
pub fn influence_psi<F>(
    sample: &CensoredSample,
    est: &SurvivalEstimates,
    window: TauWindow,
    tau0: f64,
    dim: usize,
    mut f1: F,
) -> Result<Vec<InfluenceRow>>
where
    F: FnMut(usize, &[f64], f64) -> Vec<f64>,
{
    if window.upper > tau0 {
        return Err(Error::InvalidInput(format!(
            "truncation point {} exceeds tau0 = {tau0}",
            window.upper
        )));
    }
    let n = sample.n();

    // f1 at contributing points, in sorted order for suffix sums
    let mut values: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut contrib_z: Vec<f64> = Vec::new();
    let mut contrib_v: Vec<Vec<f64>> = Vec::new();
    for &i in sample.order() {
        let z = sample.z()[i];
        if !sample.delta()[i] || !window.contains(z) {
            continue;
        }
        let v = f1(i, sample.x_row(i), z);
        if v.len() != dim || v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        let g_left = est.censoring.eval_left(z);
        if 1.0 - g_left <= 0.0 {
            return Err(Error::SingularWeight { index: i });
        }
        contrib_z.push(z);
        contrib_v.push(v.iter().map(|c| c * est.weights.get(i)).collect());
        values[i] = Some(v);
    }
    // suffix[k] = Σ_{m ≥ k} contrib_v[m]
    let mut suffix = vec![vec![0.0; dim]; contrib_z.len() + 1];
    for k in (0..contrib_z.len()).rev() {
        for c in 0..dim {
            suffix[k][c] = suffix[k + 1][c] + contrib_v[k][c];
        }
    }
    let gamma = |y: f64| -> &[f64] {
        let k = contrib_z.partition_point(|&z| z < y);
        &suffix[k]
    };

    // cumulative compensator terms over censoring jumps
    let jump_times: Vec<f64> = est.censoring.jump_times().to_vec();
    let mut compensator = vec![vec![0.0; dim]; jump_times.len() + 1];
    for (k, (t, dg)) in est.censoring.jumps().enumerate() {
        let denom = (1.0 - est.censoring.eval_left(t)) * (1.0 - est.observed.eval_left(t));
        let g = gamma(t);
        for c in 0..dim {
            let term = if denom > 0.0 { g[c] * dg / denom } else { 0.0 };
            compensator[k + 1][c] = compensator[k][c] + term;
        }
    }

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let z = sample.z()[i];
        let mut psi = vec![0.0; dim];
        if let Some(v) = &values[i] {
            let scale = 1.0 / (1.0 - est.censoring.eval_left(z));
            for c in 0..dim {
                psi[c] += v[c] * scale;
            }
        }
        if !sample.delta()[i] {
            let g = gamma(z);
            let h_surv = 1.0 - est.observed.eval_left(z);
            for c in 0..dim {
                psi[c] += g[c] / h_surv;
            }
        }
        let k = jump_times.partition_point(|&t| t <= z);
        for c in 0..dim {
            psi[c] -= compensator[k][c];
        }
        rows.push(InfluenceRow { psi });
    }
    Ok(rows)
}
