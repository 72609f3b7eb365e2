//! Fourth-order kernel `K = 2k - k*k` built from the Epanechnikov kernel, and
//! the kernel estimator of the conditional density of the response given the
//! index `θ'X`.

use crate::error::{Error, Result};
use crate::survival::{CensoredSample, KmWeights, TauWindow};

/// Denominators at or below this value mark an estimate as trimmed.
pub const DENOMINATOR_FLOOR: f64 = 1e-10;

/// Epanechnikov kernel `k(u) = 3/4 (1 - u²)` on `[-1, 1]`.
#[inline]
pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Self-convolution `(k*k)(u) = 3/160 (2 - |u|)³ (u² + 6|u| + 4)` on `[-2, 2]`.
#[inline]
pub fn epanechnikov_self_convolution(u: f64) -> f64 {
    let a = u.abs();
    if a >= 2.0 {
        return 0.0;
    }
    let r = 2.0 - a;
    3.0 / 160.0 * r * r * r * (a * a + 6.0 * a + 4.0)
}

/// The kernel `2k - k*k`: integrates to one, with vanishing first three
/// moments, supported on `[-2, 2]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FourthOrderKernel;

impl FourthOrderKernel {
    pub const SUPPORT: f64 = 2.0;

    #[inline]
    pub fn value(u: f64) -> f64 {
        let a = u.abs();
        if a >= 2.0 {
            return 0.0;
        }
        let r = 2.0 - a;
        let conv = 3.0 / 160.0 * r * r * r * (a * a + 6.0 * a + 4.0);
        if a <= 1.0 {
            1.5 * (1.0 - a * a) - conv
        } else {
            -conv
        }
    }

    /// First derivative. At `|u| = 1`, where `2k` has a corner, the outer
    /// piece is used.
    #[inline]
    pub fn d1(u: f64) -> f64 {
        let a = u.abs();
        if a >= 2.0 {
            return 0.0;
        }
        let r = 2.0 - a;
        let conv = -3.0 / 32.0 * r * r * u * (a + 4.0);
        if a < 1.0 {
            -3.0 * u - conv
        } else {
            -conv
        }
    }

    #[inline]
    pub fn d2(u: f64) -> f64 {
        let a = u.abs();
        if a >= 2.0 {
            return 0.0;
        }
        let conv = 3.0 / 8.0 * (2.0 - a) * (a * a + 2.0 * a - 2.0);
        if a < 1.0 {
            -3.0 - conv
        } else {
            -conv
        }
    }
}

/// `K`, `K'` or `K''` at `u`.
pub fn kernel_eval(u: f64, order: u8) -> Result<f64> {
    match order {
        0 => Ok(FourthOrderKernel::value(u)),
        1 => Ok(FourthOrderKernel::d1(u)),
        2 => Ok(FourthOrderKernel::d2(u)),
        _ => Err(Error::InvalidInput(format!(
            "kernel derivative order {order} not in 0..=2"
        ))),
    }
}

/// `K_h(v) = K(v / h) / h`.
#[inline]
pub fn scaled(v: f64, h: f64) -> f64 {
    FourthOrderKernel::value(v / h) / h
}

/// One evaluation of the conditional density estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityEstimate {
    pub value: f64,
    /// Mass-weighted index kernel sum `Σ δ_j W_j 𝟙{Z_j ∈ A_τ} K_h(u - θ'X_j)`.
    pub denominator: f64,
    pub trimmed: bool,
}

impl DensityEstimate {
    fn trimmed(denominator: f64) -> Self {
        Self {
            value: 0.0,
            denominator,
            trimmed: true,
        }
    }
}

/// Kaplan-Meier weighted kernel estimator of `f_θ^τ(z, u)`.
///
/// Only uncensored observations with `Z_j ∈ A_τ` carry mass.
#[derive(Debug, Clone)]
pub struct KernelEstimator<'a> {
    sample: &'a CensoredSample,
    theta: Vec<f64>,
    h: f64,
    window: TauWindow,
    index: Vec<f64>,
    mass: Vec<f64>,
}

impl<'a> KernelEstimator<'a> {
    pub fn new(
        sample: &'a CensoredSample,
        weights: &KmWeights,
        theta: &[f64],
        h: f64,
        window: TauWindow,
    ) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "bandwidth must be positive, got {h}"
            )));
        }
        validate_theta(theta, sample.d())?;
        if weights.len() != sample.n() {
            return Err(Error::InvalidInput(
                "weights do not match the sample".into(),
            ));
        }
        let index = sample.index(theta);
        let mass = (0..sample.n())
            .map(|i| {
                if sample.delta()[i] && window.contains(sample.z()[i]) {
                    weights.get(i)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            sample,
            theta: theta.to_vec(),
            h,
            window,
            index,
            mass,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn window(&self) -> TauWindow {
        self.window
    }

    /// `θ'X_i` for every observation.
    pub fn index(&self) -> &[f64] {
        &self.index
    }

    /// `δ_i W_in 𝟙{Z_i ∈ A_τ}`.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// `f̂(z, u)` using every observation.
    pub fn conditional_density(&self, z: f64, u: f64) -> DensityEstimate {
        self.conditional_density_excluding(z, u, None)
    }

    /// `f̂(z, u)` with observation `exclude` removed from both sums.
    pub fn conditional_density_excluding(
        &self,
        z: f64,
        u: f64,
        exclude: Option<usize>,
    ) -> DensityEstimate {
        let h = self.h;
        let reach = FourthOrderKernel::SUPPORT * h;
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..self.mass.len() {
            let m = self.mass[j];
            if m == 0.0 || Some(j) == exclude {
                continue;
            }
            let du = u - self.index[j];
            if du.abs() >= reach {
                continue;
            }
            let a = m * scaled(du, h);
            den += a;
            let dz = z - self.sample.z()[j];
            if dz.abs() < reach {
                num += a * scaled(dz, h);
            }
        }
        if den <= DENOMINATOR_FLOOR {
            return DensityEstimate::trimmed(den);
        }
        DensityEstimate {
            value: num / den,
            denominator: den,
            trimmed: false,
        }
    }

    /// Gradient in `θ` of `θ ↦ f̂_θ(z, θ'x_row)`, all `d` coordinates.
    ///
    /// Differentiates through both `θ'x_row` and every `θ'X_j`. Returns zeros
    /// when the estimate is trimmed.
    pub fn gradient(&self, z: f64, x_row: &[f64], exclude: Option<usize>) -> Vec<f64> {
        let d = self.theta.len();
        let h = self.h;
        let reach = FourthOrderKernel::SUPPORT * h;
        let u: f64 = x_row.iter().zip(&self.theta).map(|(a, b)| a * b).sum();
        let mut num = 0.0;
        let mut den = 0.0;
        let mut dnum = vec![0.0; d];
        let mut dden = vec![0.0; d];
        let h2 = h * h;
        for j in 0..self.mass.len() {
            let m = self.mass[j];
            if m == 0.0 || Some(j) == exclude {
                continue;
            }
            let du = u - self.index[j];
            if du.abs() >= reach {
                continue;
            }
            let a = m * scaled(du, h);
            let da = m * FourthOrderKernel::d1(du / h) / h2;
            let dz = z - self.sample.z()[j];
            let b = if dz.abs() < reach { scaled(dz, h) } else { 0.0 };
            den += a;
            num += a * b;
            let xj = self.sample.x_row(j);
            for c in 0..d {
                let g = da * (x_row[c] - xj[c]);
                dden[c] += g;
                dnum[c] += g * b;
            }
        }
        if den <= DENOMINATOR_FLOOR {
            return vec![0.0; d];
        }
        let f = num / den;
        (0..d).map(|c| (dnum[c] - f * dden[c]) / den).collect()
    }

    /// Kernel estimate of the density of `θ'X` given `Y ∈ A_τ`, at `u`.
    pub fn index_density(&self, u: f64) -> Result<f64> {
        let total: f64 = self.mass.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateWindow(format!(
                "no uncensored observation in [{}, {}]",
                self.window.lower, self.window.upper
            )));
        }
        let h = self.h;
        let reach = FourthOrderKernel::SUPPORT * h;
        let mut acc = 0.0;
        for j in 0..self.mass.len() {
            let m = self.mass[j];
            if m == 0.0 {
                continue;
            }
            let du = u - self.index[j];
            if du.abs() < reach {
                acc += m * scaled(du, h);
            }
        }
        Ok(acc / total)
    }
}

pub(crate) fn validate_theta(theta: &[f64], d: usize) -> Result<()> {
    if theta.len() != d {
        return Err(Error::InvalidInput(format!(
            "theta has {} components, expected {d}",
            theta.len()
        )));
    }
    if theta[0] != 1.0 {
        return Err(Error::InvalidInput(format!(
            "first index coefficient must be 1, got {}",
            theta[0]
        )));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("theta has non-finite entries".into()));
    }
    Ok(())
}
