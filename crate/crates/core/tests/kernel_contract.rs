use censidx::kernel::{epanechnikov, kernel_eval, FourthOrderKernel, KernelEstimator};
use censidx::sim::{calibrate_censoring_rate, generate_dataset, SimDesign};
use censidx::survival::{km_jump_weights, TauWindow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GAUSS5: [(f64, f64); 5] = [
    (0.0, 128.0 / 225.0),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_08),
    (0.906_179_845_938_664, 0.236_926_885_056_189_08),
];

fn gauss(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    GAUSS5
        .iter()
        .map(|&(x, w)| w * half * f(mid + half * x))
        .sum()
}

/// Five-point Gauss-Legendre on each half-unit cell of `[-2, 2]`; exact for
/// the piecewise polynomials involved.
fn integrate(f: impl Fn(f64) -> f64) -> f64 {
    (-4..4)
        .map(|c| gauss(&f, c as f64 * 0.5, (c + 1) as f64 * 0.5))
        .sum()
}

/// `(k * k)(u)` evaluated as an integral of the Epanechnikov kernel.
fn self_convolution_by_quadrature(u: f64) -> f64 {
    let lo = (u - 1.0).max(-1.0);
    let hi = (u + 1.0).min(1.0);
    if lo >= hi {
        return 0.0;
    }
    gauss(&|s: f64| epanechnikov(s) * epanechnikov(u - s), lo, hi)
}

#[test]
pub fn fourth_order_moments() {
    let mass = integrate(FourthOrderKernel::value);
    assert!((mass - 1.0).abs() <= 1e-8, "mass {mass}");
    for p in 1..=3 {
        let m = integrate(|u| u.powi(p) * FourthOrderKernel::value(u));
        assert!(m.abs() <= 1e-8, "moment {p} = {m:e}");
    }
    let fourth = integrate(|u| u.powi(4) * FourthOrderKernel::value(u));
    assert!(fourth.abs() > 1e-3);
}

#[test]
pub fn value_at_origin_matches_convolution() {
    let want = 2.0 * epanechnikov(0.0) - self_convolution_by_quadrature(0.0);
    assert!((FourthOrderKernel::value(0.0) - want).abs() <= 1e-10);
    assert!((FourthOrderKernel::value(0.0) - 0.9).abs() <= 1e-10);
    for &u in &[0.3, -0.7, 1.2, -1.9] {
        let want = 2.0 * epanechnikov(u) - self_convolution_by_quadrature(u);
        assert!(
            (FourthOrderKernel::value(u) - want).abs() <= 1e-10,
            "u = {u}"
        );
    }
}

#[test]
pub fn support_and_symmetry() {
    for &u in &[2.0, 2.5, -2.0, -7.0] {
        assert_eq!(FourthOrderKernel::value(u), 0.0);
    }
    for k in 0..200 {
        let u = -2.0 + k as f64 * 0.02;
        assert!((FourthOrderKernel::value(u) - FourthOrderKernel::value(-u)).abs() < 1e-15);
        assert!((FourthOrderKernel::d1(u) + FourthOrderKernel::d1(-u)).abs() < 1e-13);
    }
}

#[test]
pub fn derivatives_match_finite_differences() {
    let eps = 1e-5;
    for k in 0..400 {
        let u = -2.1 + k as f64 * 0.0105;
        if u.abs() < 1e-3 {
            continue;
        }
        let d1 =
            (FourthOrderKernel::value(u + eps) - FourthOrderKernel::value(u - eps)) / (2.0 * eps);
        assert!((FourthOrderKernel::d1(u) - d1).abs() < 1e-7, "d1 at {u}");
        let d2 = (FourthOrderKernel::d1(u + eps) - FourthOrderKernel::d1(u - eps)) / (2.0 * eps);
        assert!((FourthOrderKernel::d2(u) - d2).abs() < 1e-6, "d2 at {u}");
    }
    assert_eq!(kernel_eval(0.4, 1).unwrap(), FourthOrderKernel::d1(0.4));
    assert!(kernel_eval(0.4, 3).is_err());
}

#[test]
pub fn density_gradient_matches_central_differences() {
    let design = SimDesign {
        n: 200,
        ..Default::default()
    };
    let lambda = calibrate_censoring_rate(&design, 0.25).unwrap();
    let sample = generate_dataset(&design, lambda, 0).unwrap();
    let weights = km_jump_weights(&sample);
    let window = TauWindow::covering(&sample);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = 1e-6;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 100 {
        let theta: Vec<f64> = design
            .theta0
            .iter()
            .enumerate()
            .map(|(c, &t)| {
                if c == 0 {
                    1.0
                } else {
                    t + rng.random_range(-0.3..0.3)
                }
            })
            .collect();
        let h = rng.random_range(0.8..1.6);
        let i = rng.random_range(0..sample.n());
        let x = sample.x_row(i).to_vec();
        let z = sample.z()[i] + rng.random_range(-0.2..0.2);
        let exclude = rng.random_bool(0.5).then_some(i);
        let est = KernelEstimator::new(&sample, &weights, &theta, h, window).unwrap();
        let u: f64 = x.iter().zip(&theta).map(|(a, b)| a * b).sum();
        let base = est.conditional_density_excluding(z, u, exclude);
        if base.trimmed || base.value.abs() < 1e-3 {
            continue;
        }
        let analytic = &est.gradient(z, &x, exclude)[1..];
        let mut numeric = vec![0.0; theta.len() - 1];
        for c in 1..theta.len() {
            let eval = |s: f64| {
                let mut t = theta.clone();
                t[c] += s;
                let e = KernelEstimator::new(&sample, &weights, &t, h, window).unwrap();
                let u: f64 = x.iter().zip(&t).map(|(a, b)| a * b).sum();
                e.conditional_density_excluding(z, u, exclude).value
            };
            numeric[c - 1] = (eval(eps) - eval(-eps)) / (2.0 * eps);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        worst = worst.max(diff / scale);
        checked += 1;
    }
    assert!(worst <= 1e-4, "largest relative error {worst:e}");
}
