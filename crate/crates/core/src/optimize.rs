//! Derivative-free Nelder-Mead simplex minimization.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub max_iters: usize,
    /// Stop when every vertex is within this sup-norm distance of the best.
    pub x_tolerance: f64,
    /// ... and every vertex value is within this of the best value.
    pub f_tolerance: f64,
    /// Extra starts drawn around the centre of the search region.
    pub restarts: usize,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            x_tolerance: 1e-6,
            f_tolerance: 1e-10,
            restarts: 3,
            initial_step: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iters: usize,
    pub evals: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0`. Non-finite values are treated as `+∞`, so a
/// constraint can be imposed by returning `f64::INFINITY` outside it.
///
/// The returned value is never worse than `f(x0)`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], settings: &OptimizerSettings) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    if dim == 0 {
        let value = eval(x0, &mut evals);
        return SimplexResult {
            x: Vec::new(),
            value,
            iters: 0,
            evals,
            converged: true,
        };
    }

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(x0.to_vec());
    for k in 0..dim {
        let mut v = x0.to_vec();
        v[k] += settings.initial_step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iters = 0;
    let mut converged = false;
    while iters < settings.max_iters {
        // stable sort keeps ties in insertion order
        let mut idx: Vec<usize> = (0..=dim).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = idx.iter().map(|&k| simplex[k].clone()).collect();
        values = idx.iter().map(|&k| values[k]).collect();

        let best = values[0];
        let f_spread = values.iter().map(|v| (v - best).abs()).fold(0.0, f64::max);
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if best.is_finite() && f_spread <= settings.f_tolerance && x_spread <= settings.x_tolerance
        {
            converged = true;
            break;
        }
        iters += 1;

        let mut centroid = vec![0.0; dim];
        for v in &simplex[..dim] {
            for (c, a) in centroid.iter_mut().zip(v) {
                *c += a / dim as f64;
            }
        }
        let worst = simplex[dim].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let reflected = along(alpha);
        let fr = eval(&reflected, &mut evals);
        if fr < values[0] {
            let expanded = along(gamma);
            let fe = eval(&expanded, &mut evals);
            if fe < fr {
                simplex[dim] = expanded;
                values[dim] = fe;
            } else {
                simplex[dim] = reflected;
                values[dim] = fr;
            }
            continue;
        }
        if fr < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[dim] {
            let c = along(rho);
            let fc = eval(&c, &mut evals);
            (c, fc)
        } else {
            let c = along(-rho);
            let fc = eval(&c, &mut evals);
            (c, fc)
        };
        if fc < values[dim].min(fr) {
            simplex[dim] = contracted;
            values[dim] = fc;
            continue;
        }
        // shrink toward the best vertex
        let best_vertex = simplex[0].clone();
        for k in 1..=dim {
            let v: Vec<f64> = best_vertex
                .iter()
                .zip(&simplex[k])
                .map(|(b, x)| b + sigma * (x - b))
                .collect();
            values[k] = eval(&v, &mut evals);
            simplex[k] = v;
        }
    }

    let k = (0..=dim)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("non-empty simplex");
    SimplexResult {
        x: simplex[k].clone(),
        value: values[k],
        iters,
        evals,
        converged,
    }
}
