use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Robust covariance `H⁻¹SH⁻¹` and its ingredients.
#[derive(Debug, Clone)]
pub struct Sandwich {
    pub std_errors: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// Standard errors from `H⁻¹` alone.
    pub hessian_std_errors: Vec<f64>,
    /// Negative Hessian of the total log-likelihood.
    pub hessian: DMatrix<f64>,
    /// `Σ_t s_t s_t'`.
    pub outer_product: DMatrix<f64>,
    pub condition_number: f64,
}

const MAX_CONDITION: f64 = 1e12;

/// Finite-difference step for parameter value `v`.
pub fn fd_step(v: f64) -> f64 {
    1e-4 * v.abs().max(1.0)
}

/// Sandwich standard errors for any objective that reports per-observation
/// log-likelihood contributions.
///
/// `per_obs` returns `None` for inadmissible parameters. The Hessian uses
/// central second differences of the total and the scores central first
/// differences of each contribution, with step [`fd_step`].
///
/// ```
/// // l_t(θ) = −(θ − y_t)²/2 has H = T and S = Σ(θ − y_t)².
/// let y = [0.5, -0.25, 1.0, 0.75];
/// let f = |th: &[f64]| Some(y.iter().map(|v| -(th[0] - v).powi(2) / 2.0).collect());
/// let s = vmemsec::estimate::sandwich(f, &[0.5]).unwrap();
/// let expected = (y.iter().map(|v| (0.5f64 - v).powi(2)).sum::<f64>()).sqrt() / 4.0;
/// assert!((s.std_errors[0] - expected).abs() < 1e-6);
/// ```
pub fn sandwich<F>(per_obs: F, theta: &[f64]) -> Result<Sandwich>
where
    F: Fn(&[f64]) -> Option<Vec<f64>> + Sync,
{
    let k = theta.len();
    if k == 0 {
        return Err(Error::InvalidInput("no free parameters".into()));
    }
    let h: Vec<f64> = theta.iter().map(|&v| fd_step(v)).collect();

    // Every displaced point needed, evaluated in parallel.
    let mut points: Vec<Vec<(usize, f64)>> = vec![vec![]];
    for i in 0..k {
        points.push(vec![(i, h[i])]);
        points.push(vec![(i, -h[i])]);
    }
    for i in 0..k {
        for j in i + 1..k {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                points.push(vec![(i, si * h[i]), (j, sj * h[j])]);
            }
        }
    }
    let values: Vec<Vec<f64>> = points
        .par_iter()
        .map(|shift| {
            let mut th = theta.to_vec();
            for &(i, d) in shift {
                th[i] += d;
            }
            per_obs(&th).ok_or_else(|| {
                Error::Estimation(
                    "finite-difference step leaves the admissible parameter region".into(),
                )
            })
        })
        .collect::<Result<_>>()?;

    let total = |v: &Vec<f64>| v.iter().sum::<f64>();
    let t_len = values[0].len();
    let f0 = total(&values[0]);
    let plus = |i: usize| &values[1 + 2 * i];
    let minus = |i: usize| &values[2 + 2 * i];

    let mut hess = DMatrix::zeros(k, k);
    for i in 0..k {
        hess[(i, i)] = -(total(plus(i)) - 2.0 * f0 + total(minus(i))) / (h[i] * h[i]);
    }
    let mut idx = 1 + 2 * k;
    for i in 0..k {
        for j in i + 1..k {
            let [pp, pm, mp, mm] = [0, 1, 2, 3].map(|o| total(&values[idx + o]));
            let v = -(pp - pm - mp + mm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
            idx += 4;
        }
    }

    let mut outer = DMatrix::zeros(k, k);
    let mut s = vec![0.0; k];
    for t in 0..t_len {
        for i in 0..k {
            s[i] = (plus(i)[t] - minus(i)[t]) / (2.0 * h[i]);
        }
        for i in 0..k {
            for j in 0..k {
                outer[(i, j)] += s[i] * s[j];
            }
        }
    }

    let eig = SymmetricEigen::new(hess.clone());
    let largest = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let smallest = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let condition = largest / smallest;
    if !(condition < MAX_CONDITION) {
        return Err(Error::SingularHessian { condition });
    }
    let inv = hess
        .clone()
        .try_inverse()
        .ok_or(Error::SingularHessian { condition })?;
    let inv = (&inv + inv.transpose()) * 0.5;
    let cov = &inv * &outer * &inv;
    let sqrt_diag = |m: &DMatrix<f64>| (0..k).map(|i| m[(i, i)].max(0.0).sqrt()).collect::<Vec<_>>();
    Ok(Sandwich {
        std_errors: sqrt_diag(&cov),
        hessian_std_errors: sqrt_diag(&inv),
        covariance: cov,
        hessian: hess,
        outer_product: outer,
        condition_number: condition,
    })
}
