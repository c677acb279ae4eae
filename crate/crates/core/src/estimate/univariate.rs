use serde::{Deserialize, Serialize};

use super::{logistic, logit, sandwich, FitOptions};
use crate::error::{Error, Result};
use crate::optim::bfgs;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// First-stage estimates for one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateFit {
    pub alpha: f64,
    pub beta: f64,
    /// Loading on `ξ*`; `None` when no common regressor was supplied.
    pub theta: Option<f64>,
    /// Concentrated innovation variance of `ln ε`.
    pub v: f64,
    pub loglik: f64,
    /// Standard errors of `(α, β[, ϑ])`.
    pub std_errors: Option<Vec<f64>>,
    /// Sandwich covariance of `(α, β[, ϑ])`, row by row.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub converged: bool,
}

struct Profile<'a> {
    x: &'a [f64],
    xi: Option<&'a [f64]>,
    x_bar: f64,
    sum_x: f64,
}

impl Profile<'_> {
    /// Residuals `x_t − ς̃_t − ϑξ*_t` where `ς̃` is the recursion without the
    /// variance offset; they do not depend on `v`.
    fn residuals(&self, th: &[f64]) -> Option<Vec<f64>> {
        let (a, b) = (th[0], th[1]);
        if !(a + b < 1.0 && b.abs() < 1.0) {
            return None;
        }
        let theta = th.get(2).copied().unwrap_or(0.0);
        let w = (1.0 - a - b) * self.x_bar;
        let mut s = self.x_bar;
        let mut nu = self.x_bar;
        let mut out = Vec::with_capacity(self.x.len());
        for (t, &x) in self.x.iter().enumerate() {
            let common = self.xi.map_or(0.0, |xi| theta * xi[t]);
            s = w + a * nu + b * s;
            out.push(x - s - common);
            nu = x - common;
        }
        Some(out)
    }

    fn per_obs(&self, th: &[f64]) -> Option<Vec<f64>> {
        let r = self.residuals(th)?;
        let v = r.iter().map(|e| e * e).sum::<f64>() / r.len() as f64;
        if !(v > 0.0) {
            return None;
        }
        let c = -0.5 * (LN_2PI + v.ln());
        Some(
            r.iter()
                .zip(self.x)
                .map(|(e, x)| c - x - e * e / (2.0 * v))
                .collect(),
        )
    }

    fn loglik(&self, th: &[f64]) -> f64 {
        let Some(r) = self.residuals(th) else {
            return f64::NEG_INFINITY;
        };
        let t = r.len() as f64;
        let v = r.iter().map(|e| e * e).sum::<f64>() / t;
        if !(v > 0.0) {
            return f64::NEG_INFINITY;
        }
        -0.5 * t * (LN_2PI + v.ln() + 1.0) - self.sum_x
    }

    fn v_hat(&self, th: &[f64]) -> f64 {
        let r = self.residuals(th).expect("admissible estimate");
        r.iter().map(|e| e * e).sum::<f64>() / r.len() as f64
    }
}

fn natural(u: &[f64]) -> Vec<f64> {
    let b = u[1].tanh();
    let mut th = vec![logistic(u[0]) * (1.0 - b), b];
    th.extend_from_slice(&u[2..]);
    th
}

/// Log-normal MEM for one log-series with an optional known common
/// regressor:
///
/// `x_t = ς_t + ϑξ*_t + ln ε_t`, `ς_t = (1 − α − β)x̄ + (1 − β)v/2
///   + α(x_{t−1} − ϑξ*_{t−1}) + βς_{t−1}`, `ln ε_t ~ N(−v/2, v)`.
///
/// `v` is concentrated out. `ϑ` is unrestricted; with `xi_star = None` the
/// model is the plain log-MEM. `x` should hold training rows only.
pub fn fit_univariate_mem_sec(x: &[f64], xi_star: Option<&[f64]>, options: &FitOptions) -> Result<UnivariateFit> {
    options.validate()?;
    let t_len = x.len();
    let k = if xi_star.is_some() { 3 } else { 2 };
    if t_len <= 10 * k {
        return Err(Error::InsufficientData(format!(
            "{t_len} observations for a univariate fit"
        )));
    }
    if let Some(xi) = xi_star {
        if xi.len() != t_len {
            return Err(Error::Dimension(format!(
                "series has {t_len} rows, common regressor {}",
                xi.len()
            )));
        }
    }
    let x_bar = x.iter().sum::<f64>() / t_len as f64;
    let var = x.iter().map(|v| (v - x_bar).powi(2)).sum::<f64>() / t_len as f64;
    if !(var > 1e-12 * x_bar.abs().max(1.0).powi(2)) {
        return Err(Error::DegenerateSeries(
            "series has zero variance over the estimation window".into(),
        ));
    }
    let prof = Profile {
        x,
        xi: xi_star,
        x_bar,
        sum_x: x.iter().sum(),
    };

    let mut u0 = vec![logit(0.05 / 0.1), 0.9f64.atanh()];
    if k == 3 {
        u0.push(1.0);
    }
    let mut starts = vec![u0.clone()];
    {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(options.seed);
        let noise = Normal::new(0.0, 0.5).expect("valid sd");
        for _ in 0..options.multistart {
            starts.push(u0.iter().map(|v| v + noise.sample(&mut rng)).collect());
        }
    }
    let scale = t_len as f64;
    let best = starts
        .iter()
        .map(|u| bfgs(|u| -prof.loglik(&natural(u)) / scale, u, &options.inner))
        .filter(|m| m.f.is_finite())
        .fold(None, |best: Option<crate::optim::Minimum>, m| match best {
            Some(b) if b.f <= m.f => Some(b),
            _ => Some(m),
        })
        .ok_or_else(|| Error::Estimation("univariate optimizer failed from every start".into()))?;

    let th = natural(&best.x);
    let robust = if options.std_errors {
        sandwich(|p| prof.per_obs(p), &th).ok()
    } else {
        None
    };
    let covariance = robust.as_ref().map(|s| {
        (0..th.len())
            .map(|i| s.covariance.row(i).iter().copied().collect())
            .collect()
    });
    Ok(UnivariateFit {
        alpha: th[0],
        beta: th[1],
        theta: th.get(2).copied(),
        v: prof.v_hat(&th),
        loglik: prof.loglik(&th),
        std_errors: robust.map(|s| s.std_errors),
        covariance,
        converged: best.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::simulate_univariate;

    #[test]
    fn degenerate_series() {
        let x = vec![0.3; 200];
        assert!(matches!(
            fit_univariate_mem_sec(&x, None, &FitOptions::default()),
            Err(Error::DegenerateSeries(_))
        ));
    }

    #[test]
    fn recovers_loading() {
        // AR(1) common regressor
        let mut xi = vec![0.0; 3000];
        let mut state = 0.0;
        for (t, v) in xi.iter_mut().enumerate() {
            state = 0.9 * state + 0.3 * ((t as f64 * 0.7).sin());
            *v = state;
        }
        let x = simulate_univariate(0.1, 0.8, 1.2, 0.2, 0.5, &xi, 17).unwrap();
        let fit = fit_univariate_mem_sec(&x, Some(&xi), &FitOptions::default()).unwrap();
        let se = fit.std_errors.clone().unwrap();
        assert!((fit.theta.unwrap() - 1.2).abs() < 3.0 * se[2], "{fit:?}");
        assert!((fit.alpha - 0.1).abs() < 3.0 * se[0]);
        assert!((fit.beta - 0.8).abs() < 3.0 * se[1]);
    }
}
