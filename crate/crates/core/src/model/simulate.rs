use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::filter::{Kernel, Recursion};
use super::params::{check_constraints, ParamSet};
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::panel::VolatilityPanel;

/// A simulated panel together with the latent paths that generated it.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub panel: VolatilityPanel,
    pub ln_mu: DMatrix<f64>,
    pub varsigma: DMatrix<f64>,
    pub xi: DVector<f64>,
    pub p: DVector<f64>,
}

/// Lower Cholesky factor used to draw correlated normals.
fn cholesky(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Kernel::new(v)?;
    Ok(v.clone().cholesky().expect("checked positive definite").l())
}

/// Synthetic calendar used for simulated panels.
pub fn synthetic_dates(len: usize) -> Vec<NaiveDate> {
    let start = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
    (0..len).map(|t| start + chrono::Days::new(t as u64)).collect()
}

/// Simulates `t_len` periods from the model, starting at the filter's
/// presample state, with `ln ε_t ~ N(m, V)`.
///
/// `p_t = c'(x_t − x̄)` is computed from the simulated `x_t` with `x̄` and `c`
/// from `params`, so re-filtering the returned panel with `params`
/// reproduces `xi` exactly. Tickers are `S1..Sn`.
pub fn simulate(spec: &ModelSpec, params: &ParamSet, t_len: usize, seed: u64) -> Result<Simulation> {
    spec.validate()?;
    params.check_dims()?;
    if spec.n_series() != params.n_series() {
        return Err(Error::Dimension("spec and parameters disagree on n".into()));
    }
    let violations = check_constraints(params, spec);
    if !violations.is_empty() {
        return Err(Error::Constraints(violations));
    }
    if t_len < 2 {
        return Err(Error::InsufficientData("simulation needs at least 2 periods".into()));
    }
    let n = params.n_series();
    let l = cholesky(&params.v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut x = DMatrix::zeros(t_len, n);
    let mut ln_mu = DMatrix::zeros(t_len, n);
    let mut varsigma = DMatrix::zeros(t_len, n);
    let mut xi = DVector::zeros(t_len);
    let mut p = DVector::zeros(t_len);

    let mut rec = Recursion::new(params);
    let mut s = vec![0.0; n];
    let mut lm = vec![0.0; n];
    let mut z = DVector::zeros(n);
    for t in 0..t_len {
        xi[t] = rec.predict(&mut s, &mut lm);
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        let e = &l * &z;
        for i in 0..n {
            x[(t, i)] = lm[i] + params.m[i] + e[i];
            ln_mu[(t, i)] = lm[i];
            varsigma[(t, i)] = s[i];
        }
        p[t] = rec.observe(|i| x[(t, i)], &s);
    }

    let tickers = (1..=n).map(|i| format!("S{i}")).collect();
    let panel = VolatilityPanel::new(tickers, synthetic_dates(t_len), x.map(f64::exp), None)?;
    Ok(Simulation {
        panel,
        ln_mu,
        varsigma,
        xi,
        p,
    })
}

/// Univariate log-MEM with a known common regressor `ξ*`:
///
/// `x_t = ς_t + ϑ ξ*_t + ln ε_t`, `ln ε_t ~ N(−v/2, v)`,
/// `ς_t = (1 − α − β)x̄ + (1 − β)v/2 + α(x_{t−1} − ϑξ*_{t−1}) + βς_{t−1}`.
///
/// Returns the simulated log-series `x`.
pub fn simulate_univariate(
    alpha: f64,
    beta: f64,
    theta: f64,
    v: f64,
    x_bar: f64,
    xi: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    if !(alpha + beta < 1.0 && beta.abs() < 1.0 && v > 0.0) {
        return Err(Error::InvalidInput(
            "univariate parameters outside the stationary region".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = v.sqrt();
    let omega = (1.0 - alpha - beta) * x_bar + (1.0 - beta) * v / 2.0;
    let mut s_prev = x_bar + v / 2.0;
    let mut nu_prev = x_bar;
    let mut out = Vec::with_capacity(xi.len());
    for &xi_t in xi {
        let s = omega + alpha * nu_prev + beta * s_prev;
        let e: f64 = StandardNormal.sample(&mut rng);
        let x = s + theta * xi_t - v / 2.0 + sd * e;
        out.push(x);
        nu_prev = x - theta * xi_t;
        s_prev = s;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{filter, Variant};

    fn sec_params() -> ParamSet {
        let v = DMatrix::from_row_slice(2, 2, &[0.25, 0.1, 0.1, 0.2]);
        ParamSet::vmem_sec(
            vec![0.12, 0.15],
            vec![0.8, 0.75],
            vec![0.9, 1.1],
            0.08,
            0.4,
            v,
            vec![0.5, -0.2],
            vec![0.6, 0.8],
        )
    }

    #[test]
    fn refilter_reproduces_latent_paths() {
        let params = sec_params();
        let spec = ModelSpec::diagonal(Variant::VmemSec, 2);
        let sim = simulate(&spec, &params, 400, 7).unwrap();
        let out = filter(&sim.panel, &spec, &params).unwrap();
        for t in 0..400 {
            assert!((out.xi[t] - sim.xi[t]).abs() < 1e-12);
            for i in 0..2 {
                assert!((out.ln_mu[(t, i)] - sim.ln_mu[(t, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let params = sec_params();
        let spec = ModelSpec::diagonal(Variant::VmemSec, 2);
        let a = simulate(&spec, &params, 50, 3).unwrap();
        let b = simulate(&spec, &params, 50, 3).unwrap();
        let c = simulate(&spec, &params, 50, 4).unwrap();
        assert_eq!(a.panel.y(), b.panel.y());
        assert_ne!(a.panel.y(), c.panel.y());
    }

    #[test]
    fn static_model_is_iid_around_x_bar() {
        let mut params = sec_params();
        params.alpha = vec![0.0, 0.0];
        params.beta = vec![0.0, 0.0];
        params.delta = 0.0;
        params.phi = 0.0;
        let spec = ModelSpec::diagonal(Variant::VmemSec, 2);
        let t_len = 20_000;
        let sim = simulate(&spec, &params, t_len, 11).unwrap();
        for i in 0..2 {
            let mean = sim.panel.x().column(i).mean();
            let se = (params.v[(i, i)] / t_len as f64).sqrt();
            assert!((mean - params.x_bar[i]).abs() < 4.0 * se);
        }
    }

    #[test]
    fn innovations_have_unit_mean() {
        let params = sec_params();
        let spec = ModelSpec::diagonal(Variant::VmemSec, 2);
        let t_len = 100_000;
        let sim = simulate(&spec, &params, t_len, 5).unwrap();
        for i in 0..2 {
            let ratio: Vec<f64> = (0..t_len)
                .map(|t| sim.panel.y()[(t, i)] / sim.ln_mu[(t, i)].exp())
                .collect();
            let mean = ratio.iter().sum::<f64>() / t_len as f64;
            let var = ratio.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (t_len as f64 - 1.0);
            assert!((mean - 1.0).abs() < 3.0 * (var / t_len as f64).sqrt(), "{mean}");
        }
    }

    #[test]
    fn rejects_explosive() {
        let mut params = sec_params();
        params.alpha[0] = 0.3;
        assert!(matches!(
            simulate(&ModelSpec::diagonal(Variant::VmemSec, 2), &params, 10, 1),
            Err(Error::Constraints(_))
        ));
    }
}
