use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::params::{check_constraints, ParamSet};
use super::spec::{ModelSpec, Variant};
use crate::error::{Error, Result};
use crate::panel::VolatilityPanel;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Time paths produced by [`filter`].
///
/// `ln_mu = varsigma + xi ⊗ ϑ'` row by row for vMEM-SeC; for vMEM the common
/// component is identically zero and `ln_mu = varsigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub ln_mu: DMatrix<f64>,
    pub varsigma: DMatrix<f64>,
    pub xi: DVector<f64>,
    pub nu: DMatrix<f64>,
    pub p: DVector<f64>,
    /// Training-window log-likelihood contributions, filled by
    /// [`log_likelihood`].
    pub per_obs_loglik: Vec<f64>,
}

/// Presample state and per-step quantities of the recursion.
///
/// Shared by the filter, the likelihood kernel and the simulator so all three
/// run the same arithmetic.
pub(crate) struct Recursion<'a> {
    params: &'a ParamSet,
    omega: Vec<f64>,
    theta: Vec<f64>,
    sec: bool,
    xi: f64,
    p: f64,
    varsigma: Vec<f64>,
    nu: Vec<f64>,
}

impl<'a> Recursion<'a> {
    pub(crate) fn new(params: &'a ParamSet) -> Self {
        let n = params.n_series();
        let sec = params.theta.is_some();
        let half_v: Vec<f64> = (0..n).map(|i| params.v[(i, i)] / 2.0).collect();
        Self {
            params,
            omega: params.intercept(),
            theta: params.theta.clone().unwrap_or_else(|| vec![0.0; n]),
            sec,
            xi: 0.0,
            p: 0.0,
            varsigma: (0..n).map(|i| params.x_bar[i] + half_v[i]).collect(),
            nu: params.x_bar.clone(),
        }
    }

    /// Advances to period `t`, writing `ς_t` and `ln μ_t`; returns `ξ_t`.
    /// Only information up to `t − 1` is used.
    #[inline]
    pub(crate) fn predict(&mut self, varsigma: &mut [f64], ln_mu: &mut [f64]) -> f64 {
        let prm = self.params;
        let xi = if self.sec {
            prm.delta * self.p + prm.phi * self.xi
        } else {
            0.0
        };
        for i in 0..varsigma.len() {
            let s = self.omega[i] + prm.alpha[i] * self.nu[i] + prm.beta[i] * self.varsigma[i];
            varsigma[i] = s;
            ln_mu[i] = s + self.theta[i] * xi;
        }
        self.xi = xi;
        xi
    }

    /// Feeds the realized `x_t`, updating `ν_t`, `p_t` and the lagged state.
    /// Returns `p_t`.
    #[inline]
    pub(crate) fn observe(&mut self, x_t: impl Fn(usize) -> f64, varsigma: &[f64]) -> f64 {
        let prm = self.params;
        let mut p = 0.0;
        for i in 0..varsigma.len() {
            let x = x_t(i);
            self.nu[i] = x - self.theta[i] * self.xi;
            self.varsigma[i] = varsigma[i];
            if let Some(c) = &prm.c {
                p += c[i] * (x - prm.x_bar[i]);
            }
        }
        self.p = p;
        p
    }
}

fn check_inputs(panel: &VolatilityPanel, spec: &ModelSpec, params: &ParamSet) -> Result<()> {
    spec.validate()?;
    params.check_dims()?;
    if params.n_series() != panel.n_series() || spec.n_series() != panel.n_series() {
        return Err(Error::Dimension(format!(
            "panel has {} series, spec {}, parameters {}",
            panel.n_series(),
            spec.n_series(),
            params.n_series()
        )));
    }
    if params.variant() != spec.variant {
        return Err(Error::InvalidInput(format!(
            "parameters are for {}, spec is {}",
            params.variant(),
            spec.variant
        )));
    }
    let violations = check_constraints(params, spec);
    if !violations.is_empty() {
        return Err(Error::Constraints(violations));
    }
    Ok(())
}

/// Runs the conditional-mean recursion over every row of the panel.
///
/// Presample values: `ξ₀ = 0`, `p₀ = 0`, `ς₀ = x̄ + diag(V)/2`, `ν₀ = x̄`,
/// with `x̄` and the PC loadings `c` taken from `params`. The parameters must
/// satisfy [`check_constraints`].
pub fn filter(panel: &VolatilityPanel, spec: &ModelSpec, params: &ParamSet) -> Result<FilterOutput> {
    check_inputs(panel, spec, params)?;
    Ok(filter_unchecked(panel.x(), params))
}

pub(crate) fn filter_unchecked(x: &DMatrix<f64>, params: &ParamSet) -> FilterOutput {
    let (t_len, n) = x.shape();
    let mut out = FilterOutput {
        ln_mu: DMatrix::zeros(t_len, n),
        varsigma: DMatrix::zeros(t_len, n),
        xi: DVector::zeros(t_len),
        nu: DMatrix::zeros(t_len, n),
        p: DVector::zeros(t_len),
        per_obs_loglik: Vec::new(),
    };
    let mut rec = Recursion::new(params);
    let mut s = vec![0.0; n];
    let mut lm = vec![0.0; n];
    for t in 0..t_len {
        let xi = rec.predict(&mut s, &mut lm);
        let p = rec.observe(|i| x[(t, i)], &s);
        out.xi[t] = xi;
        out.p[t] = p;
        for i in 0..n {
            out.varsigma[(t, i)] = s[i];
            out.ln_mu[(t, i)] = lm[i];
            out.nu[(t, i)] = rec.nu[i];
        }
    }
    out
}

/// Lower Cholesky factor of `V` with the pieces of the log-normal density
/// that do not depend on the dynamics.
#[derive(Debug, Clone)]
pub(crate) struct Kernel {
    l: DMatrix<f64>,
    pub(crate) log_det: f64,
}

impl Kernel {
    pub(crate) fn new(v: &DMatrix<f64>) -> Result<Self> {
        let n = v.nrows();
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = v[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 1e-12) {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = v[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { l, log_det })
    }

    /// `r'V⁻¹r`, overwriting `r` with `L⁻¹r`.
    #[inline]
    pub(crate) fn quad(&self, r: &mut [f64]) -> f64 {
        let n = r.len();
        let mut q = 0.0;
        for i in 0..n {
            let mut s = r[i];
            for k in 0..i {
                s -= self.l[(i, k)] * r[k];
            }
            let z = s / self.l[(i, i)];
            r[i] = z;
            q += z * z;
        }
        q
    }
}

/// Log-likelihood of the first `rows` rows, optionally recording each
/// period's contribution. Constraints are not checked.
pub(crate) fn loglik_rows(
    x: &DMatrix<f64>,
    rows: usize,
    params: &ParamSet,
    kernel: &Kernel,
    mut per_obs: Option<&mut Vec<f64>>,
) -> f64 {
    let n = x.ncols();
    let constant = -0.5 * n as f64 * LN_2PI - 0.5 * kernel.log_det;
    let mut rec = Recursion::new(params);
    let mut s = vec![0.0; n];
    let mut lm = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut total = 0.0;
    if let Some(buf) = per_obs.as_deref_mut() {
        buf.clear();
        buf.reserve(rows);
    }
    for t in 0..rows {
        rec.predict(&mut s, &mut lm);
        let mut sum_x = 0.0;
        for i in 0..n {
            let xt = x[(t, i)];
            sum_x += xt;
            r[i] = xt - lm[i] - params.m[i];
        }
        let lt = constant - sum_x - 0.5 * kernel.quad(&mut r);
        total += lt;
        if let Some(buf) = per_obs.as_deref_mut() {
            buf.push(lt);
        }
        rec.observe(|i| x[(t, i)], &s);
    }
    total
}

/// Gaussian log-likelihood of `x_t` given `ln μ_t` over the training window:
///
/// `−(Tn/2) ln 2π − (T/2) ln|V| − Σ_t [Σᵢ x_{i,t} + ½ r_t'V⁻¹r_t]`,
/// `r_t = x_t − ln μ_t − m`.
///
/// Also stores the per-period contributions in `out.per_obs_loglik`.
pub fn log_likelihood(panel: &VolatilityPanel, out: &mut FilterOutput, params: &ParamSet) -> Result<f64> {
    params.check_dims()?;
    let (t_len, n) = panel.x().shape();
    if out.ln_mu.shape() != (t_len, n) {
        return Err(Error::Dimension("filter output does not match panel".into()));
    }
    let kernel = Kernel::new(&params.v)?;
    let constant = -0.5 * n as f64 * LN_2PI - 0.5 * kernel.log_det;
    let mut r = vec![0.0; n];
    let mut per_obs = Vec::with_capacity(panel.n_train());
    for t in 0..panel.n_train() {
        let mut sum_x = 0.0;
        for i in 0..n {
            let xt = panel.x()[(t, i)];
            sum_x += xt;
            r[i] = xt - out.ln_mu[(t, i)] - params.m[i];
        }
        per_obs.push(constant - sum_x - 0.5 * kernel.quad(&mut r));
    }
    let total = per_obs.iter().sum();
    out.per_obs_loglik = per_obs;
    Ok(total)
}

/// Filters and evaluates the likelihood in one call.
pub fn filter_log_likelihood(
    panel: &VolatilityPanel,
    spec: &ModelSpec,
    params: &ParamSet,
) -> Result<(FilterOutput, f64)> {
    let mut out = filter(panel, spec, params)?;
    let ll = log_likelihood(panel, &mut out, params)?;
    Ok((out, ll))
}

/// Coefficients of one conditional-mean equation written in terms of lagged
/// observables:
///
/// `ln μ_{i,t} = x̄ᵢ + intercept + own_lag·(x_{i,t−1} − x̄ᵢ)
///   + inertia·(ln μ_{i,t−1} − x̄ᵢ) + Σ_{j≠i} spillover_j·(x_{j,t−1} − x̄_j)
///   + common·ξ_{t−1}`.
///
/// `intercept = (1 − βᵢ)vᵢᵢ/2` is the targeting offset from the unit-mean
/// innovation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationCoefficients {
    pub series: usize,
    pub intercept: f64,
    pub own_lag: f64,
    pub inertia: f64,
    /// `ϑᵢδc_j` for `j ≠ i`; `None` at `j = i`.
    pub spillover: Vec<Option<f64>>,
    pub common: f64,
}

impl EquationCoefficients {
    /// Evaluates the equation from lagged quantities.
    pub fn evaluate(&self, x_bar: &[f64], x_prev: &[f64], ln_mu_prev: f64, xi_prev: f64) -> f64 {
        let i = self.series;
        let spill: f64 = self
            .spillover
            .iter()
            .enumerate()
            .filter_map(|(j, s)| s.map(|s| s * (x_prev[j] - x_bar[j])))
            .sum();
        x_bar[i]
            + self.intercept
            + self.own_lag * (x_prev[i] - x_bar[i])
            + self.inertia * (ln_mu_prev - x_bar[i])
            + spill
            + self.common * xi_prev
    }
}

/// Per-equation own-lag, inertia, spillover and common-factor coefficients
/// of a vMEM-SeC.
pub fn per_equation_coefficients(spec: &ModelSpec, params: &ParamSet) -> Result<Vec<EquationCoefficients>> {
    if spec.variant != Variant::VmemSec {
        return Err(Error::Unsupported(
            "per-equation spillover coefficients exist only for vMEM-SeC".into(),
        ));
    }
    params.check_dims()?;
    let (theta, c) = match (&params.theta, &params.c) {
        (Some(t), Some(c)) => (t, c),
        _ => {
            return Err(Error::InvalidInput(
                "vMEM-SeC parameters need loadings and PC weights".into(),
            ))
        }
    };
    let n = params.n_series();
    Ok((0..n)
        .map(|i| EquationCoefficients {
            series: i,
            intercept: (1.0 - params.beta[i]) * params.v[(i, i)] / 2.0,
            own_lag: params.alpha[i] + theta[i] * params.delta * c[i],
            inertia: params.beta[i],
            spillover: (0..n)
                .map(|j| (j != i).then(|| theta[i] * params.delta * c[j]))
                .collect(),
            common: (params.phi - params.alpha[i] - params.beta[i]) * theta[i],
        })
        .collect())
}
