//! Maximum likelihood with covariance concentration, first-stage univariate
//! fits and sandwich standard errors.

mod sandwich;
mod univariate;

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::information_criteria;
use crate::factor::PcFactor;
use crate::model::{check_constraints, loglik_rows, Kernel, ModelSpec, ParamSet, Variant};
use crate::optim::{bfgs, BfgsOptions, Minimum};
use crate::panel::VolatilityPanel;

pub use sandwich::{fd_step, sandwich, Sandwich};
pub use univariate::{fit_univariate_mem_sec, UnivariateFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Outer loop stops once the maximized log-likelihood changes by less.
    pub outer_tolerance: f64,
    pub max_outer_iterations: usize,
    pub inner: BfgsOptions,
    /// Jittered starts added to the default one on the first outer pass.
    pub multistart: usize,
    pub seed: u64,
    pub std_errors: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            outer_tolerance: 1e-4,
            max_outer_iterations: 50,
            inner: BfgsOptions::default(),
            multistart: 2,
            seed: 0,
            std_errors: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_tolerance > 0.0) {
            return Err(Error::InvalidInput("outer tolerance must be positive".into()));
        }
        if self.max_outer_iterations == 0 || self.inner.max_iterations == 0 {
            return Err(Error::InvalidInput("iteration limits must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub params: ParamSet,
    /// Training-window log-likelihood at `params`.
    pub loglik: f64,
    /// Maximized log-likelihood after each outer iteration.
    pub loglik_trace: Vec<f64>,
    pub parameter_names: Vec<String>,
    /// Free coefficients in the order of `parameter_names`.
    pub estimates: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub n_free: usize,
    pub n_obs: usize,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub wall_time_secs: f64,
}

impl FitResult {
    pub fn label(&self) -> String {
        self.spec.label()
    }
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Smooth map from unconstrained coordinates to the free coefficients:
/// `β = tanh(u)`, `α = logistic(u)(1 − β)`, `φ = tanh(u)`, and `δ` a
/// logistic image of its admissible interval given `α`, `β`, `φ` and the PC
/// weights. Loadings are unrestricted.
#[derive(Debug, Clone)]
pub(crate) struct Transform {
    k1: usize,
    n_theta: usize,
    sec: bool,
    ab_groups: Vec<usize>,
    c: Vec<f64>,
}

impl Transform {
    pub(crate) fn new(spec: &ModelSpec, c: Option<&[f64]>) -> Self {
        let sec = spec.variant == Variant::VmemSec;
        Self {
            k1: spec.k1(),
            n_theta: if sec { spec.k2() - 1 } else { 0 },
            sec,
            ab_groups: spec.ab_groups.clone(),
            c: c.map(<[f64]>::to_vec).unwrap_or_default(),
        }
    }

    /// Open interval of `δ` with `|δ + φ| < 1` and
    /// `δcᵢ < 1 − αᵢ − βᵢ` for every series.
    fn delta_bounds(&self, th: &[f64], phi: f64) -> (f64, f64) {
        let (mut lo, mut hi) = (-1.0 - phi, 1.0 - phi);
        for (&g, &ci) in self.ab_groups.iter().zip(&self.c) {
            let slack = 1.0 - th[g - 1] - th[self.k1 + g - 1];
            if ci > 0.0 {
                hi = hi.min(slack / ci);
            } else if ci < 0.0 {
                lo = lo.max(slack / ci);
            }
        }
        (lo, hi)
    }

    pub(crate) fn to_natural(&self, u: &[f64]) -> Vec<f64> {
        let k1 = self.k1;
        let mut th = u.to_vec();
        for g in 0..k1 {
            let b = u[k1 + g].tanh();
            th[k1 + g] = b;
            th[g] = logistic(u[g]) * (1.0 - b);
        }
        if self.sec {
            let j = 2 * k1 + self.n_theta;
            let phi = u[j + 1].tanh();
            let (lo, hi) = self.delta_bounds(&th, phi);
            th[j] = lo + (hi - lo) * logistic(u[j]);
            th[j + 1] = phi;
        }
        th
    }

    /// Inverse map; values on or outside the boundary are pulled inside.
    pub(crate) fn to_unconstrained(&self, th: &[f64]) -> Vec<f64> {
        const EDGE: f64 = 1e-9;
        let inside = |v: f64, lo: f64, hi: f64| v.clamp(lo + EDGE, hi - EDGE);
        let k1 = self.k1;
        let mut u = th.to_vec();
        let mut natural = th.to_vec();
        for g in 0..k1 {
            let b = inside(th[k1 + g], -1.0, 1.0);
            let share = inside(th[g] / (1.0 - b), 0.0, 1.0);
            u[k1 + g] = b.atanh();
            u[g] = logit(share);
            natural[k1 + g] = b;
            natural[g] = share * (1.0 - b);
        }
        if self.sec {
            let j = 2 * k1 + self.n_theta;
            let phi = inside(th[j + 1], -1.0, 1.0);
            u[j + 1] = phi.atanh();
            let (lo, hi) = self.delta_bounds(&natural, phi);
            u[j] = logit(inside((th[j] - lo) / (hi - lo), 0.0, 1.0));
        }
        u
    }
}

/// Everything an inner likelihood evaluation needs besides the coefficients.
pub(crate) struct Objective<'a> {
    pub(crate) spec: &'a ModelSpec,
    pub(crate) x: &'a DMatrix<f64>,
    pub(crate) rows: usize,
    pub(crate) v: DMatrix<f64>,
    pub(crate) kernel: Kernel,
    pub(crate) x_bar: Vec<f64>,
    pub(crate) c: Option<Vec<f64>>,
}

impl<'a> Objective<'a> {
    pub(crate) fn new(
        spec: &'a ModelSpec,
        panel: &'a VolatilityPanel,
        v: DMatrix<f64>,
        c: Option<Vec<f64>>,
    ) -> Result<Self> {
        Ok(Self {
            spec,
            x: panel.x(),
            rows: panel.n_train(),
            kernel: Kernel::new(&v)?,
            v,
            x_bar: panel.x_bar().iter().copied().collect(),
            c,
        })
    }

    pub(crate) fn params(&self, theta: &[f64]) -> Option<ParamSet> {
        let p = ParamSet::from_free(self.spec, theta, self.v.clone(), self.x_bar.clone(), self.c.clone()).ok()?;
        check_constraints(&p, self.spec).is_empty().then_some(p)
    }

    pub(crate) fn loglik(&self, theta: &[f64]) -> f64 {
        match self.params(theta) {
            Some(p) => loglik_rows(self.x, self.rows, &p, &self.kernel, None),
            None => f64::NEG_INFINITY,
        }
    }

    pub(crate) fn per_obs(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let p = self.params(theta)?;
        let mut out = Vec::new();
        let ll = loglik_rows(self.x, self.rows, &p, &self.kernel, Some(&mut out));
        ll.is_finite().then_some(out)
    }
}

fn default_start(spec: &ModelSpec) -> Vec<f64> {
    let k1 = spec.k1();
    let mut th = vec![0.05; k1];
    th.extend(std::iter::repeat_n(0.90, k1));
    if spec.variant == Variant::VmemSec {
        th.extend(std::iter::repeat_n(1.0, spec.k2() - 1));
        th.push(0.05);
        th.push(0.3);
    }
    th
}

/// Pulls `δ` towards zero until the start is admissible.
fn admissible_start(obj: &Objective<'_>, mut th: Vec<f64>) -> Option<Vec<f64>> {
    for _ in 0..40 {
        if obj.loglik(&th).is_finite() {
            return Some(th);
        }
        if obj.spec.variant != Variant::VmemSec {
            return None;
        }
        let j = th.len() - 2;
        th[j] *= 0.5;
    }
    None
}

fn jittered_starts(obj: &Objective<'_>, tr: &Transform, base: &[f64], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).expect("valid sd");
    let u0 = tr.to_unconstrained(base);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..50 {
            let u: Vec<f64> = u0.iter().map(|v| v + noise.sample(&mut rng)).collect();
            let th = tr.to_natural(&u);
            if obj.loglik(&th).is_finite() {
                out.push(th);
                break;
            }
        }
    }
    out
}

/// Minimizes the negative mean log-likelihood from each start; the best
/// result wins, earlier starts winning ties.
fn best_of(obj: &Objective<'_>, tr: &Transform, starts: &[Vec<f64>], opts: &BfgsOptions) -> Option<(Vec<f64>, Minimum)> {
    let scale = obj.rows as f64;
    let results: Vec<Minimum> = starts
        .par_iter()
        .map(|th| {
            let u0 = tr.to_unconstrained(th);
            bfgs(|u| -obj.loglik(&tr.to_natural(u)) / scale, &u0, opts)
        })
        .collect();
    results
        .into_iter()
        .filter(|m| m.f.is_finite())
        .fold(None, |best: Option<Minimum>, m| match best {
            Some(b) if b.f <= m.f => Some(b),
            _ => Some(m),
        })
        .map(|m| (tr.to_natural(&m.x), m))
}

/// Covariance of the demeaned training rows of `x` (divisor `rows`).
fn initial_covariance(x: &DMatrix<f64>, rows: usize) -> DMatrix<f64> {
    let n = x.ncols();
    let mean: Vec<f64> = (0..n).map(|i| x.column(i).rows(0, rows).mean()).collect();
    let mut v = DMatrix::zeros(n, n);
    for t in 0..rows {
        for i in 0..n {
            let di = x[(t, i)] - mean[i];
            for j in 0..=i {
                v[(i, j)] += di * (x[(t, j)] - mean[j]);
            }
        }
    }
    symmetrize_scaled(v, rows)
}

/// Second moment `(1/T) Σ r_t r_t'` of `r_t = x_t − ln μ_t − m`, which does
/// not depend on the current `V`.
fn residual_moment(x: &DMatrix<f64>, rows: usize, params: &ParamSet) -> DMatrix<f64> {
    let out = crate::model::filter_unchecked(x, params);
    let n = x.ncols();
    let mut v = DMatrix::zeros(n, n);
    let mut r = vec![0.0; n];
    for t in 0..rows {
        for i in 0..n {
            r[i] = x[(t, i)] - out.ln_mu[(t, i)] - params.m[i];
        }
        for i in 0..n {
            for j in 0..=i {
                v[(i, j)] += r[i] * r[j];
            }
        }
    }
    symmetrize_scaled(v, rows)
}

fn symmetrize_scaled(mut v: DMatrix<f64>, rows: usize) -> DMatrix<f64> {
    let n = v.nrows();
    for i in 0..n {
        for j in 0..i {
            v[(j, i)] = v[(i, j)];
        }
    }
    v / rows as f64
}

fn loadings(spec: &ModelSpec, panel: &VolatilityPanel, factor: Option<&PcFactor>) -> Result<Option<Vec<f64>>> {
    match (spec.variant, factor) {
        (Variant::Vmem, _) => Ok(None),
        (Variant::VmemSec, None) => Err(Error::InvalidInput(
            "vMEM-SeC needs the principal-component factor".into(),
        )),
        (Variant::VmemSec, Some(f)) => {
            if f.loadings.len() != panel.n_series() {
                return Err(Error::Dimension(format!(
                    "factor has {} loadings, panel has {} series",
                    f.loadings.len(),
                    panel.n_series()
                )));
            }
            Ok(Some(f.loadings.iter().copied().collect()))
        }
    }
}

/// Fits `spec` to the training window of `panel`.
///
/// Alternates between maximizing the likelihood over the dynamic
/// coefficients at fixed `V` and re-estimating `V` from the log-residuals,
/// until the maximized log-likelihood changes by less than
/// `options.outer_tolerance`. `V` starts at the covariance of `x`; each
/// update is the residual second moment, which maximizes the likelihood in
/// `V` at the current coefficients, so the trace cannot decrease. Each inner
/// maximization starts at the previous optimum; the first also tries
/// `options.multistart` seeded jittered starts.
///
/// The factor's loadings `c` enter the common component; centring uses the
/// panel's training mean.
pub fn fit(
    panel: &VolatilityPanel,
    factor: Option<&PcFactor>,
    spec: &ModelSpec,
    options: &FitOptions,
) -> Result<FitResult> {
    let clock = Instant::now();
    options.validate()?;
    spec.validate()?;
    if spec.n_series() != panel.n_series() {
        return Err(Error::Dimension(format!(
            "spec covers {} series, panel has {}",
            spec.n_series(),
            panel.n_series()
        )));
    }
    let n_free = spec.n_free();
    let rows = panel.n_train();
    if rows <= 10 * n_free {
        return Err(Error::InsufficientData(format!(
            "{rows} training rows for {n_free} free parameters (need more than {})",
            10 * n_free
        )));
    }
    let c = loadings(spec, panel, factor)?;
    let tr = Transform::new(spec, c.as_deref());

    let mut v = initial_covariance(panel.x(), rows);
    let mut theta: Option<Vec<f64>> = None;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut best_params = None;

    for iter in 0..options.max_outer_iterations {
        let obj = Objective::new(spec, panel, v.clone(), c.clone())?;
        let starts = match &theta {
            Some(th) => vec![th.clone()],
            None => {
                let base = admissible_start(&obj, default_start(spec)).ok_or_else(|| {
                    Error::Estimation("no admissible starting point found".into())
                })?;
                let mut s = vec![base.clone()];
                s.extend(jittered_starts(&obj, &tr, &base, options.multistart, options.seed));
                s
            }
        };
        let (th, min) = best_of(&obj, &tr, &starts, &options.inner).ok_or_else(|| {
            Error::Estimation(format!(
                "inner optimizer failed from all {} starting points",
                starts.len()
            ))
        })?;
        let params = obj.params(&th).ok_or_else(|| {
            Error::Estimation("optimizer returned an inadmissible point".into())
        })?;
        let ll = obj.loglik(&th);
        log::debug!(
            "{} outer {}: loglik {ll:.6} ({} inner iterations, converged {})",
            spec.label(),
            iter + 1,
            min.iterations,
            min.converged
        );
        let prev = trace.last().copied();
        trace.push(ll);
        theta = Some(th);
        let next_v = residual_moment(panel.x(), rows, &params);
        best_params = Some(params);
        if prev.is_some_and(|p| (ll - p).abs() < options.outer_tolerance) {
            converged = true;
            break;
        }
        v = next_v;
    }

    let params = best_params.expect("at least one outer iteration");
    let theta = theta.expect("at least one outer iteration");
    let loglik = *trace.last().expect("non-empty trace");
    if !converged {
        log::warn!(
            "{}: outer loop stopped after {} iterations without meeting tolerance",
            spec.label(),
            trace.len()
        );
    }

    let std_errors = if options.std_errors {
        let obj = Objective::new(spec, panel, params.v.clone(), c.clone())?;
        match sandwich(|th| obj.per_obs(th), &theta) {
            Ok(s) => Some(s.std_errors),
            Err(e) => {
                log::warn!("{}: standard errors unavailable: {e}", spec.label());
                None
            }
        }
    } else {
        None
    };

    let (aic, bic) = information_criteria(loglik, n_free, rows);
    Ok(FitResult {
        spec: spec.clone(),
        params,
        loglik,
        outer_iterations: trace.len(),
        loglik_trace: trace,
        parameter_names: spec.parameter_names(),
        estimates: theta,
        std_errors,
        n_free,
        n_obs: rows,
        aic,
        bic,
        converged,
        wall_time_secs: clock.elapsed().as_secs_f64(),
    })
}

/// Sandwich standard errors of the free coefficients of `params`, holding
/// `V` fixed.
pub fn sandwich_std_errors(
    panel: &VolatilityPanel,
    factor: Option<&PcFactor>,
    spec: &ModelSpec,
    params: &ParamSet,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let c = loadings(spec, panel, factor)?;
    let mut p = params.clone();
    p.x_bar = panel.x_bar().iter().copied().collect();
    p.c = c.clone();
    let violations = check_constraints(&p, spec);
    if !violations.is_empty() {
        return Err(Error::Constraints(violations));
    }
    let obj = Objective::new(spec, panel, params.v.clone(), c)?;
    let theta = p.to_free(spec);
    Ok(sandwich(|th| obj.per_obs(th), &theta)?.std_errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{filter_log_likelihood, simulate};

    #[test]
    fn transform_round_trip() {
        let spec = ModelSpec::clustered(Variant::VmemSec, vec![1, 2, 1], Some(vec![1, 2, 2])).unwrap();
        let c = [0.6, -0.5, 0.62];
        let tr = Transform::new(&spec, Some(&c));
        let th = vec![0.1, 0.2, 0.85, 0.6, 1.3, -0.2, 0.5];
        let back = tr.to_natural(&tr.to_unconstrained(&th));
        for (a, b) in th.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        // every image satisfies the bijection-enforced constraints
        for u in [-8.0, -1.0, 0.0, 2.0, 8.0] {
            let th = tr.to_natural(&[u; 7]);
            for g in 0..2 {
                assert!(th[g] + th[2 + g] < 1.0 && th[2 + g].abs() <= 1.0);
            }
            assert!((th[5] + th[6]).abs() <= 1.0 && th[6].abs() <= 1.0);
            for (i, g) in [0, 1, 0].into_iter().enumerate() {
                assert!(th[5] * c[i] < 1.0 - th[g] - th[2 + g]);
            }
        }
    }

    #[test]
    fn scalar_vmem_fit_is_consistent() {
        let v = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.15]);
        let truth = ParamSet::vmem(vec![0.1, 0.1], vec![0.85, 0.85], v, vec![0.5, 0.2]);
        let spec = ModelSpec::scalar(Variant::Vmem, 2);
        let sim = simulate(&spec, &truth, 1500, 21).unwrap();
        let res = fit(&sim.panel, None, &spec, &FitOptions::default()).unwrap();
        assert!(res.converged);
        let (_, ll) = filter_log_likelihood(&sim.panel, &spec, &res.params).unwrap();
        assert!((ll - res.loglik).abs() < 1e-6);
        for w in res.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6);
        }
        let se = res.std_errors.unwrap();
        assert!((res.estimates[0] - 0.1).abs() < 4.0 * se[0]);
        assert!((res.estimates[1] - 0.85).abs() < 4.0 * se[1]);
    }

    #[test]
    fn too_short_window() {
        let v = DMatrix::identity(2, 2) * 0.1;
        let truth = ParamSet::vmem(vec![0.1, 0.1], vec![0.8, 0.8], v, vec![0.0, 0.0]);
        let spec = ModelSpec::diagonal(Variant::Vmem, 2);
        let sim = simulate(&spec, &truth, 30, 1).unwrap();
        assert!(matches!(
            fit(&sim.panel, None, &spec, &FitOptions::default()),
            Err(Error::InsufficientData(_))
        ));
    }
}
