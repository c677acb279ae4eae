use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::spec::{ModelSpec, Variant};
use crate::error::{Error, Result};

/// Every coefficient the filter needs, expanded to one entry per series.
///
/// `m = −diag(V)/2` is maintained by the constructors and
/// [`ParamSet::set_covariance`]. For the vMEM variant `theta` and `c` are
/// `None` and `delta`, `phi` are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub phi: f64,
    #[serde(with = "matrix_rows")]
    pub v: DMatrix<f64>,
    pub m: Vec<f64>,
    pub x_bar: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<f64>>,
}

pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("covariance must be square"));
        }
        Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

fn half_diag_neg(v: &DMatrix<f64>) -> Vec<f64> {
    v.diagonal().iter().map(|d| -d / 2.0).collect()
}

impl ParamSet {
    /// Classical vMEM coefficients.
    pub fn vmem(alpha: Vec<f64>, beta: Vec<f64>, v: DMatrix<f64>, x_bar: Vec<f64>) -> Self {
        let m = half_diag_neg(&v);
        Self {
            alpha,
            beta,
            theta: None,
            delta: 0.0,
            phi: 0.0,
            v,
            m,
            x_bar,
            c: None,
        }
    }

    /// vMEM-SeC coefficients.
    #[allow(clippy::too_many_arguments)]
    pub fn vmem_sec(
        alpha: Vec<f64>,
        beta: Vec<f64>,
        theta: Vec<f64>,
        delta: f64,
        phi: f64,
        v: DMatrix<f64>,
        x_bar: Vec<f64>,
        c: Vec<f64>,
    ) -> Self {
        let m = half_diag_neg(&v);
        Self {
            alpha,
            beta,
            theta: Some(theta),
            delta,
            phi,
            v,
            m,
            x_bar,
            c: Some(c),
        }
    }

    pub fn n_series(&self) -> usize {
        self.alpha.len()
    }

    pub fn variant(&self) -> Variant {
        if self.theta.is_some() {
            Variant::VmemSec
        } else {
            Variant::Vmem
        }
    }

    /// Replaces `V` and resets `m = −diag(V)/2`.
    pub fn set_covariance(&mut self, v: DMatrix<f64>) {
        self.m = half_diag_neg(&v);
        self.v = v;
    }

    /// Expectation-targeting intercept for these coefficients.
    pub fn intercept(&self) -> Vec<f64> {
        targeting_intercept(&self.alpha, &self.beta, &self.x_bar, &self.v)
    }

    pub(crate) fn check_dims(&self) -> Result<()> {
        let n = self.alpha.len();
        let ok = self.beta.len() == n
            && self.x_bar.len() == n
            && self.m.len() == n
            && self.v.shape() == (n, n)
            && self.theta.as_ref().is_none_or(|t| t.len() == n)
            && self.c.as_ref().is_none_or(|c| c.len() == n)
            && self.theta.is_some() == self.c.is_some();
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "inconsistent parameter dimensions for n = {n}"
            )))
        }
    }

    /// Expands a free-parameter vector laid out as
    /// `[α₁..α_k1, β₁..β_k1, ϑ₁..ϑ_{k2−1}, δ, φ]` into per-series coefficients.
    /// The last loading group is fixed by `ϑ'ι = n`.
    pub fn from_free(
        spec: &ModelSpec,
        free: &[f64],
        v: DMatrix<f64>,
        x_bar: Vec<f64>,
        c: Option<Vec<f64>>,
    ) -> Result<Self> {
        if free.len() != spec.n_free() {
            return Err(Error::Dimension(format!(
                "{} free values for a model with {}",
                free.len(),
                spec.n_free()
            )));
        }
        let k1 = spec.k1();
        let alpha = spec.ab_groups.iter().map(|&g| free[g - 1]).collect();
        let beta = spec.ab_groups.iter().map(|&g| free[k1 + g - 1]).collect();
        match spec.variant {
            Variant::Vmem => Ok(Self::vmem(alpha, beta, v, x_bar)),
            Variant::VmemSec => {
                let groups = spec.theta_groups.as_ref().expect("validated spec");
                let k2 = spec.k2();
                let free_theta = &free[2 * k1..2 * k1 + k2 - 1];
                let theta = expand_loadings(groups, k2, free_theta);
                let delta = free[2 * k1 + k2 - 1];
                let phi = free[2 * k1 + k2];
                let c = c.ok_or_else(|| {
                    Error::InvalidInput("vMEM-SeC parameters need factor loadings".into())
                })?;
                Ok(Self::vmem_sec(alpha, beta, theta, delta, phi, v, x_bar, c))
            }
        }
    }

    /// Inverse of [`ParamSet::from_free`], reading each group from its first
    /// member.
    pub fn to_free(&self, spec: &ModelSpec) -> Vec<f64> {
        let k1 = spec.k1();
        let first = |groups: &[usize], g: usize| groups.iter().position(|&x| x == g).unwrap();
        let mut out = Vec::with_capacity(spec.n_free());
        out.extend((1..=k1).map(|g| self.alpha[first(&spec.ab_groups, g)]));
        out.extend((1..=k1).map(|g| self.beta[first(&spec.ab_groups, g)]));
        if let (Some(groups), Some(theta)) = (&spec.theta_groups, &self.theta) {
            out.extend((1..spec.k2()).map(|g| theta[first(groups, g)]));
            out.push(self.delta);
            out.push(self.phi);
        }
        out
    }
}

/// Per-series loadings from `k2 − 1` free group values; the last group takes
/// whatever keeps the loadings summing to `n`.
pub(crate) fn expand_loadings(groups: &[usize], k2: usize, free: &[f64]) -> Vec<f64> {
    let n = groups.len() as f64;
    let mut size = vec![0usize; k2 + 1];
    for &g in groups {
        size[g] += 1;
    }
    let assigned: f64 = (1..k2).map(|g| size[g] as f64 * free[g - 1]).sum();
    let last = (n - assigned) / size[k2] as f64;
    groups
        .iter()
        .map(|&g| if g == k2 { last } else { free[g - 1] })
        .collect()
}

/// `ω = (I − A − B)x̄ + (I − B)diag(V)/2` for diagonal `A`, `B`.
///
/// ```
/// use nalgebra::DMatrix;
/// let w = vmemsec::model::targeting_intercept(
///     &[0.5, 0.5], &[0.5, 0.5], &[3.0, -1.0], &DMatrix::from_diagonal_element(2, 2, 2.0));
/// assert_eq!(w, vec![0.5, 0.5]);
/// ```
pub fn targeting_intercept(alpha: &[f64], beta: &[f64], x_bar: &[f64], v: &DMatrix<f64>) -> Vec<f64> {
    (0..alpha.len())
        .map(|i| (1.0 - alpha[i] - beta[i]) * x_bar[i] + (1.0 - beta[i]) * v[(i, i)] / 2.0)
        .collect()
}

/// One failed stationarity or invertibility condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    /// `|δ + φ| < 1` fails.
    CommonStationarity { delta_plus_phi: f64 },
    /// `|φ| < 1` fails.
    CommonInvertibility { phi: f64 },
    /// `αᵢ + βᵢ < 1` fails.
    IdiosyncraticStationarity { series: usize, alpha_plus_beta: f64 },
    /// `δcᵢ < 1 − (αᵢ + βᵢ)` fails.
    SpilloverStationarity { series: usize, delta_c: f64, bound: f64 },
    /// `|βᵢ| < 1` fails.
    Invertibility { series: usize, beta: f64 },
    /// `ϑ'ι = n` fails.
    LoadingNormalization { sum: f64, n: usize },
    /// A coefficient is NaN or infinite.
    NonFinite { name: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::CommonStationarity { delta_plus_phi } => write!(
                f,
                "stationarity of common component: |delta + phi| = {} >= 1",
                delta_plus_phi.abs()
            ),
            Violation::CommonInvertibility { phi } => write!(
                f,
                "invertibility of common component: |phi| = {} >= 1",
                phi.abs()
            ),
            Violation::IdiosyncraticStationarity {
                series,
                alpha_plus_beta,
            } => write!(
                f,
                "stationarity of series {series}: alpha + beta = {alpha_plus_beta} >= 1"
            ),
            Violation::SpilloverStationarity {
                series,
                delta_c,
                bound,
            } => write!(
                f,
                "spillover stationarity of series {series}: delta*c = {delta_c} >= 1 - (alpha + beta) = {bound}"
            ),
            Violation::Invertibility { series, beta } => {
                write!(f, "invertibility of series {series}: |beta| = {} >= 1", beta.abs())
            }
            Violation::LoadingNormalization { sum, n } => {
                write!(f, "loadings sum to {sum}, expected {n}")
            }
            Violation::NonFinite { name } => write!(f, "non-finite coefficient {name}"),
        }
    }
}

/// Lists every violated stationarity/invertibility condition; empty when
/// the parameters are admissible. Series indices are zero-based.
pub fn check_constraints(params: &ParamSet, spec: &ModelSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = params.n_series();
    let finite = |name: &str, vals: &[f64], out: &mut Vec<Violation>| {
        if vals.iter().any(|v| !v.is_finite()) {
            out.push(Violation::NonFinite { name: name.into() });
        }
    };
    finite("alpha", &params.alpha, &mut out);
    finite("beta", &params.beta, &mut out);

    for i in 0..n {
        let s = params.alpha[i] + params.beta[i];
        if s >= 1.0 {
            out.push(Violation::IdiosyncraticStationarity {
                series: i,
                alpha_plus_beta: s,
            });
        }
        if params.beta[i].abs() >= 1.0 {
            out.push(Violation::Invertibility {
                series: i,
                beta: params.beta[i],
            });
        }
    }

    if spec.variant == Variant::VmemSec {
        finite("delta", &[params.delta], &mut out);
        finite("phi", &[params.phi], &mut out);
        if (params.delta + params.phi).abs() >= 1.0 {
            out.push(Violation::CommonStationarity {
                delta_plus_phi: params.delta + params.phi,
            });
        }
        if params.phi.abs() >= 1.0 {
            out.push(Violation::CommonInvertibility { phi: params.phi });
        }
        if let Some(c) = &params.c {
            for i in 0..n.min(c.len()) {
                let bound = 1.0 - (params.alpha[i] + params.beta[i]);
                let dc = params.delta * c[i];
                if dc >= bound {
                    out.push(Violation::SpilloverStationarity {
                        series: i,
                        delta_c: dc,
                        bound,
                    });
                }
            }
        }
        if let Some(theta) = &params.theta {
            finite("theta", theta, &mut out);
            let sum: f64 = theta.iter().sum();
            if (sum - n as f64).abs() > 1e-10 * (n as f64).max(1.0) {
                out.push(Violation::LoadingNormalization { sum, n });
            }
        }
    }
    out
}
