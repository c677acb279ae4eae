//! One-step forecasts, loss functions, information criteria and the Model
//! Confidence Set.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{filter, ModelSpec, ParamSet};
use crate::panel::VolatilityPanel;

/// Rows of a panel over which forecasts or losses are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Training rows.
    #[serde(rename = "is")]
    InSample,
    /// Rows from the split to the end.
    #[serde(rename = "oos")]
    OutOfSample,
    /// Half-open row range.
    Rows { start: usize, end: usize },
}

impl Window {
    /// Resolves to a half-open row range of `panel`.
    pub fn range(self, panel: &VolatilityPanel) -> Result<(usize, usize)> {
        let (start, end) = match self {
            Window::InSample => (0, panel.n_train()),
            Window::OutOfSample => {
                if !panel.has_holdout() {
                    return Err(Error::InvalidInput(
                        "panel has no out-of-sample rows".into(),
                    ));
                }
                (panel.split_index(), panel.len())
            }
            Window::Rows { start, end } => (start, end),
        };
        if start >= end || end > panel.len() {
            return Err(Error::InvalidInput(format!(
                "window {start}..{end} outside a panel of {} rows",
                panel.len()
            )));
        }
        Ok((start, end))
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::InSample => f.write_str("is"),
            Window::OutOfSample => f.write_str("oos"),
            Window::Rows { start, end } => write!(f, "{start}..{end}"),
        }
    }
}

impl std::str::FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "is" | "in-sample" | "insample" => Ok(Window::InSample),
            "oos" | "out-of-sample" | "outofsample" => Ok(Window::OutOfSample),
            _ => Err(Error::InvalidInput(format!("unknown window `{s}`"))),
        }
    }
}

/// One-step-ahead forecasts `exp(ln μ_t)` for the rows of `window`.
///
/// `ln μ_t` uses information through `t − 1` only; `x̄` and `c` come from
/// `params`, so out-of-sample rows reuse the training-window values.
pub fn forecast_one_step(
    panel: &VolatilityPanel,
    spec: &ModelSpec,
    params: &ParamSet,
    window: Window,
) -> Result<DMatrix<f64>> {
    let (start, end) = window.range(panel)?;
    let out = filter(panel, spec, params)?;
    Ok(out.ln_mu.rows(start, end - start).map(f64::exp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
    Qlike,
}

impl Loss {
    /// Loss of forecast `mu` for realization `y`.
    #[inline]
    pub fn eval(self, y: f64, mu: f64) -> f64 {
        match self {
            Loss::Mse => (y - mu) * (y - mu),
            Loss::Qlike => mu.ln() + y / mu,
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::Mse => "MSE",
            Loss::Qlike => "QLIKE",
        })
    }
}

/// Per-cell losses of one model over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSeries {
    pub model: String,
    pub loss: Loss,
    pub window: Option<Window>,
    /// `T_eval × n`.
    pub values: DMatrix<f64>,
    /// Grand mean of `values`.
    pub aggregate: f64,
}

impl LossSeries {
    pub fn labeled(mut self, model: impl Into<String>, window: Window) -> Self {
        self.model = model.into();
        self.window = Some(window);
        self
    }

    /// Cross-asset average loss per period.
    pub fn period_means(&self) -> Vec<f64> {
        self.values.row_iter().map(|r| r.mean()).collect()
    }
}

/// Losses of forecasts `mu` against realizations `y`.
pub fn compute_loss(loss: Loss, y: &DMatrix<f64>, mu: &DMatrix<f64>) -> Result<LossSeries> {
    if y.shape() != mu.shape() || y.is_empty() {
        return Err(Error::Dimension(format!(
            "realizations {:?} and forecasts {:?}",
            y.shape(),
            mu.shape()
        )));
    }
    if let Some(bad) = mu.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("forecast {bad} is not positive")));
    }
    if let Some(bad) = y.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("realization {bad} is not positive")));
    }
    let values = y.zip_map(mu, |a, b| loss.eval(a, b));
    Ok(LossSeries {
        model: String::new(),
        loss,
        window: None,
        aggregate: values.mean(),
        values,
    })
}

/// Squared error `(y − μ)²` per cell.
pub fn loss_mse(y: &DMatrix<f64>, mu: &DMatrix<f64>) -> Result<LossSeries> {
    compute_loss(Loss::Mse, y, mu)
}

/// `ln μ + y/μ` per cell.
///
/// ```
/// use nalgebra::DMatrix;
/// let q = vmemsec::evaluate::loss_qlike(
///     &DMatrix::from_element(1, 1, 2.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
/// assert_eq!(q.aggregate, 2.0);
/// ```
pub fn loss_qlike(y: &DMatrix<f64>, mu: &DMatrix<f64>) -> Result<LossSeries> {
    compute_loss(Loss::Qlike, y, mu)
}

/// Information criteria normalized by the number of time periods:
/// `AIC = (−2ℓ + 2k)/T`, `BIC = (−2ℓ + k ln T)/T`.
///
/// ```
/// let (aic, _) = vmemsec::evaluate::information_criteria(416608.3, 2, 4051);
/// assert!((aic - (-205.68)).abs() < 0.005);
/// ```
pub fn information_criteria(loglik: f64, n_free: usize, t: usize) -> (f64, f64) {
    let t_f = t as f64;
    let k = n_free as f64;
    let aic = (-2.0 * loglik + 2.0 * k) / t_f;
    let bic = (-2.0 * loglik + k * t_f.ln()) / t_f;
    (aic, bic)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsOptions {
    pub alpha: f64,
    pub n_bootstrap: usize,
    pub block_length: usize,
    pub seed: u64,
}

impl Default for McsOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            n_bootstrap: 1000,
            block_length: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Elimination {
    pub model: String,
    /// MCS p-value: running maximum of the equivalence-test p-values.
    pub p_value: f64,
    pub statistic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsResult {
    pub surviving: Vec<String>,
    /// Eliminated models in elimination order.
    pub eliminated: Vec<Elimination>,
    /// MCS p-value for every input model, in input order.
    pub p_values: Vec<(String, f64)>,
    pub alpha: f64,
    pub n_bootstrap: usize,
    pub block_length: usize,
}

impl McsResult {
    pub fn contains(&self, model: &str) -> bool {
        self.surviving.iter().any(|m| m == model)
    }
}

/// Circular block bootstrap resample of `0..t_len`.
fn block_indices(rng: &mut ChaCha8Rng, t_len: usize, block: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(t_len);
    while idx.len() < t_len {
        let start = rng.random_range(0..t_len);
        for k in 0..block {
            if idx.len() == t_len {
                break;
            }
            idx.push((start + k) % t_len);
        }
    }
    idx
}

/// Model Confidence Set with the semi-quadratic statistic
/// `T_SQ = Σ_{i<j} t_ij²`, `t_ij = d̄_ij / sqrt(var(d̄_ij))`.
///
/// Losses are averaged across assets within each period. One set of circular
/// block-bootstrap index draws is reused at every elimination step; the
/// variance of each mean differential is its bootstrap variance. The model
/// with the largest `max_j t_ij` is removed while the equivalence p-value is
/// below `alpha`.
pub fn model_confidence_set(losses: &[LossSeries], options: &McsOptions) -> Result<McsResult> {
    let m = losses.len();
    if m < 2 {
        return Err(Error::InvalidInput("MCS needs at least two models".into()));
    }
    if options.n_bootstrap == 0 || options.block_length == 0 || !(options.alpha > 0.0 && options.alpha < 1.0) {
        return Err(Error::InvalidInput("invalid MCS settings".into()));
    }
    let series: Vec<Vec<f64>> = losses.iter().map(LossSeries::period_means).collect();
    let t_len = series[0].len();
    if series.iter().any(|s| s.len() != t_len) || t_len < 2 {
        return Err(Error::Dimension("loss series are not aligned".into()));
    }
    let names: Vec<String> = losses
        .iter()
        .enumerate()
        .map(|(i, l)| if l.model.is_empty() { format!("model_{}", i + 1) } else { l.model.clone() })
        .collect();

    let means: Vec<f64> = series.iter().map(|s| s.iter().sum::<f64>() / t_len as f64).collect();
    // boot[b][i]: resampled mean loss of model i
    let block = options.block_length.min(t_len);
    let boot: Vec<Vec<f64>> = (0..options.n_bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(b as u64);
            let idx = block_indices(&mut rng, t_len, block);
            series
                .iter()
                .map(|s| idx.iter().map(|&t| s[t]).sum::<f64>() / t_len as f64)
                .collect()
        })
        .collect();

    let mut alive: Vec<usize> = (0..m).collect();
    let mut eliminated = Vec::new();
    let mut running_p: f64 = 0.0;
    let mut final_p = 1.0;
    while alive.len() > 1 {
        let k = alive.len();
        let mut t = vec![vec![0.0; k]; k];
        let mut sd = vec![vec![0.0; k]; k];
        for a in 0..k {
            for c in a + 1..k {
                let (i, j) = (alive[a], alive[c]);
                let d = means[i] - means[j];
                let var = boot
                    .iter()
                    .map(|bm| (bm[i] - bm[j] - d).powi(2))
                    .sum::<f64>()
                    / options.n_bootstrap as f64;
                let scale = 1e-14 * (means[i].abs() + means[j].abs()).max(1e-300);
                let tij = if var.sqrt() > scale {
                    d / var.sqrt()
                } else if d.abs() > scale {
                    d.signum() * f64::INFINITY
                } else {
                    0.0
                };
                t[a][c] = tij;
                t[c][a] = -tij;
                sd[a][c] = var.sqrt();
                sd[c][a] = var.sqrt();
            }
        }
        let stat: f64 = (0..k).flat_map(|a| (a + 1..k).map(move |c| (a, c))).map(|(a, c)| t[a][c].powi(2)).sum();
        let exceed = boot
            .iter()
            .filter(|bm| {
                let mut s = 0.0;
                for a in 0..k {
                    for c in a + 1..k {
                        if sd[a][c] > 0.0 && t[a][c].is_finite() {
                            let (i, j) = (alive[a], alive[c]);
                            let z = (bm[i] - bm[j] - (means[i] - means[j])) / sd[a][c];
                            s += z * z;
                        }
                    }
                }
                s >= stat
            })
            .count();
        let p = exceed as f64 / options.n_bootstrap as f64;
        running_p = running_p.max(p);
        if p >= options.alpha {
            final_p = running_p;
            break;
        }
        let worst = (0..k)
            .max_by(|&a, &b| {
                let ma = t[a].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mb = t[b].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                // ties resolve to the earlier model
                ma.total_cmp(&mb).then(b.cmp(&a))
            })
            .expect("non-empty set");
        eliminated.push(Elimination {
            model: names[alive[worst]].clone(),
            p_value: running_p,
            statistic: stat,
        });
        alive.remove(worst);
        final_p = 1.0;
    }

    let mut p_values: Vec<(String, f64)> = names.iter().map(|n| (n.clone(), final_p)).collect();
    for e in &eliminated {
        if let Some(slot) = p_values.iter_mut().find(|(n, _)| *n == e.model) {
            slot.1 = e.p_value;
        }
    }
    Ok(McsResult {
        surviving: alive.iter().map(|&i| names[i].clone()).collect(),
        eliminated,
        p_values,
        alpha: options.alpha,
        n_bootstrap: options.n_bootstrap,
        block_length: options.block_length,
    })
}
