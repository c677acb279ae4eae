//! First principal component of the demeaned log-volatility panel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::VolatilityPanel;

/// Leading principal component of the training-window covariance of `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcFactor {
    /// Unit-norm loadings `c`, sign fixed so that `Σ cᵢ > 0`.
    pub loadings: DVector<f64>,
    /// Scores `p_t = c'(x_t − x̄)` for every row of the panel.
    pub scores: DVector<f64>,
    /// Largest covariance eigenvalue.
    pub eigenvalue: f64,
    /// `λ₁ / Σ λᵢ`.
    pub explained_share: f64,
    /// The centring vector used for the scores.
    pub x_bar: DVector<f64>,
}

/// Sample covariance (divisor `rows − 1`) of the first `rows` rows.
pub(crate) fn training_covariance(x: &DMatrix<f64>, mean: &DVector<f64>, rows: usize) -> DMatrix<f64> {
    let n = x.ncols();
    let mut cov = DMatrix::zeros(n, n);
    for t in 0..rows {
        let d = x.row(t).transpose() - mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov / (rows as f64 - 1.0)
}

/// Extracts the first principal component.
///
/// Loadings come from the covariance of the training rows only; scores are
/// produced for all rows using the training mean.
pub fn first_principal_component(panel: &VolatilityPanel) -> Result<PcFactor> {
    let n = panel.n_series();
    let rows = panel.n_train();
    if n < 2 {
        return Err(Error::InsufficientData(
            "principal component needs at least 2 series".into(),
        ));
    }
    if rows <= n {
        return Err(Error::InsufficientData(format!(
            "training window of {rows} rows is too short for {n} series"
        )));
    }
    let x_bar = panel.x_bar().clone();
    let cov = training_covariance(panel.x(), &x_bar, rows);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l1 = eig.eigenvalues[order[0]];
    let l2 = eig.eigenvalues[order[1]];
    let total: f64 = eig.eigenvalues.iter().sum();
    if l1 - l2 <= 1e-10 * l1.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::AmbiguousComponent {
            first: l1,
            second: l2,
        });
    }

    let mut c: DVector<f64> = eig.eigenvectors.column(order[0]).into_owned();
    c /= c.norm();
    orient(&mut c);

    let scores = DVector::from_fn(panel.len(), |t, _| {
        (0..n).map(|i| c[i] * (panel.x()[(t, i)] - x_bar[i])).sum()
    });

    Ok(PcFactor {
        loadings: c,
        scores,
        eigenvalue: l1,
        explained_share: (l1 / total).clamp(0.0, 1.0),
        x_bar,
    })
}

/// Flip so the loadings sum is positive; an exactly zero sum falls back to
/// making the first nonzero coordinate positive.
fn orient(c: &mut DVector<f64>) {
    let s: f64 = c.iter().sum();
    let flip = if s.abs() > 1e-12 {
        s < 0.0
    } else {
        c.iter().find(|v| v.abs() > 1e-12).is_some_and(|v| *v < 0.0)
    };
    if flip {
        c.neg_mut();
    }
}

impl PcFactor {
    /// A factor with given loadings, centred at the panel's training mean.
    /// Useful when the loadings are known, as in simulation studies.
    pub fn from_loadings(panel: &VolatilityPanel, loadings: DVector<f64>) -> Result<Self> {
        let n = panel.n_series();
        if loadings.len() != n {
            return Err(Error::Dimension(format!(
                "{} loadings for {n} series",
                loadings.len()
            )));
        }
        let x_bar = panel.x_bar().clone();
        let cov = training_covariance(panel.x(), &x_bar, panel.n_train());
        let total = cov.trace();
        let eigenvalue = (loadings.transpose() * &cov * &loadings)[(0, 0)] / loadings.norm_squared();
        let mut f = Self {
            scores: DVector::zeros(0),
            eigenvalue,
            explained_share: (eigenvalue / total).clamp(0.0, 1.0),
            loadings,
            x_bar,
        };
        f.scores = f.project(panel)?;
        Ok(f)
    }

    /// Scores for an arbitrary panel using these loadings and centring.
    pub fn project(&self, panel: &VolatilityPanel) -> Result<DVector<f64>> {
        let n = self.loadings.len();
        if panel.n_series() != n {
            return Err(Error::Dimension(format!(
                "factor has {n} loadings, panel has {} series",
                panel.n_series()
            )));
        }
        Ok(DVector::from_fn(panel.len(), |t, _| {
            (0..n)
                .map(|i| self.loadings[i] * (panel.x()[(t, i)] - self.x_bar[i]))
                .sum()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn panel_from_x(x: DMatrix<f64>) -> VolatilityPanel {
        let t_len = x.nrows();
        let n = x.ncols();
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let dates = (0..t_len)
            .map(|t| start + chrono::Days::new(t as u64))
            .collect();
        let tickers = (0..n).map(|i| format!("S{i}")).collect();
        VolatilityPanel::new(tickers, dates, x.map(f64::exp), None).unwrap()
    }

    #[test]
    fn duplicated_series() {
        let col = [0.1, -0.3, 0.5, 0.2, -0.4, 0.0];
        let x = DMatrix::from_fn(6, 2, |t, _| col[t]);
        let f = first_principal_component(&panel_from_x(x)).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f.loadings[0] - h).abs() < 1e-10);
        assert!((f.loadings[1] - h).abs() < 1e-10);
        assert!((f.explained_share - 1.0).abs() < 1e-10);
    }

    #[test]
    fn two_by_two_covariance() {
        // Rows chosen so the sample covariance (divisor 3) is [[2,1],[1,2]]:
        // a^2 + b^2 = 3 and ab = 0.75. Eigenvalues 3 and 1.
        let a = (4.5f64.sqrt() + 1.5f64.sqrt()) / 2.0;
        let b = (4.5f64.sqrt() - 1.5f64.sqrt()) / 2.0;
        let rows = [[a, b], [-a, -b], [b, a], [-b, -a]];
        let x = DMatrix::from_fn(4, 2, |t, i| rows[t][i]);
        let f = first_principal_component(&panel_from_x(x)).unwrap();
        assert!((f.eigenvalue - 3.0).abs() < 1e-10, "{}", f.eigenvalue);
        assert!((f.explained_share - 0.75).abs() < 1e-10);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f.loadings[0] - h).abs() < 1e-10);
        assert!((f.loadings[1] - h).abs() < 1e-10);
    }

    #[test]
    fn ambiguous_component() {
        // Isotropic covariance: both eigenvalues equal.
        let rows = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let x = DMatrix::from_fn(4, 2, |t, i| rows[t][i]);
        assert!(matches!(
            first_principal_component(&panel_from_x(x)),
            Err(Error::AmbiguousComponent { .. })
        ));
    }

    #[test]
    fn needs_enough_rows() {
        let x = DMatrix::from_fn(3, 3, |t, i| (t * 3 + i) as f64 * 0.1);
        assert!(matches!(
            first_principal_component(&panel_from_x(x)),
            Err(Error::InsufficientData(_))
        ));
    }
}
