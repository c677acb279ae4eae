//! Model-based clustering of series by their dynamics and loadings.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{fit, fit_univariate_mem_sec, FitOptions, FitResult, UnivariateFit};
use crate::factor::PcFactor;
use crate::model::{filter_unchecked, ModelSpec, Parameterization, Variant};
use crate::panel::VolatilityPanel;

/// Distance between the AR(∞) representations of two invertible ARMA(1,1)
/// processes with AR coefficient `φ` and MA coefficient `−ψ`.
///
/// With `a = φ − ψ` the j-th AR(∞) weight is `a ψ^{j−1}`, so the squared
/// distance sums three geometric series.
pub fn arma11_distance(phi_i: f64, psi_i: f64, phi_j: f64, psi_j: f64) -> Result<f64> {
    for psi in [psi_i, psi_j] {
        if !(psi.abs() < 1.0) {
            return Err(Error::Domain(format!(
                "MA coefficient {psi} is outside the invertibility region"
            )));
        }
    }
    let (a, b) = (phi_i - psi_i, phi_j - psi_j);
    let r = a * a / (1.0 - psi_i * psi_i) + b * b / (1.0 - psi_j * psi_j)
        - 2.0 * a * b / (1.0 - psi_i * psi_j);
    if r < 0.0 {
        if r < -1e-12 {
            return Err(Error::Domain(format!("negative squared distance {r}")));
        }
        return Ok(0.0);
    }
    Ok(r.sqrt())
}

/// ARMA distance between two MEM dynamics `(α, β)`, whose log-volatility
/// follows an ARMA(1,1) with AR coefficient `α + β` and MA coefficient `−β`.
///
/// ```
/// let d = vmemsec::cluster::arma_distance(0.3, 0.0, 0.1, 0.0).unwrap();
/// assert!((d - 0.2).abs() < 1e-15);
/// ```
pub fn arma_distance(alpha_i: f64, beta_i: f64, alpha_j: f64, beta_j: f64) -> Result<f64> {
    arma11_distance(alpha_i + beta_i, beta_i, alpha_j + beta_j, beta_j)
}

/// Absolute difference of two loadings.
pub fn theta_distance(theta_i: f64, theta_j: f64) -> f64 {
    (theta_i - theta_j).abs()
}

/// Pairwise ARMA distances of `(α, β)` pairs.
pub fn arma_distance_matrix(dynamics: &[(f64, f64)]) -> Result<DMatrix<f64>> {
    let n = dynamics.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        Ok(0.0)
                    } else {
                        let (a, b) = dynamics[i];
                        let (c, d) = dynamics[j];
                        arma_distance(a, b, c, d)
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Pairwise loading distances.
pub fn theta_distance_matrix(theta: &[f64]) -> DMatrix<f64> {
    let n = theta.len();
    DMatrix::from_fn(n, n, |i, j| theta_distance(theta[i], theta[j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Node ids: leaves are `0..n`, the node created by merge `s` is `n + s`.
    pub left: usize,
    pub right: usize,
    /// Average distance between the two merged clusters.
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn heights(&self) -> Vec<f64> {
        self.merges.iter().map(|m| m.height).collect()
    }

    /// Group ids (1-based, numbered by first appearance in leaf order) after
    /// cutting the tree into `k` clusters.
    pub fn cut(&self, k: usize) -> Result<Partition> {
        let n = self.labels.len();
        if k == 0 || k > n {
            return Err(Error::InvalidInput(format!("cannot cut {n} leaves into {k} clusters")));
        }
        // union-find over the first n - k merges
        let mut parent: Vec<usize> = (0..2 * n - 1).collect();
        fn root(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for (s, m) in self.merges.iter().take(n - k).enumerate() {
            let node = n + s;
            let (a, b) = (root(&mut parent, m.left), root(&mut parent, m.right));
            parent[a] = node;
            parent[b] = node;
        }
        let mut ids = vec![0usize; 2 * n - 1];
        let mut next = 0;
        let assignment = (0..n)
            .map(|i| {
                let r = root(&mut parent, i);
                if ids[r] == 0 {
                    next += 1;
                    ids[r] = next;
                }
                ids[r]
            })
            .collect();
        Partition::new(self.labels.clone(), assignment)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub labels: Vec<String>,
    /// 1-based group of each label.
    pub assignment: Vec<usize>,
    pub k: usize,
}

impl Partition {
    pub fn new(labels: Vec<String>, assignment: Vec<usize>) -> Result<Self> {
        if labels.len() != assignment.len() {
            return Err(Error::Dimension("one group id per label required".into()));
        }
        let k = assignment.iter().copied().max().unwrap_or(0);
        let mut used = vec![false; k + 1];
        for &g in &assignment {
            if g == 0 {
                return Err(Error::InvalidInput("group ids start at 1".into()));
            }
            used[g] = true;
        }
        if used.iter().skip(1).any(|u| !u) {
            return Err(Error::InvalidInput("group ids are not contiguous".into()));
        }
        Ok(Self {
            labels,
            assignment,
            k,
        })
    }

    pub fn group_of(&self, label: &str) -> Option<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.assignment[i])
    }
}

/// How many clusters to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Cut where the gap between consecutive merge heights is largest.
    /// A single cluster is kept when the final merge height does not exceed
    /// `noise_floor`.
    Auto { noise_floor: f64 },
    Fixed(usize),
}

impl Default for Selection {
    fn default() -> Self {
        Selection::Auto { noise_floor: 0.0 }
    }
}

/// Average-linkage (UPGMA) agglomeration. Ties merge the pair with the
/// smallest node ids first.
pub fn average_linkage(distances: &DMatrix<f64>, labels: &[String]) -> Result<Dendrogram> {
    let n = distances.nrows();
    if n < 2 {
        return Err(Error::InsufficientData("clustering needs at least 2 items".into()));
    }
    if distances.ncols() != n || labels.len() != n {
        return Err(Error::Dimension("distance matrix must be square with one label per row".into()));
    }
    for i in 0..n {
        if distances[(i, i)].abs() > 1e-12 {
            return Err(Error::InvalidInput("distance matrix diagonal must be zero".into()));
        }
        for j in 0..i {
            let (a, b) = (distances[(i, j)], distances[(j, i)]);
            if !(a >= 0.0) || (a - b).abs() > 1e-12 * a.abs().max(1.0) {
                return Err(Error::InvalidInput(
                    "distance matrix must be symmetric and non-negative".into(),
                ));
            }
        }
    }

    let mut d = distances.clone();
    // active slot -> (node id, size)
    let mut active: Vec<Option<(usize, usize)>> = (0..n).map(|i| Some((i, 1))).collect();
    let mut merges = Vec::with_capacity(n - 1);
    for s in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            let Some((ni, _)) = active[i] else { continue };
            for j in i + 1..n {
                let Some((nj, _)) = active[j] else { continue };
                let h = d[(i, j)];
                let better = match best {
                    None => true,
                    Some((bh, bi, bj)) => {
                        let (bni, bnj) = (active[bi].unwrap().0, active[bj].unwrap().0);
                        let key = (ni.min(nj), ni.max(nj));
                        let bkey = (bni.min(bnj), bni.max(bnj));
                        h < bh || (h == bh && key < bkey)
                    }
                };
                if better {
                    best = Some((h, i, j));
                }
            }
        }
        let (h, i, j) = best.expect("at least two active clusters");
        let (ni, si) = active[i].unwrap();
        let (nj, sj) = active[j].unwrap();
        for k in 0..n {
            if k != i && k != j && active[k].is_some() {
                let v = (si as f64 * d[(i, k)] + sj as f64 * d[(j, k)]) / (si + sj) as f64;
                d[(i, k)] = v;
                d[(k, i)] = v;
            }
        }
        active[i] = Some((n + s, si + sj));
        active[j] = None;
        merges.push(Merge {
            left: ni.min(nj),
            right: ni.max(nj),
            height: h,
            size: si + sj,
        });
    }
    Ok(Dendrogram {
        labels: labels.to_vec(),
        merges,
    })
}

/// Number of clusters chosen by the largest-gap rule.
///
/// Cutting after merge `s` (1-based) leaves `n − s` clusters; the gap after
/// `s` is `h_{s+1} − h_s`, for `s = 1..n−2`. Ties pick fewer clusters.
pub fn select_k(dendrogram: &Dendrogram, noise_floor: f64) -> usize {
    let h = dendrogram.heights();
    let n = h.len() + 1;
    if n <= 2 {
        return 1;
    }
    let mut best_gap = f64::NEG_INFINITY;
    let mut best_k = 1;
    for s in 1..=n - 2 {
        let gap = h[s] - h[s - 1];
        if gap >= best_gap {
            best_gap = gap;
            best_k = n - s;
        }
    }
    if h[n - 2] <= noise_floor {
        1
    } else {
        best_k
    }
}

/// Average-linkage clustering followed by a cut chosen by `selection`.
pub fn hierarchical_cluster(
    distances: &DMatrix<f64>,
    labels: &[String],
    selection: Selection,
) -> Result<(Dendrogram, Partition)> {
    let dendrogram = average_linkage(distances, labels)?;
    let k = match selection {
        Selection::Auto { noise_floor } => select_k(&dendrogram, noise_floor),
        Selection::Fixed(k) => k,
    };
    let partition = dendrogram.cut(k)?;
    Ok((dendrogram, partition))
}

/// Adjusted Rand index of two partitions of the same labels.
///
/// ```
/// use vmemsec::cluster::{adjusted_rand_index, Partition};
/// let l: Vec<String> = ["a", "b", "c", "d"].map(String::from).to_vec();
/// let p = Partition::new(l.clone(), vec![1, 1, 2, 2]).unwrap();
/// let q = Partition::new(l, vec![1, 2, 1, 2]).unwrap();
/// assert_eq!(adjusted_rand_index(&p, &q).unwrap(), -0.5);
/// ```
pub fn adjusted_rand_index(p1: &Partition, p2: &Partition) -> Result<f64> {
    let n = p1.labels.len();
    let mut sorted1 = p1.labels.clone();
    let mut sorted2 = p2.labels.clone();
    sorted1.sort();
    sorted2.sort();
    if sorted1 != sorted2 || sorted1.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("partitions cover different labels".into()));
    }
    let mut table = vec![vec![0u64; p2.k + 1]; p1.k + 1];
    for (i, label) in p1.labels.iter().enumerate() {
        let g2 = p2.group_of(label).expect("same label set");
        table[p1.assignment[i]][g2] += 1;
    }
    // integer counts so that the index is a single rounded ratio
    let pairs = |m: u64| i128::from(m * m.saturating_sub(1) / 2);
    let index: i128 = table.iter().flatten().map(|&m| pairs(m)).sum();
    let a: i128 = table.iter().map(|row| pairs(row.iter().sum())).sum();
    let b: i128 = (0..=p2.k)
        .map(|j| pairs(table.iter().map(|row| row[j]).sum()))
        .sum();
    let total = pairs(n as u64);
    // (index − ab/N) / ((a + b)/2 − ab/N), scaled by 2N
    let num = 2 * (index * total - a * b);
    let den = (a + b) * total - 2 * a * b;
    if den == 0 {
        // both partitions trivial (all singletons or a single group)
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok(num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterOptions {
    pub fit: FitOptions,
    /// Fixed number of `(α, β)` groups; automatic when `None`.
    pub ab_k: Option<usize>,
    /// Fixed number of loading groups; automatic when `None`.
    pub theta_k: Option<usize>,
    /// Multiple of the first-stage estimation noise below which the final
    /// merge is not treated as a real split. Zero disables the floor.
    pub noise_multiplier: f64,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            ab_k: None,
            theta_k: None,
            noise_multiplier: DEFAULT_NOISE_MULTIPLIER,
        }
    }
}

/// Calibrated on homogeneous and two-regime simulated panels.
pub const DEFAULT_NOISE_MULTIPLIER: f64 = 3.0;

/// Gram matrix of the derivatives of the AR(∞) weights `αβ^{j−1}` with
/// respect to `(α, β)`.
fn embedding_gram(alpha: f64, beta: f64) -> [[f64; 2]; 2] {
    let q = 1.0 - beta * beta;
    let ab = alpha * beta / (q * q);
    [[1.0 / q, ab], [ab, alpha * alpha * (1.0 + beta * beta) / (q * q * q)]]
}

/// Root mean squared ARMA distance expected between two independent
/// estimates of the same dynamics, averaged over all pairs; zero when any
/// first-stage covariance is missing.
pub fn arma_noise_scale(first_stage: &[UnivariateFit]) -> f64 {
    let mut q = Vec::with_capacity(first_stage.len());
    for f in first_stage {
        let Some(cov) = &f.covariance else { return 0.0 };
        let g = embedding_gram(f.alpha, f.beta);
        let mut tr = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                tr += g[a][b] * cov[b][a];
            }
        }
        q.push(tr.max(0.0));
    }
    pair_rms(&q)
}

/// Same as [`arma_noise_scale`] for the loadings.
pub fn theta_noise_scale(first_stage: &[UnivariateFit]) -> f64 {
    let mut q = Vec::with_capacity(first_stage.len());
    for f in first_stage {
        match &f.covariance {
            Some(cov) if cov.len() == 3 => q.push(cov[2][2].max(0.0)),
            _ => return 0.0,
        }
    }
    pair_rms(&q)
}

fn pair_rms(q: &[f64]) -> f64 {
    let n = q.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += q[i] + q[j];
        }
    }
    (sum / (n * (n - 1) / 2) as f64).sqrt()
}

fn selection(k: Option<usize>, multiplier: f64, noise: f64) -> Selection {
    match k {
        Some(k) => Selection::Fixed(k),
        None => Selection::Auto {
            noise_floor: multiplier * noise,
        },
    }
}

/// Everything the clustering pipeline produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringOutcome {
    pub spec: ModelSpec,
    pub ab_dendrogram: Dendrogram,
    pub ab_partition: Partition,
    pub theta_dendrogram: Option<Dendrogram>,
    pub theta_partition: Option<Partition>,
    pub first_stage: Vec<UnivariateFit>,
    /// Scalar vMEM-SeC fit supplying `ξ*` (vMEM-SeC only).
    pub scalar_fit: Option<FitResult>,
    pub xi_star: Option<Vec<f64>>,
}

/// Builds a clustered specification from the training window of `panel`.
///
/// vMEM-SeC: fit the scalar vMEM-SeC, take its common component `ξ*`, fit a
/// univariate MEM-SeC per series with `ξ*` as a regressor, then cluster the
/// `(αᵢ, βᵢ)` by ARMA distance and the `ϑᵢ` by absolute difference.
/// vMEM: univariate log-MEM fits on each `xᵢ` and only the `(α, β)`
/// clustering.
pub fn clustering_pipeline(
    panel: &VolatilityPanel,
    factor: Option<&PcFactor>,
    variant: Variant,
    options: &ClusterOptions,
) -> Result<ClusteringOutcome> {
    let n = panel.n_series();
    if n < 3 {
        return Err(Error::InsufficientData("clustering needs at least 3 series".into()));
    }
    let rows = panel.n_train();
    let (scalar_fit, xi_star) = match variant {
        Variant::Vmem => (None, None),
        Variant::VmemSec => {
            let spec = ModelSpec::scalar(Variant::VmemSec, n);
            let mut opts = options.fit.clone();
            opts.std_errors = false;
            let res = fit(panel, factor, &spec, &opts)?;
            let out = filter_unchecked(panel.x(), &res.params);
            let xi: Vec<f64> = out.xi.iter().take(rows).copied().collect();
            (Some(res), Some(xi))
        }
    };

    let first_stage: Vec<UnivariateFit> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = panel.x().column(i).rows(0, rows).iter().copied().collect();
            fit_univariate_mem_sec(&x, xi_star.as_deref(), &options.fit).map_err(|e| {
                Error::Estimation(format!("first-stage fit of {}: {e}", panel.tickers()[i]))
            })
        })
        .collect::<Result<_>>()?;

    let labels = panel.tickers().to_vec();
    let dynamics: Vec<(f64, f64)> = first_stage.iter().map(|f| (f.alpha, f.beta)).collect();
    let ab_selection = selection(options.ab_k, options.noise_multiplier, arma_noise_scale(&first_stage));
    let (ab_dendrogram, ab_partition) =
        hierarchical_cluster(&arma_distance_matrix(&dynamics)?, &labels, ab_selection)?;

    let (theta_dendrogram, theta_partition) = match variant {
        Variant::Vmem => (None, None),
        Variant::VmemSec => {
            let theta: Vec<f64> = first_stage.iter().map(|f| f.theta.unwrap_or(1.0)).collect();
            let sel = selection(options.theta_k, options.noise_multiplier, theta_noise_scale(&first_stage));
            let (d, p) = hierarchical_cluster(&theta_distance_matrix(&theta), &labels, sel)?;
            (Some(d), Some(p))
        }
    };

    let spec = ModelSpec {
        variant,
        parameterization: Parameterization::Clustered,
        ab_groups: ab_partition.assignment.clone(),
        theta_groups: theta_partition.as_ref().map(|p| p.assignment.clone()),
    };
    spec.validate()?;
    Ok(ClusteringOutcome {
        spec,
        ab_dendrogram,
        ab_partition,
        theta_dendrogram,
        theta_partition,
        first_stage,
        scalar_fit,
        xi_star,
    })
}
