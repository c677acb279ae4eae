use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Classical log-vMEM: no common component.
    #[serde(rename = "vMEM")]
    Vmem,
    /// vMEM with spillover effects and a common co-movement component.
    #[serde(rename = "vMEM-SeC")]
    VmemSec,
}

impl Variant {
    pub fn has_common_component(self) -> bool {
        matches!(self, Variant::VmemSec)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vmem => "vMEM",
            Variant::VmemSec => "vMEM-SeC",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vmem" => Ok(Variant::Vmem),
            "vmem-sec" | "vmemsec" | "sec" => Ok(Variant::VmemSec),
            _ => Err(Error::InvalidInput(format!("unknown model variant `{s}`"))),
        }
    }
}

/// How the diagonal dynamics (and loadings) are shared across series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Scalar,
    Diagonal,
    Clustered,
}

impl Parameterization {
    pub fn prefix(self) -> &'static str {
        match self {
            Parameterization::Scalar => "s",
            Parameterization::Diagonal => "d",
            Parameterization::Clustered => "c",
        }
    }
}

impl std::str::FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scalar" | "s" => Ok(Parameterization::Scalar),
            "diagonal" | "d" => Ok(Parameterization::Diagonal),
            "clustered" | "c" => Ok(Parameterization::Clustered),
            _ => Err(Error::InvalidInput(format!("unknown parameterization `{s}`"))),
        }
    }
}

/// Model variant, parameterization and the group maps that tie series to
/// shared coefficients.
///
/// Group ids are 1-based and contiguous. `ab_groups[i]` is the `(α, β)` group
/// of series `i`; `theta_groups[i]` its loading group (vMEM-SeC only).
/// A scalar vMEM-SeC has every series in one loading group, so with the
/// normalization `ϑ'ι = n` the loadings are all fixed at one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub parameterization: Parameterization,
    pub ab_groups: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_groups: Option<Vec<usize>>,
}

impl ModelSpec {
    pub fn scalar(variant: Variant, n: usize) -> Self {
        Self {
            variant,
            parameterization: Parameterization::Scalar,
            ab_groups: vec![1; n],
            theta_groups: variant.has_common_component().then(|| vec![1; n]),
        }
    }

    pub fn diagonal(variant: Variant, n: usize) -> Self {
        let ids: Vec<usize> = (1..=n).collect();
        Self {
            variant,
            parameterization: Parameterization::Diagonal,
            ab_groups: ids.clone(),
            theta_groups: variant.has_common_component().then_some(ids),
        }
    }

    pub fn clustered(
        variant: Variant,
        ab_groups: Vec<usize>,
        theta_groups: Option<Vec<usize>>,
    ) -> Result<Self> {
        let spec = Self {
            variant,
            parameterization: Parameterization::Clustered,
            ab_groups,
            theta_groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks group-map invariants.
    pub fn validate(&self) -> Result<()> {
        check_groups("ab_groups", &self.ab_groups)?;
        match (&self.theta_groups, self.variant) {
            (Some(_), Variant::Vmem) => {
                return Err(Error::InvalidInput(
                    "vMEM specification cannot carry loading groups".into(),
                ))
            }
            (None, Variant::VmemSec) => {
                return Err(Error::InvalidInput(
                    "vMEM-SeC specification needs loading groups".into(),
                ))
            }
            (Some(th), Variant::VmemSec) => {
                check_groups("theta_groups", th)?;
                if th.len() != self.ab_groups.len() {
                    return Err(Error::Dimension(format!(
                        "ab_groups covers {} series, theta_groups {}",
                        self.ab_groups.len(),
                        th.len()
                    )));
                }
            }
            (None, Variant::Vmem) => {}
        }
        if self.parameterization == Parameterization::Scalar && self.k1() != 1 {
            return Err(Error::InvalidInput(
                "scalar parameterization must have a single (alpha, beta) group".into(),
            ));
        }
        Ok(())
    }

    pub fn n_series(&self) -> usize {
        self.ab_groups.len()
    }

    /// Number of `(α, β)` groups.
    pub fn k1(&self) -> usize {
        self.ab_groups.iter().copied().max().unwrap_or(0)
    }

    /// Number of loading groups (zero for vMEM).
    pub fn k2(&self) -> usize {
        self.theta_groups
            .as_ref()
            .map_or(0, |g| g.iter().copied().max().unwrap_or(0))
    }

    /// Short label such as `c-vMEM-SeC`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.parameterization.prefix(), self.variant)
    }

    /// Number of free dynamic coefficients estimated (V is concentrated out).
    pub fn n_free(&self) -> usize {
        count_parameters(self.variant, self.k1(), self.k2().max(1))
    }

    /// Names of the free coefficients in estimation order.
    pub fn parameter_names(&self) -> Vec<String> {
        let k1 = self.k1();
        let mut names = Vec::with_capacity(self.n_free());
        names.extend((1..=k1).map(|g| format!("alpha_{g}")));
        names.extend((1..=k1).map(|g| format!("beta_{g}")));
        if self.variant.has_common_component() {
            names.extend((1..self.k2()).map(|g| format!("theta_{g}")));
            names.push("delta".into());
            names.push("phi".into());
        }
        names
    }
}

fn check_groups(name: &str, groups: &[usize]) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::InvalidInput(format!("{name} is empty")));
    }
    let k = *groups.iter().max().unwrap_or(&0);
    let mut used = vec![false; k + 1];
    for &g in groups {
        if g == 0 {
            return Err(Error::InvalidInput(format!("{name}: group ids start at 1")));
        }
        used[g] = true;
    }
    if let Some(missing) = (1..=k).find(|&g| !used[g]) {
        return Err(Error::InvalidInput(format!(
            "{name}: group ids not contiguous (missing {missing})"
        )));
    }
    Ok(())
}

/// Free dynamic coefficients of a model with `k1` `(α, β)` groups and `k2`
/// loading groups.
///
/// vMEM-SeC: `2(k₁ + 1) + (k₂ − 1)`; a scalar vMEM-SeC (`k₁ = k₂ = 1`) has 4,
/// a diagonal one `3n + 1`. vMEM: `2k₁`. `k2` is ignored for vMEM.
///
/// ```
/// use vmemsec::model::{count_parameters, Variant};
/// assert_eq!(count_parameters(Variant::VmemSec, 4, 4), 13);
/// assert_eq!(count_parameters(Variant::Vmem, 1, 0), 2);
/// ```
pub fn count_parameters(variant: Variant, k1: usize, k2: usize) -> usize {
    match variant {
        Variant::Vmem => 2 * k1,
        Variant::VmemSec => 2 * (k1 + 1) + k2.max(1) - 1,
    }
}

/// Unknowns of the fully parameterized vMEM-SeC including every element of
/// `V`: `n(n + 7)/2 + 1`.
pub fn full_parameter_count(n: usize) -> usize {
    n * (n + 7) / 2 + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(full_parameter_count(10), 86);
        assert_eq!(count_parameters(Variant::VmemSec, 4, 4), 13);
        assert_eq!(count_parameters(Variant::Vmem, 1, 0), 2);
        assert_eq!(ModelSpec::scalar(Variant::VmemSec, 29).n_free(), 4);
        assert_eq!(ModelSpec::diagonal(Variant::Vmem, 29).n_free(), 58);
        assert_eq!(ModelSpec::diagonal(Variant::VmemSec, 29).n_free(), 88);
        // full model minus the covariance elements equals the diagonal count
        let n = 10;
        assert_eq!(
            full_parameter_count(n) - n * (n + 1) / 2,
            ModelSpec::diagonal(Variant::VmemSec, n).n_free()
        );
    }

    #[test]
    fn names_follow_layout() {
        let s = ModelSpec::clustered(Variant::VmemSec, vec![1, 2, 1], Some(vec![1, 1, 2])).unwrap();
        assert_eq!(
            s.parameter_names(),
            ["alpha_1", "alpha_2", "beta_1", "beta_2", "theta_1", "delta", "phi"]
        );
        assert_eq!(s.label(), "c-vMEM-SeC");
    }

    #[test]
    fn group_validation() {
        assert!(ModelSpec::clustered(Variant::Vmem, vec![1, 3], None).is_err());
        assert!(ModelSpec::clustered(Variant::Vmem, vec![0, 1], None).is_err());
        assert!(ModelSpec::clustered(Variant::Vmem, vec![1, 2], Some(vec![1, 1])).is_err());
        assert!(ModelSpec::clustered(Variant::VmemSec, vec![1, 2], None).is_err());
        assert!(ModelSpec::clustered(Variant::VmemSec, vec![1, 2], Some(vec![1])).is_err());
        assert!(ModelSpec::scalar(Variant::VmemSec, 3).validate().is_ok());
    }
}
