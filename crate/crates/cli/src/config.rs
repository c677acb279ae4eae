use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use vmemsec::cluster::{ClusterOptions, DEFAULT_NOISE_MULTIPLIER};
use vmemsec::estimate::FitOptions;
use vmemsec::evaluate::{Loss, McsOptions};
use vmemsec::model::{ModelSpec, Parameterization, Variant};
use vmemsec::panel::CsvFormat;

/// A model family and parameterization, written like `c-vMEM-SeC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelChoice {
    pub variant: Variant,
    pub parameterization: Parameterization,
}

impl ModelChoice {
    /// The scalar or diagonal spec over `n` series; `None` for clustered
    /// models, whose groups come from the clustering stage.
    pub fn fixed_spec(self, n: usize) -> Option<ModelSpec> {
        match self.parameterization {
            Parameterization::Scalar => Some(ModelSpec::scalar(self.variant, n)),
            Parameterization::Diagonal => Some(ModelSpec::diagonal(self.variant, n)),
            Parameterization::Clustered => None,
        }
    }
}

impl FromStr for ModelChoice {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let Some((prefix, variant)) = s.split_once('-') else {
            bail!("model `{s}` should look like s-vMEM or c-vMEM-SeC");
        };
        Ok(Self {
            parameterization: prefix.parse()?,
            variant: variant.parse()?,
        })
    }
}

impl TryFrom<String> for ModelChoice {
    type Error = anyhow::Error;

    fn try_from(s: String) -> anyhow::Result<Self> {
        s.parse()
    }
}

impl From<ModelChoice> for String {
    fn from(m: ModelChoice) -> String {
        m.to_string()
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.parameterization.prefix(), self.variant)
    }
}

/// The six models compared in a full run.
pub const ALL_MODELS: [&str; 6] = ["s-vMEM", "d-vMEM", "c-vMEM", "s-vMEM-SeC", "d-vMEM-SeC", "c-vMEM-SeC"];

fn all_models() -> Vec<ModelChoice> {
    ALL_MODELS.iter().map(|m| m.parse().expect("valid label")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: CsvFormat,
    /// First out-of-sample date; without it only in-sample results are
    /// produced.
    #[serde(default)]
    pub split_date: Option<NaiveDate>,
}

fn default_format() -> CsvFormat {
    CsvFormat::Long
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub ab_k: Option<usize>,
    pub theta_k: Option<usize>,
    pub noise_multiplier: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            ab_k: None,
            theta_k: None,
            noise_multiplier: DEFAULT_NOISE_MULTIPLIER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub losses: Vec<Loss>,
    pub mcs: bool,
    pub mcs_alpha: f64,
    pub n_bootstrap: usize,
    pub block_length: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let mcs = McsOptions::default();
        Self {
            losses: vec![Loss::Mse, Loss::Qlike],
            mcs: true,
            mcs_alpha: mcs.alpha,
            n_bootstrap: mcs.n_bootstrap,
            block_length: mcs.block_length,
        }
    }
}

/// Configuration of a full pipeline run, read from TOML.
///
/// ```toml
/// output_dir = "out"
/// seed = 7
/// models = ["s-vMEM", "c-vMEM-SeC"]
///
/// [input]
/// path = "prices.csv"
/// format = "long"
/// split_date = "2023-01-02"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    pub output_dir: PathBuf,
    #[serde(default = "all_models")]
    pub models: Vec<ModelChoice>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    /// Reads a config file; relative paths are taken from the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.input.path.is_relative() {
            config.input.path = base.join(&config.input.path);
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !self.input.path.exists() {
            bail!("input file {} does not exist", self.input.path.display());
        }
        if self.models.is_empty() {
            bail!("model list is empty");
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].contains(m) {
                bail!("model {m} is listed twice");
            }
        }
        if self.evaluation.losses.is_empty() {
            bail!("no loss functions selected");
        }
        self.fit_options().validate()?;
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            seed: self.seed,
            ..self.fit.clone()
        }
    }

    pub fn cluster_options(&self) -> ClusterOptions {
        ClusterOptions {
            fit: self.fit_options(),
            ab_k: self.cluster.ab_k,
            theta_k: self.cluster.theta_k,
            noise_multiplier: self.cluster.noise_multiplier,
        }
    }

    pub fn mcs_options(&self) -> McsOptions {
        McsOptions {
            alpha: self.evaluation.mcs_alpha,
            n_bootstrap: self.evaluation.n_bootstrap,
            block_length: self.evaluation.block_length,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for m in ALL_MODELS {
            assert_eq!(m.parse::<ModelChoice>().unwrap().to_string(), m);
        }
        assert!("x-vMEM".parse::<ModelChoice>().is_err());
        assert!("vMEM".parse::<ModelChoice>().is_err());
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c: RunConfig = toml::from_str("output_dir = \"o\"\n[input]\npath = \"p.csv\"\n").unwrap();
        assert_eq!(c.models.len(), 6);
        assert_eq!(c.input.format, CsvFormat::Long);
        assert_eq!(c.fit.outer_tolerance, 1e-4);
        assert_eq!(c.evaluation.n_bootstrap, 1000);
        assert!(toml::from_str::<RunConfig>("output_dir = \"o\"\nbogus = 1\n[input]\npath = \"p\"\n").is_err());
    }
}
