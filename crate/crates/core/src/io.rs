//! File formats for fitted models, filter paths and clustering artifacts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cluster::{Dendrogram, Partition};
use crate::error::{Error, Result};
use crate::factor::PcFactor;
use crate::model::{FilterOutput, ModelSpec};
use crate::panel::VolatilityPanel;

/// Pretty-printed JSON; floats keep their shortest round-trip form.
pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Long-format filter paths: `date,ticker,ln_mu,varsigma,xi`.
pub fn write_filter_csv(panel: &VolatilityPanel, out: &FilterOutput, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["date", "ticker", "ln_mu", "varsigma", "xi"])?;
    for (t, date) in panel.dates().iter().enumerate() {
        for (i, ticker) in panel.tickers().iter().enumerate() {
            w.write_record([
                date.to_string(),
                ticker.clone(),
                out.ln_mu[(t, i)].to_string(),
                out.varsigma[(t, i)].to_string(),
                out.xi[t].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Scores as `date,p` and loadings as `ticker,c`.
pub fn write_factor_csv(
    panel: &VolatilityPanel,
    factor: &PcFactor,
    scores_path: impl AsRef<Path>,
    loadings_path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = csv_writer(scores_path.as_ref())?;
    w.write_record(["date", "p"])?;
    for (t, date) in panel.dates().iter().enumerate() {
        w.write_record([date.to_string(), factor.scores[t].to_string()])?;
    }
    w.flush().map_err(|e| Error::io(scores_path.as_ref(), e))?;
    let mut w = csv_writer(loadings_path.as_ref())?;
    w.write_record(["ticker", "c"])?;
    for (ticker, c) in panel.tickers().iter().zip(factor.loadings.iter()) {
        w.write_record([ticker.clone(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(loadings_path.as_ref(), e))
}

/// Merge list: `step,left,right,height,size`.
pub fn write_dendrogram_csv(dendrogram: &Dendrogram, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["step", "left", "right", "height", "size"])?;
    for (s, m) in dendrogram.merges.iter().enumerate() {
        w.write_record([
            (s + 1).to_string(),
            m.left.to_string(),
            m.right.to_string(),
            m.height.to_string(),
            m.size.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// `ticker,ab_group,theta_group`; the last column is empty without loading
/// groups.
pub fn write_partition_csv(ab: &Partition, theta: Option<&Partition>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["ticker", "ab_group", "theta_group"])?;
    for (i, label) in ab.labels.iter().enumerate() {
        let th = theta
            .and_then(|p| p.group_of(label))
            .map(|g| g.to_string())
            .unwrap_or_default();
        w.write_record([label.clone(), ab.assignment[i].to_string(), th])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// A model specification with its group maps keyed by ticker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecDocument {
    pub tickers: Vec<String>,
    #[serde(flatten)]
    pub spec: ModelSpec,
}

impl SpecDocument {
    pub fn new(tickers: Vec<String>, spec: ModelSpec) -> Result<Self> {
        if tickers.len() != spec.n_series() {
            return Err(Error::Dimension(format!(
                "{} tickers for a spec over {} series",
                tickers.len(),
                spec.n_series()
            )));
        }
        Ok(Self { tickers, spec })
    }

    /// The spec reordered to follow `tickers`.
    pub fn spec_for(&self, tickers: &[String]) -> Result<ModelSpec> {
        let idx: Vec<usize> = tickers
            .iter()
            .map(|t| {
                self.tickers
                    .iter()
                    .position(|s| s == t)
                    .ok_or_else(|| Error::InvalidInput(format!("spec has no group for ticker {t}")))
            })
            .collect::<Result<_>>()?;
        if idx.len() != self.tickers.len() {
            return Err(Error::Dimension("spec and panel cover different tickers".into()));
        }
        let mut spec = self.spec.clone();
        spec.ab_groups = idx.iter().map(|&i| self.spec.ab_groups[i]).collect();
        spec.theta_groups = self
            .spec
            .theta_groups
            .as_ref()
            .map(|g| idx.iter().map(|&i| g[i]).collect());
        spec.validate()?;
        Ok(spec)
    }
}
