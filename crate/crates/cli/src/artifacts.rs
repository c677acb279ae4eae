//! Output files of the CLI: fit files, plot data, loss reports and the run
//! manifest.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use vmemsec::estimate::FitResult;
use vmemsec::model::FilterOutput;
use vmemsec::panel::VolatilityPanel;

/// A fitted model together with the panel layout it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub tickers: Vec<String>,
    /// First out-of-sample date of the estimation panel, if any.
    pub split_date: Option<NaiveDate>,
    #[serde(flatten)]
    pub result: FitResult,
}

impl FitFile {
    pub fn new(panel: &VolatilityPanel, result: FitResult) -> Self {
        Self {
            tickers: panel.tickers().to_vec(),
            split_date: split_date(panel),
            result,
        }
    }

    /// Fails unless `panel` has the tickers this model was fitted on, in the
    /// same order.
    pub fn check_panel(&self, panel: &VolatilityPanel) -> anyhow::Result<()> {
        if panel.tickers() != self.tickers.as_slice() {
            anyhow::bail!(
                "{} was fitted on tickers {:?}, panel has {:?}",
                self.result.label(),
                self.tickers,
                panel.tickers()
            );
        }
        Ok(())
    }
}

pub fn split_date(panel: &VolatilityPanel) -> Option<NaiveDate> {
    panel.has_holdout().then(|| panel.dates()[panel.split_index()])
}

pub(crate) fn writer(path: &Path) -> anyhow::Result<csv::Writer<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(csv::Writer::from_writer(file))
}

/// `date,ticker,observed,fitted` with `fitted = exp(ln μ)`.
pub fn write_fitted(panel: &VolatilityPanel, out: &FilterOutput, rows: std::ops::Range<usize>, path: &Path) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["date", "ticker", "observed", "fitted"])?;
    for t in rows {
        for (i, ticker) in panel.tickers().iter().enumerate() {
            w.write_record([
                panel.dates()[t].to_string(),
                ticker.clone(),
                panel.y()[(t, i)].to_string(),
                out.ln_mu[(t, i)].exp().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `date,exp_xi`: the common component on the level scale.
pub fn write_common(panel: &VolatilityPanel, out: &FilterOutput, path: &Path) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["date", "exp_xi"])?;
    for (t, date) in panel.dates().iter().enumerate() {
        w.write_record([date.to_string(), out.xi[t].exp().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `date,ticker,idiosyncratic,total`: `exp(ς)` against `μ`.
pub fn write_decomposition(panel: &VolatilityPanel, out: &FilterOutput, path: &Path) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["date", "ticker", "idiosyncratic", "total"])?;
    for (t, date) in panel.dates().iter().enumerate() {
        for (i, ticker) in panel.tickers().iter().enumerate() {
            w.write_record([
                date.to_string(),
                ticker.clone(),
                out.varsigma[(t, i)].exp().to_string(),
                out.ln_mu[(t, i)].exp().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Files written by a run, relative to the output directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    pub stages: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl Manifest {
    pub fn record(&mut self, root: &Path, path: &Path) {
        let rel = path.strip_prefix(root).unwrap_or(path).to_path_buf();
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
    }
}
