//! The full ingest → factor → cluster → fit → evaluate → report run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;

use vmemsec::cluster::{clustering_pipeline, ClusteringOutcome};
use vmemsec::estimate::{fit, FitResult};
use vmemsec::evaluate::{compute_loss, forecast_one_step, model_confidence_set, Loss, LossSeries, McsResult, Window};
use vmemsec::factor::{first_principal_component, PcFactor};
use vmemsec::io::{save_json, write_dendrogram_csv, write_factor_csv, write_partition_csv, SpecDocument};
use vmemsec::model::{filter, ModelSpec, Parameterization, Variant};
use vmemsec::panel::{load_panel_csv, save_panel_csv, VolatilityPanel};

use crate::artifacts::{self, FitFile, Manifest};
use crate::config::{ModelChoice, RunConfig};

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub model: String,
    pub n_free: usize,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    /// `(window, loss) → (mean loss, MCS membership)`.
    pub losses: BTreeMap<(String, String), (f64, Option<bool>)>,
}

#[derive(Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub summary: PathBuf,
    pub manifest: PathBuf,
    pub rows: Vec<SummaryRow>,
}

struct Run<'a> {
    config: &'a RunConfig,
    root: PathBuf,
    manifest: Manifest,
}

impl Run<'_> {
    fn path(&mut self, rel: impl AsRef<Path>) -> PathBuf {
        let p = self.root.join(rel);
        self.manifest.record(&self.root.clone(), &p);
        p
    }

    fn done(&mut self, stage: &str) {
        log::info!("stage {stage} finished");
        self.manifest.stages.push(stage.to_string());
    }
}

/// Runs every stage, writing artifacts under `config.output_dir`.
///
/// On failure the error names the stage, and `manifest.json` still lists
/// whatever was written before it.
pub fn run_pipeline(config: &RunConfig) -> anyhow::Result<RunReport> {
    config.validate().context("stage `config`")?;
    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    let mut run = Run {
        config,
        root: config.output_dir.clone(),
        manifest: Manifest::default(),
    };
    let result = stages(&mut run);
    run.manifest.status = match &result {
        Ok(_) => "ok".into(),
        Err(e) => format!("failed: {e:#}"),
    };
    let manifest = run.root.join("manifest.json");
    save_json(&run.manifest, &manifest)?;
    let rows = result?;
    Ok(RunReport {
        output_dir: run.root.clone(),
        summary: run.root.join("summary.csv"),
        manifest,
        rows,
    })
}

/// Panels and factors for the full sample and, with a split date, for the
/// pre-split estimation window.
struct Data {
    full: VolatilityPanel,
    split: Option<VolatilityPanel>,
    factor_full: Option<PcFactor>,
    factor_split: Option<PcFactor>,
}

fn stages(run: &mut Run<'_>) -> anyhow::Result<Vec<SummaryRow>> {
    let data = ingest_and_factor(run)?;
    let clusters = cluster(run, &data).context("stage `cluster`")?;
    run.done("cluster");
    let fits = fit_models(run, &data, &clusters).context("stage `fit`")?;
    run.done("fit");
    plot_data(run, &data, &fits).context("stage `forecast`")?;
    run.done("forecast");
    let rows = evaluate(run, &data, &fits).context("stage `evaluate`")?;
    run.done("evaluate");
    write_summary(run, &rows).context("stage `report`")?;
    run.done("report");
    Ok(rows)
}

fn ingest_and_factor(run: &mut Run<'_>) -> anyhow::Result<Data> {
    let input = &run.config.input;
    let panel = load_panel_csv(&input.path, input.format, input.split_date)
        .with_context(|| format!("stage `ingest`: reading {}", input.path.display()))?;
    let full = panel.without_split();
    let split = match input.split_date {
        Some(_) if panel.has_holdout() => Some(panel),
        Some(d) => return Err(anyhow!("stage `ingest`: split date {d} leaves no out-of-sample rows")),
        None => None,
    };
    let out = run.path("panel.csv");
    save_panel_csv(&full, &out).context("stage `ingest`")?;
    run.done("ingest");

    let needs_factor = run.config.models.iter().any(|m| m.variant == Variant::VmemSec);
    let (factor_full, factor_split) = if needs_factor {
        let f = first_principal_component(&full).context("stage `factor`")?;
        let scores = run.path("factor.csv");
        let loadings = run.path("factor_loadings.csv");
        write_factor_csv(&full, &f, scores, loadings).context("stage `factor`")?;
        let fs = split
            .as_ref()
            .map(first_principal_component)
            .transpose()
            .context("stage `factor` (estimation window)")?;
        (Some(f), fs)
    } else {
        (None, None)
    };
    run.done("factor");
    Ok(Data {
        full,
        split,
        factor_full,
        factor_split,
    })
}

/// Clustered specs for the full sample and, with a split, for the
/// estimation window.
struct Clusters {
    full: BTreeMap<String, ClusteringOutcome>,
    split: BTreeMap<String, ClusteringOutcome>,
}

fn cluster(run: &mut Run<'_>, data: &Data) -> anyhow::Result<Clusters> {
    let mut variants: Vec<Variant> = run
        .config
        .models
        .iter()
        .filter(|m| m.parameterization == Parameterization::Clustered)
        .map(|m| m.variant)
        .collect();
    variants.dedup();
    let mut full = BTreeMap::new();
    let mut split = BTreeMap::new();
    for variant in variants {
        let outcome = cluster_window(run, &data.full, data.factor_full.as_ref(), variant, "")?;
        full.insert(variant.to_string(), outcome);
        if let Some(panel) = &data.split {
            let outcome = cluster_window(run, panel, data.factor_split.as_ref(), variant, "_oos")?;
            split.insert(variant.to_string(), outcome);
        }
    }
    if !full.is_empty() {
        let p = run.path("cluster_map.csv");
        let mut w = artifacts::writer(&p)?;
        let mut header = vec!["ticker".to_string()];
        for (variant, o) in &full {
            header.push(format!("{variant}_ab"));
            if o.theta_partition.is_some() {
                header.push(format!("{variant}_theta"));
            }
        }
        w.write_record(&header)?;
        for (i, ticker) in data.full.tickers().iter().enumerate() {
            let mut row = vec![ticker.clone()];
            for o in full.values() {
                row.push(o.ab_partition.assignment[i].to_string());
                if let Some(t) = &o.theta_partition {
                    row.push(t.assignment[i].to_string());
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(Clusters { full, split })
}

fn cluster_window(
    run: &mut Run<'_>,
    panel: &VolatilityPanel,
    factor: Option<&PcFactor>,
    variant: Variant,
    suffix: &str,
) -> anyhow::Result<ClusteringOutcome> {
    let options = run.config.cluster_options();
    let window = if suffix.is_empty() { "the full sample" } else { "the estimation window" };
    let outcome = clustering_pipeline(panel, factor, variant, &options)
        .with_context(|| format!("clustering c-{variant} on {window}"))?;
    let stem = format!("clusters/c-{variant}{suffix}");
    let spec_doc = SpecDocument::new(panel.tickers().to_vec(), outcome.spec.clone())?;
    let p = run.path(format!("{stem}_spec.json"));
    std::fs::create_dir_all(p.parent().expect("nested path"))?;
    save_json(&spec_doc, p)?;
    let p = run.path(format!("{stem}_partition.csv"));
    write_partition_csv(&outcome.ab_partition, outcome.theta_partition.as_ref(), p)?;
    let p = run.path(format!("{stem}_ab_dendrogram.csv"));
    write_dendrogram_csv(&outcome.ab_dendrogram, p)?;
    if let Some(d) = &outcome.theta_dendrogram {
        let p = run.path(format!("{stem}_theta_dendrogram.csv"));
        write_dendrogram_csv(d, p)?;
    }
    Ok(outcome)
}

struct ModelFits {
    choice: ModelChoice,
    full: FitResult,
    split: Option<FitResult>,
}

fn fit_models(
    run: &mut Run<'_>,
    data: &Data,
    clusters: &Clusters,
) -> anyhow::Result<Vec<ModelFits>> {
    let options = run.config.fit_options();
    let n = data.full.n_series();
    let spec_for = |m: ModelChoice, window: &BTreeMap<String, ClusteringOutcome>| match m.fixed_spec(n) {
        Some(s) => s,
        None => window[&m.variant.to_string()].spec.clone(),
    };
    let specs: Vec<(ModelChoice, ModelSpec, Option<ModelSpec>)> = run
        .config
        .models
        .iter()
        .map(|&m| {
            let split = data.split.as_ref().map(|_| spec_for(m, &clusters.split));
            (m, spec_for(m, &clusters.full), split)
        })
        .collect();
    let fits: Vec<anyhow::Result<ModelFits>> = specs
        .par_iter()
        .map(|(m, spec, split_spec)| {
            let sec = m.variant == Variant::VmemSec;
            let full = fit(&data.full, data.factor_full.as_ref().filter(|_| sec), spec, &options)
                .with_context(|| format!("{m} on the full sample"))?;
            let split = data
                .split
                .as_ref()
                .zip(split_spec.as_ref())
                .map(|(p, s)| fit(p, data.factor_split.as_ref().filter(|_| sec), s, &options))
                .transpose()
                .with_context(|| format!("{m} on the estimation window"))?;
            Ok(ModelFits { choice: *m, full, split })
        })
        .collect();
    let fits = fits.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    for f in &fits {
        let p = run.path(format!("fits/{}.json", f.choice));
        std::fs::create_dir_all(p.parent().expect("nested path"))?;
        save_json(&FitFile::new(&data.full, f.full.clone()), p)?;
        if let (Some(s), Some(panel)) = (&f.split, &data.split) {
            let p = run.path(format!("fits/{}_oos.json", f.choice));
            save_json(&FitFile::new(panel, s.clone()), p)?;
        }
    }
    Ok(fits)
}

fn plot_data(run: &mut Run<'_>, data: &Data, fits: &[ModelFits]) -> anyhow::Result<()> {
    for f in fits {
        let out = filter(&data.full, &f.full.spec, &f.full.params)?;
        let p = run.path(format!("plots/{}_fitted.csv", f.choice));
        artifacts::write_fitted(&data.full, &out, 0..data.full.len(), &p)?;
        if f.choice.variant == Variant::VmemSec {
            let p = run.path(format!("plots/{}_common.csv", f.choice));
            artifacts::write_common(&data.full, &out, &p)?;
            let p = run.path(format!("plots/{}_decomposition.csv", f.choice));
            artifacts::write_decomposition(&data.full, &out, &p)?;
        }
        if let (Some(s), Some(panel)) = (&f.split, &data.split) {
            let out = filter(panel, &s.spec, &s.params)?;
            let p = run.path(format!("plots/{}_forecast_oos.csv", f.choice));
            artifacts::write_fitted(panel, &out, panel.split_index()..panel.len(), &p)?;
        }
    }
    Ok(())
}

/// Loss series of `result` over `window` of `panel`.
pub fn losses_for(
    panel: &VolatilityPanel,
    result: &FitResult,
    window: Window,
    losses: &[Loss],
) -> anyhow::Result<Vec<LossSeries>> {
    let (start, end) = window.range(panel)?;
    let mu = forecast_one_step(panel, &result.spec, &result.params, window)?;
    let y = panel.y().rows(start, end - start).into_owned();
    losses
        .iter()
        .map(|&l| Ok(compute_loss(l, &y, &mu)?.labeled(result.label(), window)))
        .collect()
}

/// MCS membership of each model for one window and loss.
pub fn mcs_membership(series: &[LossSeries], run_mcs: bool, config: &RunConfig) -> anyhow::Result<Option<McsResult>> {
    if !run_mcs || series.len() < 2 {
        return Ok(None);
    }
    Ok(Some(model_confidence_set(series, &config.mcs_options())?))
}

fn evaluate(run: &mut Run<'_>, data: &Data, fits: &[ModelFits]) -> anyhow::Result<Vec<SummaryRow>> {
    let losses = run.config.evaluation.losses.clone();
    let mut windows: Vec<(String, Vec<LossSeries>)> = Vec::new();
    let is: Vec<Vec<LossSeries>> = fits
        .iter()
        .map(|f| losses_for(&data.full, &f.full, Window::InSample, &losses))
        .collect::<anyhow::Result<_>>()?;
    windows.push(("is".into(), is.into_iter().flatten().collect()));
    if let Some(panel) = &data.split {
        let oos: Vec<Vec<LossSeries>> = fits
            .iter()
            .map(|f| losses_for(panel, f.split.as_ref().expect("split fit"), Window::OutOfSample, &losses))
            .collect::<anyhow::Result<_>>()?;
        windows.push(("oos".into(), oos.into_iter().flatten().collect()));
    }

    let mut rows: Vec<SummaryRow> = fits
        .iter()
        .map(|f| SummaryRow {
            model: f.choice.to_string(),
            n_free: f.full.n_free,
            loglik: f.full.loglik,
            aic: f.full.aic,
            bic: f.full.bic,
            losses: BTreeMap::new(),
        })
        .collect();

    let mcs_path = run.path("mcs.csv");
    let mut mcs_w = artifacts::writer(&mcs_path)?;
    mcs_w.write_record(["window", "loss", "model", "p_value", "in_set"])?;
    for (window, series) in &windows {
        for &loss in &losses {
            let subset: Vec<LossSeries> = series.iter().filter(|s| s.loss == loss).cloned().collect();
            let mcs = mcs_membership(&subset, run.config.evaluation.mcs, run.config)?;
            for (row, s) in rows.iter_mut().zip(&subset) {
                let member = mcs.as_ref().map(|m| m.contains(&s.model));
                row.losses.insert((window.clone(), loss.to_string().to_lowercase()), (s.aggregate, member));
            }
            if let Some(m) = &mcs {
                for (model, p) in &m.p_values {
                    mcs_w.write_record([
                        window.clone(),
                        loss.to_string(),
                        model.clone(),
                        p.to_string(),
                        u8::from(m.contains(model)).to_string(),
                    ])?;
                }
            }
        }
        // per-period cross-asset mean losses
        for (f, chunk) in fits.iter().zip(series.chunks(losses.len())) {
            let p = run.path(format!("losses/{}_{window}.csv", f.choice));
            let panel = if window == "is" { &data.full } else { data.split.as_ref().expect("split panel") };
            let win = if window == "is" { Window::InSample } else { Window::OutOfSample };
            let (start, _) = win.range(panel)?;
            let mut w = artifacts::writer(&p)?;
            let mut header = vec!["date".to_string()];
            header.extend(losses.iter().map(|l| l.to_string().to_lowercase()));
            w.write_record(&header)?;
            let means: Vec<Vec<f64>> = chunk.iter().map(LossSeries::period_means).collect();
            for t in 0..means[0].len() {
                let mut rec = vec![panel.dates()[start + t].to_string()];
                rec.extend(means.iter().map(|m| m[t].to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
    }
    mcs_w.flush()?;
    Ok(rows)
}

/// Table-3-style summary: likelihood criteria, then mean losses per window
/// with MCS membership flags.
pub fn summary_header(rows: &[SummaryRow]) -> Vec<String> {
    let mut h: Vec<String> = ["model", "n_free", "loglik", "aic", "bic"].map(String::from).to_vec();
    if let Some(r) = rows.first() {
        for (window, loss) in r.losses.keys() {
            let name = format!("{loss}_{window}");
            h.push(name.clone());
            h.push(format!("mcs_{name}"));
        }
    }
    h
}

fn write_summary(run: &mut Run<'_>, rows: &[SummaryRow]) -> anyhow::Result<()> {
    let p = run.path("summary.csv");
    let mut w = artifacts::writer(&p)?;
    w.write_record(summary_header(rows))?;
    for r in rows {
        let mut rec = vec![
            r.model.clone(),
            r.n_free.to_string(),
            r.loglik.to_string(),
            r.aic.to_string(),
            r.bic.to_string(),
        ];
        for (value, member) in r.losses.values() {
            rec.push(value.to_string());
            rec.push(member.map(|m| u8::from(m).to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
