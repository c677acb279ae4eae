use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use vmemsec::cluster::{clustering_pipeline, ClusterOptions, DEFAULT_NOISE_MULTIPLIER};
use vmemsec::estimate::{fit, FitOptions};
use vmemsec::evaluate::{forecast_one_step, Loss, Window};
use vmemsec::factor::first_principal_component;
use vmemsec::io::{
    load_json, save_json, write_dendrogram_csv, write_factor_csv, write_filter_csv, write_partition_csv, SpecDocument,
};
use vmemsec::model::{filter, simulate, ModelSpec, ParamSet, Variant};
use vmemsec::panel::{load_panel_csv, save_panel_csv, CsvFormat, VolatilityPanel};

use crate::artifacts::{self, FitFile};
use crate::config::{ModelChoice, RunConfig};
use crate::pipeline::{losses_for, mcs_membership, run_pipeline};

#[derive(Debug, Parser)]
#[command(name = "vmemsec", version, about = "Vector MEM with spillovers and co-movement for volatility panels")]
pub struct Cli {
    /// Seed for multistarts, bootstraps and simulation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a volatility panel from price ranges.
    Ingest(IngestArgs),
    /// Extract the first principal component of the log panel.
    Factor(FactorArgs),
    /// Cluster series by dynamics and loadings into a model spec.
    Cluster(ClusterArgs),
    /// Estimate one model.
    Fit(FitArgs),
    /// One-step-ahead forecasts from a fitted model.
    Forecast(ForecastArgs),
    /// Losses, information criteria and the model confidence set.
    Evaluate(EvaluateArgs),
    /// Simulate a panel from known parameters.
    Simulate(SimulateArgs),
    /// Full pipeline from a TOML config.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct PanelArgs {
    /// Panel CSV.
    #[arg(long)]
    pub panel: PathBuf,
    /// `wide` (date plus one column per ticker) or `long` (date,ticker,high,low).
    #[arg(long, default_value = "wide")]
    pub format: CsvFormat,
    /// First out-of-sample date.
    #[arg(long)]
    pub split_date: Option<NaiveDate>,
}

impl PanelArgs {
    fn load(&self) -> anyhow::Result<VolatilityPanel> {
        self.load_with(self.split_date)
    }

    fn load_with(&self, split: Option<NaiveDate>) -> anyhow::Result<VolatilityPanel> {
        let panel = load_panel_csv(&self.panel, self.format, split)
            .with_context(|| format!("reading {}", self.panel.display()))?;
        if let Some(d) = split.filter(|_| !panel.has_holdout()) {
            bail!("split date {d} leaves no out-of-sample rows");
        }
        Ok(panel)
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "long")]
    pub format: CsvFormat,
    #[arg(long)]
    pub split_date: Option<NaiveDate>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FactorArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    /// Scores as `date,p`; loadings go to `<stem>_loadings.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[arg(long, default_value = "vMEM-SeC")]
    pub variant: Variant,
    /// Fixed number of (α, β) groups.
    #[arg(long)]
    pub ab_k: Option<usize>,
    /// Fixed number of loading groups.
    #[arg(long)]
    pub theta_k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_NOISE_MULTIPLIER)]
    pub noise_multiplier: f64,
    /// Spec JSON; partitions and dendrograms are written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    /// A label such as `s-vMEM` or `d-vMEM-SeC`, or a spec JSON from `cluster`.
    #[arg(long)]
    pub spec: String,
    /// TOML file with estimation options.
    #[arg(long)]
    pub options: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value = "oos")]
    pub window: Window,
    /// `date,ticker,observed,fitted`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of fit JSON files.
    #[arg(long)]
    pub fits: PathBuf,
    #[command(flatten)]
    pub panel: PanelArgs,
    #[arg(long, default_value = "oos")]
    pub window: Window,
    /// Also compute model confidence sets.
    #[arg(long)]
    pub mcs: bool,
    #[arg(long, default_value_t = 0.05)]
    pub mcs_alpha: f64,
    #[arg(long, default_value_t = 1000)]
    pub n_bootstrap: usize,
    #[arg(long, default_value_t = 20)]
    pub block_length: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Parameter JSON; without it a preset with two dynamic regimes is used.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value = "vMEM-SeC")]
    pub variant: Variant,
    /// Number of series for the preset.
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    /// Number of periods.
    #[arg(long, default_value_t = 2000)]
    pub t: usize,
    /// Wide panel CSV of the simulated levels.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the latent paths as `date,ticker,ln_mu,varsigma,xi`.
    #[arg(long)]
    pub latent: Option<PathBuf>,
    /// Also write the parameters used.
    #[arg(long)]
    pub params_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
}

/// `<stem><suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Ingest(a) => ingest(&a).context("stage `ingest`"),
        Command::Factor(a) => factor(&a).context("stage `factor`"),
        Command::Cluster(a) => cluster(&a, seed).context("stage `cluster`"),
        Command::Fit(a) => fit_cmd(&a, seed).context("stage `fit`"),
        Command::Forecast(a) => forecast(&a).context("stage `forecast`"),
        Command::Evaluate(a) => evaluate(&a, seed).context("stage `evaluate`"),
        Command::Simulate(a) => simulate_cmd(&a, seed).context("stage `simulate`"),
        Command::Run(a) => {
            let mut config = RunConfig::load(&a.config).context("stage `config`")?;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let report = run_pipeline(&config)?;
            println!("{}", report.summary.display());
            Ok(())
        }
    }
}

fn ingest(a: &IngestArgs) -> anyhow::Result<()> {
    let panel = load_panel_csv(&a.input, a.format, a.split_date)
        .with_context(|| format!("reading {}", a.input.display()))?;
    ensure_parent(&a.out)?;
    save_panel_csv(&panel, &a.out)?;
    log::info!(
        "{} dates × {} tickers, {} in-sample rows",
        panel.len(),
        panel.n_series(),
        panel.n_train()
    );
    Ok(())
}

fn factor(a: &FactorArgs) -> anyhow::Result<()> {
    let panel = a.panel.load()?;
    let f = first_principal_component(&panel)?;
    ensure_parent(&a.out)?;
    write_factor_csv(&panel, &f, &a.out, sibling(&a.out, "_loadings.csv"))?;
    log::info!("first component explains {:.1}% of variance", 100.0 * f.explained_share);
    Ok(())
}

fn cluster(a: &ClusterArgs, seed: u64) -> anyhow::Result<()> {
    let panel = a.panel.load()?;
    let factor = match a.variant {
        Variant::VmemSec => Some(first_principal_component(&panel)?),
        Variant::Vmem => None,
    };
    let options = ClusterOptions {
        fit: FitOptions { seed, ..Default::default() },
        ab_k: a.ab_k,
        theta_k: a.theta_k,
        noise_multiplier: a.noise_multiplier,
    };
    let out = clustering_pipeline(&panel, factor.as_ref(), a.variant, &options)?;
    ensure_parent(&a.out)?;
    save_json(&SpecDocument::new(panel.tickers().to_vec(), out.spec.clone())?, &a.out)?;
    write_partition_csv(&out.ab_partition, out.theta_partition.as_ref(), sibling(&a.out, "_partition.csv"))?;
    write_dendrogram_csv(&out.ab_dendrogram, sibling(&a.out, "_ab_dendrogram.csv"))?;
    if let Some(d) = &out.theta_dendrogram {
        write_dendrogram_csv(d, sibling(&a.out, "_theta_dendrogram.csv"))?;
    }
    log::info!("k1 = {}, k2 = {}", out.spec.k1(), out.spec.k2());
    Ok(())
}

/// A spec from a model label or a spec file.
fn resolve_spec(arg: &str, panel: &VolatilityPanel) -> anyhow::Result<ModelSpec> {
    if let Ok(choice) = arg.parse::<ModelChoice>() {
        if let Some(spec) = choice.fixed_spec(panel.n_series()) {
            return Ok(spec);
        }
        bail!("{choice} needs group assignments; pass the spec file written by `cluster`");
    }
    let doc: SpecDocument = load_json(arg).with_context(|| format!("reading spec {arg}"))?;
    Ok(doc.spec_for(panel.tickers())?)
}

fn fit_cmd(a: &FitArgs, seed: u64) -> anyhow::Result<()> {
    let panel = a.panel.load()?;
    let spec = resolve_spec(&a.spec, &panel)?;
    let mut options: FitOptions = match &a.options {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => FitOptions::default(),
    };
    options.seed = seed;
    let factor = match spec.variant {
        Variant::VmemSec => Some(first_principal_component(&panel)?),
        Variant::Vmem => None,
    };
    let result = fit(&panel, factor.as_ref(), &spec, &options)?;
    log::info!("{}: loglik {:.4}, AIC {:.4}, BIC {:.4}", result.label(), result.loglik, result.aic, result.bic);
    ensure_parent(&a.out)?;
    save_json(&FitFile::new(&panel, result), &a.out)?;
    Ok(())
}

fn load_fit(path: &Path) -> anyhow::Result<FitFile> {
    load_json(path).with_context(|| format!("reading fit {}", path.display()))
}

fn forecast(a: &ForecastArgs) -> anyhow::Result<()> {
    let fit = load_fit(&a.fit)?;
    let panel = a.panel.load_with(a.panel.split_date.or(fit.split_date))?;
    fit.check_panel(&panel)?;
    let (start, end) = a.window.range(&panel)?;
    let mu = forecast_one_step(&panel, &fit.result.spec, &fit.result.params, a.window)?;
    let mut w = artifacts::writer(&a.out)?;
    w.write_record(["date", "ticker", "observed", "forecast"])?;
    for t in start..end {
        for (i, ticker) in panel.tickers().iter().enumerate() {
            w.write_record([
                panel.dates()[t].to_string(),
                ticker.clone(),
                panel.y()[(t, i)].to_string(),
                mu[(t - start, i)].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn evaluate(a: &EvaluateArgs, seed: u64) -> anyhow::Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.fits)
        .with_context(|| format!("listing {}", a.fits.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    if paths.is_empty() {
        bail!("no fit files in {}", a.fits.display());
    }
    let fits: Vec<FitFile> = paths.iter().map(|p| load_fit(p)).collect::<anyhow::Result<_>>()?;
    let split = a.panel.split_date.or_else(|| fits.iter().find_map(|f| f.split_date));
    let panel = a.panel.load_with(split)?;
    let losses = [Loss::Mse, Loss::Qlike];
    let mut series = Vec::new();
    for f in &fits {
        f.check_panel(&panel)?;
        series.push(losses_for(&panel, &f.result, a.window, &losses)?);
    }
    let config_stub = RunConfig {
        input: crate::config::InputConfig {
            path: a.panel.panel.clone(),
            format: a.panel.format,
            split_date: split,
        },
        output_dir: PathBuf::new(),
        models: Vec::new(),
        seed,
        fit: FitOptions::default(),
        cluster: Default::default(),
        evaluation: crate::config::EvaluationConfig {
            mcs: a.mcs,
            mcs_alpha: a.mcs_alpha,
            n_bootstrap: a.n_bootstrap,
            block_length: a.block_length,
            ..Default::default()
        },
    };
    let mut membership = Vec::new();
    for (k, _) in losses.iter().enumerate() {
        let subset: Vec<_> = series.iter().map(|s| s[k].clone()).collect();
        membership.push(mcs_membership(&subset, a.mcs, &config_stub)?);
    }
    let mut w = artifacts::writer(&a.out)?;
    let mut header: Vec<String> = ["model", "window", "n_free", "loglik", "aic", "bic", "mse", "qlike"]
        .map(String::from)
        .to_vec();
    if a.mcs {
        header.extend(["mcs_mse", "mcs_qlike"].map(String::from));
    }
    w.write_record(&header)?;
    for (f, s) in fits.iter().zip(&series) {
        let r = &f.result;
        let mut rec = vec![
            r.label(),
            a.window.to_string(),
            r.n_free.to_string(),
            r.loglik.to_string(),
            r.aic.to_string(),
            r.bic.to_string(),
            s[0].aggregate.to_string(),
            s[1].aggregate.to_string(),
        ];
        if a.mcs {
            for m in &membership {
                rec.push(m.as_ref().map_or(String::new(), |m| u8::from(m.contains(&s[0].model)).to_string()));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Realistic daily-volatility parameters with two alternating `(α, β)` regimes and
/// alternating loadings.
pub fn preset_params(variant: Variant, n: usize) -> anyhow::Result<ParamSet> {
    if n < 2 {
        bail!("the preset needs at least 2 series");
    }
    let regimes = [(0.13, 0.80), (0.08, 0.86)];
    let alpha: Vec<f64> = (0..n).map(|i| regimes[i % 2].0).collect();
    let beta: Vec<f64> = (0..n).map(|i| regimes[i % 2].1).collect();
    let v = DMatrix::from_fn(n, n, |i, j| if i == j { 0.6 } else { 0.3 });
    let x_bar = vec![0.5; n];
    Ok(match variant {
        Variant::Vmem => ParamSet::vmem(alpha, beta, v, x_bar),
        Variant::VmemSec => {
            let mut theta: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.9 } else { 1.1 }).collect();
            let sum: f64 = theta.iter().sum();
            theta[n - 1] += n as f64 - sum;
            let c = vec![1.0 / (n as f64).sqrt(); n];
            ParamSet::vmem_sec(alpha, beta, theta, 0.075, 0.39, v, x_bar, c)
        }
    })
}

fn simulate_cmd(a: &SimulateArgs, seed: u64) -> anyhow::Result<()> {
    let params = match &a.params {
        Some(p) => load_json(p).with_context(|| format!("reading {}", p.display()))?,
        None => preset_params(a.variant, a.n)?,
    };
    let spec = ModelSpec::diagonal(params.variant(), params.n_series());
    let sim = simulate(&spec, &params, a.t, seed)?;
    ensure_parent(&a.out)?;
    save_panel_csv(&sim.panel, &a.out)?;
    if let Some(path) = &a.latent {
        ensure_parent(path)?;
        let out = filter(&sim.panel, &spec, &params)?;
        write_filter_csv(&sim.panel, &out, path)?;
    }
    if let Some(path) = &a.params_out {
        ensure_parent(path)?;
        save_json(&params, path)?;
    }
    Ok(())
}
