use std::path::Path;

use vmemsec::model::{simulate, ModelSpec, Variant};
use vmemsec::panel::save_panel_csv;
use vmemsec_cli::commands::preset_params;
use vmemsec_cli::config::ALL_MODELS;
use vmemsec_cli::{run_pipeline, RunConfig};

fn write_panel(dir: &Path, n: usize, t: usize, seed: u64) -> std::path::PathBuf {
    let params = preset_params(Variant::VmemSec, n).unwrap();
    let spec = ModelSpec::diagonal(Variant::VmemSec, n);
    let sim = simulate(&spec, &params, t, seed).unwrap();
    let path = dir.join("panel.csv");
    save_panel_csv(&sim.panel, &path).unwrap();
    path
}

fn config(dir: &Path, out: &str, models: &[&str], split: Option<&str>) -> RunConfig {
    let models = models.iter().map(|m| format!("{m:?}")).collect::<Vec<_>>().join(", ");
    let split = split.map_or(String::new(), |d| format!("split_date = \"{d}\"\n"));
    let text = format!(
        "output_dir = \"{out}\"\nmodels = [{models}]\nseed = 7\n\
         [evaluation]\nn_bootstrap = 200\n\
         [input]\npath = \"panel.csv\"\nformat = \"wide\"\n{split}"
    );
    let path = dir.join(format!("{out}.toml"));
    std::fs::write(&path, text).unwrap();
    RunConfig::load(&path).unwrap()
}

#[test]
fn six_model_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    write_panel(dir.path(), 4, 1500, 11);
    let report = run_pipeline(&config(dir.path(), "out", &ALL_MODELS, Some("2003-10-01"))).unwrap();

    assert_eq!(report.rows.len(), 6);
    for row in &report.rows {
        assert!(row.loglik.is_finite());
        assert!(row.aic.is_finite() && row.bic.is_finite());
        // both windows, both losses
        assert_eq!(row.losses.len(), 4, "{}", row.model);
        assert!(row.losses.values().all(|(v, member)| v.is_finite() && member.is_some()));
    }
    // the best model under each loss is never excluded
    for key in report.rows[0].losses.keys() {
        let best = report
            .rows
            .iter()
            .min_by(|a, b| a.losses[key].0.total_cmp(&b.losses[key].0))
            .unwrap();
        assert_eq!(best.losses[key].1, Some(true), "{key:?}");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report.manifest).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    let stages: Vec<&str> = manifest["stages"].as_array().unwrap().iter().map(|s| s.as_str().unwrap()).collect();
    assert_eq!(stages, ["ingest", "factor", "cluster", "fit", "forecast", "evaluate", "report"]);
    let files = manifest["files"].as_array().unwrap();
    for f in files {
        assert!(report.output_dir.join(f.as_str().unwrap()).is_file(), "{f}");
    }
    for expected in [
        "summary.csv",
        "mcs.csv",
        "fits/c-vMEM-SeC_oos.json",
        "clusters/c-vMEM-SeC_oos_spec.json",
        "plots/d-vMEM-SeC_common.csv",
    ] {
        assert!(files.iter().any(|f| f == expected), "{expected} missing from manifest");
    }

    let summary = std::fs::read_to_string(&report.summary).unwrap();
    let header = summary.lines().next().unwrap();
    assert_eq!(
        header,
        "model,n_free,loglik,aic,bic,mse_is,mcs_mse_is,qlike_is,mcs_qlike_is,mse_oos,mcs_mse_oos,qlike_oos,mcs_qlike_oos"
    );
    assert_eq!(summary.lines().count(), 7);
}

#[test]
fn same_seed_gives_identical_summaries() {
    let dir = tempfile::tempdir().unwrap();
    write_panel(dir.path(), 3, 1200, 5);
    let models = ["s-vMEM", "s-vMEM-SeC", "c-vMEM"];
    let a = run_pipeline(&config(dir.path(), "a", &models, Some("2003-01-02"))).unwrap();
    let b = run_pipeline(&config(dir.path(), "b", &models, Some("2003-01-02"))).unwrap();
    for file in ["summary.csv", "mcs.csv", "clusters/c-vMEM_spec.json", "plots/s-vMEM-SeC_forecast_oos.csv"] {
        let x = std::fs::read(a.output_dir.join(file)).unwrap();
        let y = std::fs::read(b.output_dir.join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
    // fit files match apart from the timing
    let fit = |dir: &Path| {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("fits/s-vMEM-SeC.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("wall_time_secs").expect("timing field");
        v
    };
    assert_eq!(fit(&a.output_dir), fit(&b.output_dir));
}

#[test]
fn in_sample_only_run_has_no_oos_columns() {
    let dir = tempfile::tempdir().unwrap();
    write_panel(dir.path(), 3, 800, 2);
    let report = run_pipeline(&config(dir.path(), "out", &["s-vMEM"], None)).unwrap();
    let summary = std::fs::read_to_string(&report.summary).unwrap();
    assert!(summary.starts_with("model,n_free,loglik,aic,bic,mse_is,mcs_mse_is,qlike_is,mcs_qlike_is\n"));
    assert!(!report.output_dir.join("fits/s-vMEM_oos.json").exists());
}

#[test]
fn failures_name_the_stage_and_still_write_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_panel(dir.path(), 3, 300, 3);
    let err = run_pipeline(&config(dir.path(), "out", &["s-vMEM"], Some("2030-01-01"))).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("stage `ingest`"), "{msg}");
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("\"failed: stage `ingest`"), "{manifest}");
}

#[test]
fn config_rejects_unknown_keys_and_models() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "output_dir = \"o\"\nmodel = [\"s-vMEM\"]\n[input]\npath = \"x.csv\"\n").unwrap();
    assert!(RunConfig::load(&p).is_err());
    std::fs::write(&p, "output_dir = \"o\"\nmodels = [\"q-vMEM\"]\n[input]\npath = \"x.csv\"\n").unwrap();
    assert!(RunConfig::load(&p).is_err());
}
