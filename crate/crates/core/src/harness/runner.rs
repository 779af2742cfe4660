//! File-driven entry points shared by the CLI and the Python bindings.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataio::{generate_dataset, Dataset, DatasetManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::experiments::{
    report, report_csv, robustness_csv, run_robustness, run_sweep, sweep_csv, SweepGrid,
};
use crate::harness::train::{train, TrainOptions, TrainOutcome};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const ROBUSTNESS_FILE: &str = "robustness.csv";

/// `dataset_path` may name a dataset directory or a manifest file; a
/// manifest is expanded in memory.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .dataset_path
        .as_ref()
        .ok_or_else(|| Error::config("missing required key `dataset_path`"))?;
    if path.is_dir() {
        Dataset::load(path)
    } else {
        generate_dataset(&DatasetManifest::load(path)?)
    }
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    if let Some(p) = &cfg.manifest_path {
        return DatasetManifest::load(p);
    }
    match &cfg.dataset_path {
        Some(p) if p.is_dir() => DatasetManifest::load(&p.join(MANIFEST_FILE)),
        Some(p) => DatasetManifest::load(p),
        None => Err(Error::config("missing required key `manifest_path` or `dataset_path`")),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&PathBuf> {
    cfg.out_dir
        .as_ref()
        .ok_or_else(|| Error::config("missing required key `out_dir`"))
}

/// Generates the dataset described by `manifest` into `out`.
pub fn gen_data(manifest: &Path, out: &Path) -> Result<Dataset> {
    let ds = generate_dataset(&DatasetManifest::load(manifest)?)?;
    ds.save(out)?;
    Ok(ds)
}

/// Trains from a config and writes metrics, privacy report and adapter to
/// `out_dir`.
pub fn train_from_config(cfg: &RunConfig) -> Result<(TrainOutcome, PathBuf)> {
    let tc = cfg.train_config()?;
    let out = out_dir(cfg)?.clone();
    let ds = load_dataset(cfg)?;
    let options = TrainOptions {
        checkpoint_dir: Some(out.clone()),
        ..TrainOptions::default()
    };
    let outcome = train(&tc, &ds, &options)?;
    outcome.write(&out, ds.num_tasks())?;
    Ok((outcome, out))
}

/// Runs the configured sweep; returns the CSV, also written to `out_dir`.
pub fn sweep_from_config(cfg: &RunConfig) -> Result<String> {
    let grid = SweepGrid::from_run_config(cfg)?;
    let out = out_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    let csv = sweep_csv(&run_sweep(&grid, &ds));
    fs::create_dir_all(out)?;
    fs::write(out.join(SWEEP_FILE), &csv)?;
    Ok(csv)
}

pub fn robustness_from_config(cfg: &RunConfig) -> Result<String> {
    let levels = cfg
        .robustness_levels
        .clone()
        .ok_or_else(|| Error::config("missing required key `robustness_levels`"))?;
    let out = out_dir(cfg)?;
    let manifest = load_manifest(cfg)?;
    let tc = cfg.train_config()?;
    let rows = run_robustness(&levels, &tc, &manifest, cfg.replicates.unwrap_or(1))?;
    let csv = robustness_csv(&rows);
    fs::create_dir_all(out)?;
    fs::write(out.join(ROBUSTNESS_FILE), &csv)?;
    Ok(csv)
}

pub fn report_dirs<P: AsRef<Path>>(dirs: &[P]) -> Result<String> {
    Ok(report_csv(&report(dirs)?))
}
