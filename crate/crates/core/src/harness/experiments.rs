//! Learning-rate × batch-size sweeps, label-corruption robustness runs,
//! privacy audits and run summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::accountant::{default_orders, effective_sigma, to_eps_delta, PrivacyReport, RdpLedger};
use crate::dataio::{generate_dataset, Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::harness::config::{RunConfig, TrainConfig};
use crate::harness::train::{train, TrainOptions, METRICS_FILE};
use crate::rng::{derive_seed, Domain};

/// Seed of replicate `r`; replicate 0 reuses the base seed.
pub fn replicate_seed(base: u64, replicate: usize) -> u64 {
    if replicate == 0 {
        base
    } else {
        derive_seed(base, Domain::Replicate, replicate as u64)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub base: TrainConfig,
    pub replicates: usize,
}

impl SweepGrid {
    pub fn new(
        mut learning_rates: Vec<f64>,
        mut batch_sizes: Vec<usize>,
        base: TrainConfig,
        replicates: usize,
    ) -> Result<Self> {
        if learning_rates.is_empty() || batch_sizes.is_empty() || replicates == 0 {
            return Err(Error::config("sweep axes and replicate count must be nonempty"));
        }
        learning_rates.sort_by(f64::total_cmp);
        batch_sizes.sort_unstable();
        if learning_rates.windows(2).any(|w| w[0] == w[1]) || batch_sizes.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("sweep axes must not contain duplicates"));
        }
        Ok(Self {
            learning_rates,
            batch_sizes,
            base,
            replicates,
        })
    }

    pub fn from_run_config(cfg: &RunConfig) -> Result<Self> {
        let lrs = cfg
            .sweep_lr
            .clone()
            .ok_or_else(|| Error::config("missing required key `sweep_lr`"))?;
        let batches = cfg
            .sweep_batch_size
            .clone()
            .ok_or_else(|| Error::config("missing required key `sweep_batch_size`"))?;
        // lr and batch_size are supplied by the grid; fill them if absent
        let mut filled = cfg.clone();
        filled.lr = filled.lr.or(lrs.first().copied());
        filled.batch_size = filled.batch_size.or(batches.first().copied());
        Self::new(lrs, batches, filled.train_config()?, cfg.replicates.unwrap_or(1))
    }

    /// Cells in output order: lexicographic by (lr, batch size, replicate).
    pub fn cells(&self) -> Vec<(f64, usize, usize)> {
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &b in &self.batch_sizes {
                for r in 0..self.replicates {
                    out.push((lr, b, r));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub replicate: usize,
    pub seed: u64,
    /// `None` on success, otherwise the failure message.
    pub failure: Option<String>,
    pub accuracy: f64,
    pub epsilon: f64,
    pub trainable_fraction: f64,
}

pub const SWEEP_HEADER: &str = "lr,batch_size,replicate,seed,status,acc_macro,epsilon,trainable_fraction";

fn csv_field(s: &str) -> String {
    s.replace([',', '\n', '"'], " ")
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let status = match &r.failure {
            None => "ok".to_string(),
            Some(msg) => format!("failed: {}", csv_field(msg)),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.learning_rate, r.batch_size, r.replicate, r.seed, status, r.accuracy, r.epsilon, r.trainable_fraction
        );
    }
    out
}

/// Trains every grid cell. Cells run concurrently; a failing cell is
/// reported in its row and does not stop the sweep.
pub fn run_sweep(grid: &SweepGrid, dataset: &Dataset) -> Vec<SweepRow> {
    grid.cells()
        .into_par_iter()
        .map(|(lr, b, r)| {
            let seed = replicate_seed(grid.base.seed, r);
            let cfg = TrainConfig {
                learning_rate: lr,
                batch_size: b,
                seed,
                ..grid.base.clone()
            };
            let mut row = SweepRow {
                learning_rate: lr,
                batch_size: b,
                replicate: r,
                seed,
                failure: None,
                accuracy: f64::NAN,
                epsilon: f64::NAN,
                trainable_fraction: f64::NAN,
            };
            match train(&cfg, dataset, &TrainOptions::default()) {
                Ok(out) => {
                    row.accuracy = out.final_accuracy().unwrap_or(f64::NAN);
                    row.epsilon = out.report.epsilon;
                    row.trainable_fraction = out.trainable_fraction;
                }
                Err(e) => row.failure = Some(e.to_string()),
            }
            row
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub label_noise_rate: f64,
    pub feedback_bias: f64,
    pub replicates: usize,
    /// Median final macro accuracy over replicates.
    pub accuracy: f64,
    pub accuracies: Vec<f64>,
    pub epsilon: f64,
    pub trainable_fraction: f64,
}

pub const ROBUSTNESS_HEADER: &str =
    "label_noise_rate,feedback_bias,replicates,accuracy,epsilon,trainable_fraction";

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from(ROBUSTNESS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label_noise_rate, r.feedback_bias, r.replicates, r.accuracy, r.epsilon, r.trainable_fraction
        );
    }
    out
}

/// For each `(label noise, feedback bias)` level, regenerates the dataset
/// with that corruption and trains `replicates` runs. Replicate `r` shifts
/// both the training seed and the corruption seed; the clean data is shared.
pub fn run_robustness(
    levels: &[(f64, f64)],
    base: &TrainConfig,
    manifest: &DatasetManifest,
    replicates: usize,
) -> Result<Vec<RobustnessRow>> {
    if levels.is_empty() {
        return Err(Error::config("robustness needs at least one level"));
    }
    if replicates == 0 {
        return Err(Error::config("replicates must be at least 1"));
    }
    levels
        .iter()
        .map(|&(p, b)| {
            let runs = (0..replicates)
                .into_par_iter()
                .map(|r| {
                    let mut m = manifest.clone();
                    m.corruption.label_noise_rate = p;
                    m.corruption.feedback_bias = b;
                    m.corruption.seed = replicate_seed(manifest.corruption.seed, r);
                    let ds = generate_dataset(&m)?;
                    let cfg = TrainConfig {
                        seed: replicate_seed(base.seed, r),
                        ..base.clone()
                    };
                    train(&cfg, &ds, &TrainOptions::default())
                })
                .collect::<Result<Vec<_>>>()?;
            let accuracies: Vec<f64> = runs
                .iter()
                .map(|o| o.final_accuracy().unwrap_or(f64::NAN))
                .collect();
            let mut eps: Vec<f64> = runs.iter().map(|o| o.report.epsilon).collect();
            let accuracy = median(&mut accuracies.clone());
            Ok(RobustnessRow {
                label_noise_rate: p,
                feedback_bias: b,
                replicates,
                accuracy,
                accuracies,
                epsilon: median(&mut eps),
                trainable_fraction: runs[0].trainable_fraction,
            })
        })
        .collect()
}

/// Privacy report for a planned run, without training.
///
/// Needs `sigma`, `batch_size`, `n_train` (per task, or one value), `steps`
/// and optionally `alpha`, `delta`, `composition`.
pub fn audit(cfg: &RunConfig) -> Result<PrivacyReport> {
    let need = |v: Option<f64>, k: &str| v.ok_or_else(|| Error::config(format!("missing required key `{k}`")));
    let sigma = need(cfg.sigma, "sigma")?;
    let batch = cfg
        .batch_size
        .ok_or_else(|| Error::config("missing required key `batch_size`"))?;
    let steps = cfg
        .steps
        .ok_or_else(|| Error::config("missing required key `steps`"))?;
    let n_train = cfg
        .n_train
        .clone()
        .ok_or_else(|| Error::config("missing required key `n_train`"))?;
    let alpha = cfg.alpha.clone().unwrap_or_else(|| vec![1.0]);
    let tasks = n_train.len().max(alpha.len());
    let expand = |v: &[f64], name: &str| -> Result<Vec<f64>> {
        match v.len() {
            1 => Ok(vec![v[0]; tasks]),
            n if n == tasks => Ok(v.to_vec()),
            n => Err(Error::config(format!("`{name}` has {n} entries, expected 1 or {tasks}"))),
        }
    };
    let n_train = expand(&n_train.iter().map(|&n| n as f64).collect::<Vec<_>>(), "n_train")?;
    let alpha = expand(&alpha, "alpha")?;
    if let Some(c) = cfg.clip_c {
        if !(c > 0.0) {
            return Err(Error::config("clip_c must be > 0"));
        }
    }
    let mut ledger = RdpLedger::new(default_orders(), tasks)?;
    for k in 0..tasks {
        if batch == 0 || batch as f64 > n_train[k] {
            return Err(Error::config(format!(
                "batch_size {batch} must lie in 1..={} for task {k}",
                n_train[k]
            )));
        }
        let sigma_eff = if sigma == 0.0 {
            if !(alpha[k] > 0.0 && alpha[k] <= 1.0) {
                return Err(Error::config(format!("alpha for task {k} must lie in (0, 1]")));
            }
            0.0
        } else {
            effective_sigma(sigma, alpha[k])?
        };
        ledger.record_steps(k, sigma_eff, batch as f64 / n_train[k], steps as u64)?;
    }
    to_eps_delta(
        &ledger,
        cfg.delta.unwrap_or(crate::harness::config::DEFAULT_DELTA),
        cfg.composition.unwrap_or_default(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub tag: String,
    /// `(trainable %, accuracy %, ε)`, or `None` for an incomplete run.
    pub values: Option<(f64, f64, f64)>,
}

pub const REPORT_HEADER: &str = "tag,trainable_pct,accuracy_pct,epsilon";

fn final_metrics(path: &Path) -> Result<Option<(f64, f64, f64)>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return Ok(None);
    };
    let Some(last) = lines.rfind(|l| !l.trim().is_empty()) else {
        return Ok(None);
    };
    let cols: Vec<&str> = header.split(',').collect();
    let vals: Vec<&str> = last.split(',').collect();
    let get = |name: &str| -> Option<f64> {
        let i = cols.iter().position(|c| *c == name)?;
        vals.get(i)?.parse().ok()
    };
    Ok(match (get("trainable_fraction"), get("acc_macro"), get("eps_overall")) {
        (Some(f), Some(a), Some(e)) => Some((100.0 * f, 100.0 * a, e)),
        _ => None,
    })
}

/// Collects the final metrics row of each run directory.
pub fn report<P: AsRef<Path>>(dirs: &[P]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let dir = dir.as_ref();
        let tag = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        rows.push(ReportRow {
            tag,
            values: final_metrics(&dir.join(METRICS_FILE))?,
        });
    }
    if rows.iter().all(|r| r.values.is_none()) {
        return Err(Error::Usage("no completed runs among the given directories".into()));
    }
    Ok(rows)
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        match r.values {
            Some((f, a, e)) => {
                let _ = writeln!(out, "{},{f},{a},{e}", csv_field(&r.tag));
            }
            None => {
                let _ = writeln!(out, "{},incomplete,incomplete,incomplete", csv_field(&r.tag));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn grid_rejects_duplicates_and_sorts() {
        let base = TrainConfig::default();
        assert!(SweepGrid::new(vec![0.1, 0.1], vec![8], base.clone(), 1).is_err());
        assert!(SweepGrid::new(vec![], vec![8], base.clone(), 1).is_err());
        let g = SweepGrid::new(vec![0.5, 0.1], vec![16, 8], base, 2).unwrap();
        let cells = g.cells();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0], (0.1, 8, 0));
        assert_eq!(cells[1], (0.1, 8, 1));
        assert_eq!(cells[7], (0.5, 16, 1));
    }

    #[test]
    fn replicate_zero_is_base_seed() {
        assert_eq!(replicate_seed(42, 0), 42);
        assert_ne!(replicate_seed(42, 1), 42);
        assert_ne!(replicate_seed(42, 1), replicate_seed(42, 2));
    }

    #[test]
    fn audit_matches_ledger() {
        let text = "sigma=1\nbatch_size=10\nn_train=1000\nsteps=100\nalpha=1,0.25\ndelta=1e-5\n";
        let cfg = RunConfig::parse(text, "a", Path::new(".")).unwrap();
        let report = audit(&cfg).unwrap();
        assert_eq!(report.per_task.len(), 2);
        // α = 0.25 doubles the effective multiplier, so task 1 spends less
        assert!(report.per_task[1].epsilon < report.per_task[0].epsilon);
        assert_eq!(report.epsilon, report.per_task[0].epsilon);
        assert!(report.epsilon.is_finite() && report.epsilon > 0.0);
    }

    #[test]
    fn audit_errors() {
        let cfg = RunConfig::parse("sigma=1\nbatch_size=10\nsteps=5\n", "a", Path::new(".")).unwrap();
        assert!(matches!(audit(&cfg), Err(Error::Config(_))));
        let cfg = RunConfig::parse("sigma=1\nbatch_size=10\nsteps=5\nn_train=5\n", "a", Path::new(".")).unwrap();
        assert!(audit(&cfg).is_err());
    }

    #[test]
    fn report_lists_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let done = dir.path().join("done");
        fs::create_dir_all(&done).unwrap();
        fs::write(
            done.join(METRICS_FILE),
            "step,eps_overall,acc_macro,trainable_fraction\n1,inf,0.5,0.25\n2,inf,0.75,0.25\n",
        )
        .unwrap();
        let missing = dir.path().join("missing");
        let rows = report(&[&done, &missing]).unwrap();
        assert_eq!(rows[0].values, Some((25.0, 75.0, f64::INFINITY)));
        assert_eq!(rows[1].values, None);
        let csv = report_csv(&rows);
        assert_eq!(
            csv,
            "tag,trainable_pct,accuracy_pct,epsilon\ndone,25,75,inf\nmissing,incomplete,incomplete,incomplete\n"
        );
        assert!(report(&[&missing]).is_err());
    }
}
