//! The DP-SGD training loop and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;

use crate::accountant::{default_orders, effective_sigma, to_eps_delta, PrivacyReport, RdpLedger};
use crate::dataio::{Dataset, InstructionRecord};
use crate::dp::{clip_batch, privatize_clipped, NoiseKey};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::model::{
    forward, init_backbone, per_sample_grad, project_update, trainable_fraction, AdapterState,
    BackboneSpec, EffectiveParams, FrozenParams, Layout, PerSampleGradient, ProjectionSpec,
};
use crate::objective::{combine, gradient_kl, GradientDistStats, LossConfig};
use crate::rng::{derive_seed, keyed_stream, Domain};

pub const METRICS_FILE: &str = "metrics.csv";
pub const PRIVACY_FILE: &str = "privacy.csv";
pub const ADAPTER_FILE: &str = "adapter.txt";
pub const LAST_GOOD_FILE: &str = "last_good_adapter.txt";

/// How per-sample gradients inside a batch are evaluated. Both modes reduce
/// in index order and produce identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Serial,
    #[default]
    Rayon,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub parallelism: Parallelism,
    /// Where the last good adapter is written if a run aborts.
    pub checkpoint_dir: Option<PathBuf>,
}

/// One logged evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_task: f64,
    pub loss_reg: f64,
    pub loss_kl: f64,
    pub loss_total: f64,
    pub eps_overall: f64,
    pub acc_macro: f64,
    pub acc_per_task: Vec<f64>,
    pub trainable_fraction: f64,
    pub kl_degenerate_count: usize,
}

pub fn metrics_header(tasks: usize) -> String {
    let mut cols = vec![
        "step".to_string(),
        "loss_task".into(),
        "loss_reg".into(),
        "loss_kl".into(),
        "loss_total".into(),
        "eps_overall".into(),
        "acc_macro".into(),
    ];
    cols.extend((0..tasks).map(|k| format!("acc_task_{k}")));
    cols.push("trainable_fraction".into());
    cols.push("kl_degenerate_count".into());
    cols.join(",")
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let mut line = format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.loss_task,
            self.loss_reg,
            self.loss_kl,
            self.loss_total,
            self.eps_overall,
            self.acc_macro
        );
        for a in &self.acc_per_task {
            let _ = write!(line, ",{a}");
        }
        let _ = write!(line, ",{},{}", self.trainable_fraction, self.kl_degenerate_count);
        line
    }
}

pub fn metrics_csv(rows: &[MetricsRow], tasks: usize) -> String {
    let mut out = metrics_header(tasks);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub per_task: Vec<f64>,
    pub macro_accuracy: f64,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

/// Per-task and macro accuracy on `records`.
pub fn evaluate(theta: &EffectiveParams<'_>, records: &[InstructionRecord]) -> Result<EvalResult> {
    let tasks = theta.num_tasks();
    let mut correct = vec![0usize; tasks];
    let mut total = vec![0usize; tasks];
    for r in records {
        let logits = forward(theta, &r.features, r.task_id)?;
        total[r.task_id] += 1;
        if argmax(&logits) == r.label {
            correct[r.task_id] += 1;
        }
    }
    if let Some(k) = total.iter().position(|&n| n == 0) {
        return Err(Error::Usage(format!("task {k} has no eval records")));
    }
    let per_task: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &n)| c as f64 / n as f64)
        .collect();
    let macro_accuracy = per_task.iter().sum::<f64>() / tasks as f64;
    Ok(EvalResult {
        per_task,
        macro_accuracy,
    })
}

/// Everything needed to rebuild the model for a dataset and config.
#[derive(Debug, Clone)]
pub struct ModelSetup {
    pub backbone: BackboneSpec,
    pub projection: ProjectionSpec,
    pub layout: Layout,
    pub frozen: FrozenParams,
}

impl ModelSetup {
    pub fn new(config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        let backbone = BackboneSpec::new(
            dataset.manifest.input_dim,
            config.hidden_dim,
            dataset.manifest.classes_per_task.clone(),
            config.backbone_seed,
        )?;
        let projection = ProjectionSpec::new(config.rank, config.heads_trainable);
        let layout = Layout::new(&backbone, &projection)?;
        let frozen = init_backbone(&backbone)?;
        Ok(Self {
            backbone,
            projection,
            layout,
            frozen,
        })
    }

    pub fn trainable_fraction(&self) -> f64 {
        trainable_fraction(&self.backbone, &self.projection).expect("validated at construction")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub adapter: AdapterState,
    pub report: PrivacyReport,
    pub trainable_fraction: f64,
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: u64,
    /// Clipping threshold in force at the end (differs from the config only
    /// when the KL controller fired).
    pub final_clip_c: f64,
}

impl TrainOutcome {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics.last().map(|r| r.acc_macro)
    }

    pub fn write(&self, dir: &Path, tasks: usize) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), metrics_csv(&self.metrics, tasks))?;
        fs::write(dir.join(PRIVACY_FILE), self.report.to_csv())?;
        fs::write(dir.join(ADAPTER_FILE), adapter_text(&self.adapter))?;
        Ok(())
    }
}

pub fn adapter_text(adapter: &AdapterState) -> String {
    let mut out = String::new();
    for v in adapter.as_slice() {
        let _ = writeln!(out, "{v}");
    }
    out
}

struct StepOutput {
    privatized_sum: Vec<f64>,
    loss_sum: f64,
    samples: usize,
    kl: f64,
    kl_degenerate: usize,
}

fn sample_batch(seed: u64, step: usize, task: usize, n: usize, b: usize) -> Vec<usize> {
    let mut rng = keyed_stream(seed, Domain::Batch, step as u64, task as u64, 0);
    index::sample(&mut rng, n, b).into_vec()
}

fn batch_gradients(
    theta: &EffectiveParams<'_>,
    records: &[&InstructionRecord],
    batch: &[usize],
    parallelism: Parallelism,
) -> Result<Vec<PerSampleGradient>> {
    match parallelism {
        Parallelism::Serial => batch
            .iter()
            .map(|&i| per_sample_grad(theta, records[i], i))
            .collect(),
        Parallelism::Rayon => batch
            .par_iter()
            .map(|&i| per_sample_grad(theta, records[i], i))
            .collect(),
    }
}

/// Runs DP-SGD on the adapter.
///
/// Each step draws a fixed-size batch per task, clips every per-sample
/// gradient, privatizes the per-task sum with noise variance `σ²C²/α_k`, adds
/// the data-independent regularizer gradient and takes a plain SGD step
/// `u ← u − η·(Σ_k ĝ_k + λ₁∇‖P(u)‖²)`. The accountant records one release per
/// task per step.
pub fn train(config: &TrainConfig, dataset: &Dataset, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let setup = ModelSetup::new(config, dataset)?;
    let tasks = setup.backbone.num_tasks();
    let weights = config.task_weights(tasks)?;
    let loss_cfg = LossConfig::new(config.lambda1, config.lambda2)?;
    let per_task: Vec<Vec<&InstructionRecord>> = (0..tasks).map(|k| dataset.train_for_task(k)).collect();
    for (k, records) in per_task.iter().enumerate() {
        if config.batch_size > records.len() {
            return Err(Error::config(format!(
                "batch_size {} exceeds the {} training records of task {k}",
                config.batch_size,
                records.len()
            )));
        }
    }
    let mut sigma_eff = Vec::with_capacity(tasks);
    for k in 0..tasks {
        let alpha = weights.get(k).expect("expanded to task count");
        sigma_eff.push(if config.sigma == 0.0 {
            0.0
        } else {
            effective_sigma(config.sigma, alpha)?
        });
    }
    let rates: Vec<f64> = per_task
        .iter()
        .map(|r| config.batch_size as f64 / r.len() as f64)
        .collect();

    let checksum_before = setup.frozen.checksum();
    let fraction = setup.trainable_fraction();
    let noise_seed = derive_seed(config.seed, Domain::Noise, 0);
    let batch_seed = derive_seed(config.seed, Domain::Batch, 0);
    let mut adapter = AdapterState::init(setup.layout.clone(), derive_seed(config.seed, Domain::AdapterInit, 0));
    let mut ledger = RdpLedger::new(default_orders(), tasks)?;
    let mut clip_c = config.clip_c;
    let mut metrics = Vec::new();

    for step in 0..config.steps {
        let out = {
            let theta = project_update(&setup.frozen, &adapter)?;
            let mut out = StepOutput {
                privatized_sum: vec![0.0; adapter.dim()],
                loss_sum: 0.0,
                samples: 0,
                kl: 0.0,
                kl_degenerate: 0,
            };
            for (k, records) in per_task.iter().enumerate() {
                let alpha = weights.get(k).expect("expanded to task count");
                let batch = sample_batch(batch_seed, step, k, records.len(), config.batch_size);
                let grads = match batch_gradients(&theta, records, &batch, options.parallelism) {
                    Ok(g) => g,
                    Err(e) => return Err(abort(step, e.to_string(), &adapter, options)),
                };
                out.loss_sum += grads.iter().map(|g| g.loss).sum::<f64>();
                out.samples += grads.len();
                let clipped = clip_batch(&grads, k, clip_c)?;
                let stats = GradientDistStats::from_clipped(&clipped, k)?;
                let kl = gradient_kl(&stats, config.sigma, clip_c, alpha)?;
                out.kl += kl.value;
                out.kl_degenerate += kl.degenerate;
                let key = NoiseKey {
                    seed: noise_seed,
                    step: step as u64,
                    task: k as u64,
                };
                let released = privatize_clipped(&clipped, k, clip_c, config.sigma, alpha, key)?;
                out.privatized_sum
                    .iter_mut()
                    .zip(&released.g_hat)
                    .for_each(|(s, v)| *s += v);
                ledger.record_step(k, sigma_eff[k], rates[k])?;
            }
            out
        };

        let reg_value = adapter.realized_sq_norm();
        let losses = combine(out.loss_sum / out.samples as f64, reg_value, out.kl, loss_cfg);
        if !losses.total.is_finite() {
            return Err(abort(step, format!("non-finite loss {}", losses.total), &adapter, options));
        }

        let mut direction = out.privatized_sum;
        if config.lambda1 > 0.0 {
            let reg_grad = adapter.realized_sq_norm_grad();
            direction
                .iter_mut()
                .zip(&reg_grad)
                .for_each(|(d, g)| *d += config.lambda1 * g);
        }
        let mut next = adapter.clone();
        next.as_mut_slice()
            .iter_mut()
            .zip(&direction)
            .for_each(|(u, d)| *u -= config.learning_rate * d);
        if next.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(abort(step, "non-finite adapter update".into(), &adapter, options));
        }
        adapter = next;

        if config.controller && out.kl > config.kl_ceiling {
            clip_c *= 1.05;
        }

        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            let theta = project_update(&setup.frozen, &adapter)?;
            let eval = evaluate(&theta, &dataset.eval)?;
            let report = to_eps_delta(&ledger, config.delta, config.composition)?;
            metrics.push(MetricsRow {
                step: done,
                loss_task: losses.task,
                loss_reg: losses.reg,
                loss_kl: losses.kl,
                loss_total: losses.total,
                eps_overall: report.epsilon,
                acc_macro: eval.macro_accuracy,
                acc_per_task: eval.per_task,
                trainable_fraction: fraction,
                kl_degenerate_count: out.kl_degenerate,
            });
        }
    }

    let report = to_eps_delta(&ledger, config.delta, config.composition)?;
    Ok(TrainOutcome {
        metrics,
        adapter,
        report,
        trainable_fraction: fraction,
        frozen_checksum_before: checksum_before,
        frozen_checksum_after: setup.frozen.checksum(),
        final_clip_c: clip_c,
    })
}

fn abort(step: usize, msg: String, last_good: &AdapterState, options: &TrainOptions) -> Error {
    let checkpoint = match &options.checkpoint_dir {
        Some(dir) => {
            let path = dir.join(LAST_GOOD_FILE);
            match fs::create_dir_all(dir).and_then(|_| fs::write(&path, adapter_text(last_good))) {
                Ok(()) => path.display().to_string(),
                Err(e) => format!("unwritten ({e})"),
            }
        }
        None => "in-memory only".into(),
    };
    Error::Aborted {
        step,
        msg,
        checkpoint,
    }
}
