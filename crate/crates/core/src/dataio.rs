//! Synthetic multi-task dataset generation, label corruption and file formats.
//!
//! Each task is a mixture of isotropic Gaussian clusters, one per class. The
//! dataset is fully determined by its manifest; regenerating it yields
//! byte-identical files.
//!
//! A dataset directory holds three files:
//!
//! * `manifest.txt`: `key=value` lines
//! * `train.tsv`, `eval.tsv`: a `#`-prefixed version line, then one record per
//!   line as tab-separated `task_id, label, origin_label, features...`

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{below, fill_standard_normal, keyed_stream, unit, Domain};

pub const FORMAT_VERSION: u32 = 1;
const DATASET_HEADER: &str = "#dppeft-dataset v1";

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TRAIN_FILE: &str = "train.tsv";
pub const EVAL_FILE: &str = "eval.tsv";

/// One labelled example.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionRecord {
    pub task_id: usize,
    pub label: usize,
    pub features: Vec<f64>,
    /// Label before any corruption was applied.
    pub origin_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSpec {
    pub label_noise_rate: f64,
    pub feedback_bias: f64,
    pub bias_target: usize,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn none(seed: u64) -> Self {
        Self {
            label_noise_rate: 0.0,
            feedback_bias: 0.0,
            bias_target: 0,
            seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.label_noise_rate == 0.0 && self.feedback_bias == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub input_dim: usize,
    pub classes_per_task: Vec<usize>,
    pub n_train: Vec<usize>,
    pub n_eval: Vec<usize>,
    /// Within-cluster standard deviation ζ.
    pub zeta: f64,
    pub center_scale: f64,
    pub seed: u64,
    pub corruption: CorruptionSpec,
    /// Samples dropped because a task's total was not divisible by its class count.
    pub rounding_dropped: usize,
}

impl DatasetManifest {
    /// Uniform manifest: `k` tasks with identical sizes.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        k: usize,
        input_dim: usize,
        classes: usize,
        n_train: usize,
        n_eval: usize,
        zeta: f64,
        center_scale: f64,
        seed: u64,
    ) -> Self {
        Self {
            input_dim,
            classes_per_task: vec![classes; k],
            n_train: vec![n_train; k],
            n_eval: vec![n_eval; k],
            zeta,
            center_scale,
            seed,
            corruption: CorruptionSpec::none(seed ^ 0x5eed),
            rounding_dropped: 0,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.classes_per_task.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_tasks();
        if k == 0 {
            return Err(Error::config("manifest needs at least one task"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("d_in must be at least 1"));
        }
        if self.n_train.len() != k || self.n_eval.len() != k {
            return Err(Error::config("per-task count lists must have k entries"));
        }
        for t in 0..k {
            let c = self.classes_per_task[t];
            if c < 2 {
                return Err(Error::config(format!("task {t} needs at least 2 classes")));
            }
            if self.n_train[t] == 0 || self.n_eval[t] == 0 {
                return Err(Error::config(format!("task {t} needs nonzero train and eval counts")));
            }
            if (self.n_train[t] + self.n_eval[t]) / c * c <= self.n_eval[t] {
                return Err(Error::config(format!(
                    "task {t} has too few samples per class to keep a train split"
                )));
            }
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return Err(Error::config("zeta must be positive"));
        }
        if !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return Err(Error::config("center_scale must be positive"));
        }
        check_rate("label_noise_rate", self.corruption.label_noise_rate)?;
        check_rate("feedback_bias", self.corruption.feedback_bias)?;
        if self.corruption.feedback_bias > 0.0 {
            check_target(&self.classes_per_task, self.corruption.bias_target)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let c = &self.corruption;
        let mut out = String::new();
        let _ = writeln!(out, "format_version={FORMAT_VERSION}");
        let _ = writeln!(out, "k={}", self.num_tasks());
        let _ = writeln!(out, "d_in={}", self.input_dim);
        let _ = writeln!(out, "c_k={}", join(&self.classes_per_task));
        let _ = writeln!(out, "n_train_k={}", join(&self.n_train));
        let _ = writeln!(out, "n_eval_k={}", join(&self.n_eval));
        let _ = writeln!(out, "zeta={}", self.zeta);
        let _ = writeln!(out, "center_scale={}", self.center_scale);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "label_noise_rate={}", c.label_noise_rate);
        let _ = writeln!(out, "feedback_bias={}", c.feedback_bias);
        let _ = writeln!(out, "bias_target={}", c.bias_target);
        let _ = writeln!(out, "corruption_seed={}", c.seed);
        let _ = writeln!(out, "corruption_order=label_noise,feedback_bias");
        let _ = writeln!(out, "rounding_dropped={}", self.rounding_dropped);
        out
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut k = None;
        let mut d_in = None;
        let mut c_k = None;
        let mut n_train = None;
        let mut n_eval = None;
        let mut zeta = None;
        let mut scale = None;
        let mut seed = None;
        let mut noise = 0.0;
        let mut bias = 0.0;
        let mut target = 0;
        let mut corruption_seed = None;
        let mut dropped = 0;
        for (lineno, key, value) in key_values(text, path)? {
            let err = |msg: String| Error::Parse {
                path: path.to_string(),
                line: lineno,
                msg,
            };
            let num = |v: &str| v.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            let real = |v: &str| v.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            let list = |v: &str| {
                v.split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| err(format!("{key}: {e}")))
            };
            match key {
                "format_version" => {
                    if num(value)? != FORMAT_VERSION as usize {
                        return Err(err(format!("unsupported format_version {value}")));
                    }
                }
                "k" => k = Some(num(value)?),
                "d_in" => d_in = Some(num(value)?),
                "c_k" => c_k = Some(list(value)?),
                "n_train_k" => n_train = Some(list(value)?),
                "n_eval_k" => n_eval = Some(list(value)?),
                "zeta" => zeta = Some(real(value)?),
                "center_scale" => scale = Some(real(value)?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|e| err(format!("seed: {e}")))?),
                "label_noise_rate" => noise = real(value)?,
                "feedback_bias" => bias = real(value)?,
                "bias_target" => target = num(value)?,
                "corruption_seed" => {
                    corruption_seed =
                        Some(value.parse::<u64>().map_err(|e| err(format!("corruption_seed: {e}")))?)
                }
                "corruption_order" => {
                    if value != "label_noise,feedback_bias" {
                        return Err(err(format!("unsupported corruption_order {value}")));
                    }
                }
                "rounding_dropped" => dropped = num(value)?,
                other => return Err(err(format!("unknown manifest key `{other}`"))),
            }
        }
        let missing = |name: &str| Error::config(format!("{path}: manifest is missing `{name}`"));
        let k = k.ok_or_else(|| missing("k"))?;
        let broadcast = |v: Vec<usize>, name: &str| -> Result<Vec<usize>> {
            match v.len() {
                1 => Ok(vec![v[0]; k]),
                n if n == k => Ok(v),
                n => Err(Error::config(format!(
                    "{path}: `{name}` has {n} entries but k = {k}"
                ))),
            }
        };
        let seed = seed.ok_or_else(|| missing("seed"))?;
        let manifest = Self {
            input_dim: d_in.ok_or_else(|| missing("d_in"))?,
            classes_per_task: broadcast(c_k.ok_or_else(|| missing("c_k"))?, "c_k")?,
            n_train: broadcast(n_train.ok_or_else(|| missing("n_train_k"))?, "n_train_k")?,
            n_eval: broadcast(n_eval.ok_or_else(|| missing("n_eval_k"))?, "n_eval_k")?,
            zeta: zeta.ok_or_else(|| missing("zeta"))?,
            center_scale: scale.ok_or_else(|| missing("center_scale"))?,
            seed,
            corruption: CorruptionSpec {
                label_noise_rate: noise,
                feedback_bias: bias,
                bias_target: target,
                seed: corruption_seed.unwrap_or(seed ^ 0x5eed),
            },
            rounding_dropped: dropped,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::error::read_text(path)?, &path.display().to_string())
    }
}

/// Splits `key=value` text, skipping blank lines and `#` comments.
pub(crate) fn key_values<'a>(text: &'a str, path: &str) -> Result<Vec<(usize, &'a str, &'a str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg: format!("expected key=value, got `{line}`"),
        })?;
        out.push((i + 1, key.trim(), value.trim()));
    }
    Ok(out)
}

fn check_rate(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

fn check_target(classes_per_task: &[usize], target: usize) -> Result<()> {
    if let Some(k) = classes_per_task.iter().position(|&c| target >= c) {
        return Err(Error::config(format!(
            "bias target class {target} is invalid for task {k} with {} classes",
            classes_per_task[k]
        )));
    }
    Ok(())
}

/// A generated dataset with its train and eval splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<InstructionRecord>,
    pub eval: Vec<InstructionRecord>,
}

impl Dataset {
    pub fn num_tasks(&self) -> usize {
        self.manifest.num_tasks()
    }

    /// Training records of one task, in file order.
    pub fn train_for_task(&self, task: usize) -> Vec<&InstructionRecord> {
        self.train.iter().filter(|r| r.task_id == task).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), self.manifest.to_text())?;
        write_dataset(&self.train, &dir.join(TRAIN_FILE))?;
        write_dataset(&self.eval, &dir.join(EVAL_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
        let train = read_dataset(&dir.join(TRAIN_FILE))?;
        let eval = read_dataset(&dir.join(EVAL_FILE))?;
        let ds = Self {
            manifest,
            train,
            eval,
        };
        ds.check_consistency()?;
        Ok(ds)
    }

    fn check_consistency(&self) -> Result<()> {
        let m = &self.manifest;
        for r in self.train.iter().chain(&self.eval) {
            if r.task_id >= m.num_tasks() {
                return Err(Error::Input(format!("record task {} exceeds k", r.task_id)));
            }
            if r.label >= m.classes_per_task[r.task_id] || r.origin_label >= m.classes_per_task[r.task_id] {
                return Err(Error::Input(format!(
                    "record label out of range for task {}",
                    r.task_id
                )));
            }
            if r.features.len() != m.input_dim {
                return Err(Error::Shape {
                    what: "record features",
                    expected: m.input_dim,
                    actual: r.features.len(),
                });
            }
        }
        Ok(())
    }
}

/// Draws the clean dataset described by the manifest and applies its
/// corruption spec to the train split.
pub fn generate_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let d = manifest.input_dim;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut dropped = 0;
    for task in 0..manifest.num_tasks() {
        let classes = manifest.classes_per_task[task];
        let total = manifest.n_train[task] + manifest.n_eval[task];
        let per_class = total / classes;
        dropped += total - per_class * classes;
        let usable = per_class * classes;
        let n_eval = manifest.n_eval[task];

        let mut centers = vec![0.0; classes * d];
        fill_standard_normal(
            &mut keyed_stream(manifest.seed, Domain::DataCenters, task as u64, 0, 0),
            &mut centers,
        );
        centers.iter_mut().for_each(|v| *v *= manifest.center_scale);

        let samples: Vec<Vec<f64>> = (0..classes)
            .map(|c| {
                let mut buf = vec![0.0; per_class * d];
                fill_standard_normal(
                    &mut keyed_stream(manifest.seed, Domain::DataSamples, task as u64, c as u64, 0),
                    &mut buf,
                );
                let center = &centers[c * d..(c + 1) * d];
                for row in buf.chunks_exact_mut(d) {
                    for (v, mu) in row.iter_mut().zip(center) {
                        *v = mu + manifest.zeta * *v;
                    }
                }
                buf
            })
            .collect();

        // Round-robin over classes; each class sends an even share of its
        // samples to eval, spread evenly over its sample index.
        let eval_share = |c: usize| n_eval / classes + usize::from(c < n_eval % classes);
        for pos in 0..usable {
            let (j, c) = (pos / classes, pos % classes);
            let share = eval_share(c);
            let record = InstructionRecord {
                task_id: task,
                label: c,
                origin_label: c,
                features: samples[c][j * d..(j + 1) * d].to_vec(),
            };
            if (j + 1) * share / per_class > j * share / per_class {
                eval.push(record);
            } else {
                train.push(record);
            }
        }
    }
    let mut manifest = manifest.clone();
    manifest.rounding_dropped = dropped;
    let c = manifest.corruption.clone();
    let train = inject_label_noise(train, &manifest.classes_per_task, c.label_noise_rate, c.seed)?;
    let train = inject_feedback_bias(
        train,
        &manifest.classes_per_task,
        c.feedback_bias,
        c.bias_target,
        c.seed,
    )?;
    Ok(Dataset {
        manifest,
        train,
        eval,
    })
}

/// With probability `p` per record, replaces the label by a uniformly drawn
/// different class of the same task.
pub fn inject_label_noise(
    mut records: Vec<InstructionRecord>,
    classes_per_task: &[usize],
    p: f64,
    seed: u64,
) -> Result<Vec<InstructionRecord>> {
    check_rate("label_noise_rate", p)?;
    if p == 0.0 {
        return Ok(records);
    }
    for (i, r) in records.iter_mut().enumerate() {
        let classes = *classes_per_task
            .get(r.task_id)
            .ok_or_else(|| Error::Lookup(format!("task {} has no class count", r.task_id)))?;
        let mut rng = keyed_stream(seed, Domain::LabelNoise, i as u64, 0, 0);
        if unit(&mut rng) < p {
            let draw = below(&mut rng, (classes - 1) as u64) as usize;
            r.label = if draw < r.label { draw } else { draw + 1 };
        }
    }
    Ok(records)
}

/// With probability `b` per record, overwrites the label with `target`.
pub fn inject_feedback_bias(
    mut records: Vec<InstructionRecord>,
    classes_per_task: &[usize],
    b: f64,
    target: usize,
    seed: u64,
) -> Result<Vec<InstructionRecord>> {
    check_rate("feedback_bias", b)?;
    check_target(classes_per_task, target)?;
    if b == 0.0 {
        return Ok(records);
    }
    for (i, r) in records.iter_mut().enumerate() {
        let mut rng = keyed_stream(seed, Domain::FeedbackBias, i as u64, 0, 0);
        if unit(&mut rng) < b {
            r.label = target;
        }
    }
    Ok(records)
}

fn format_record(out: &mut String, r: &InstructionRecord) {
    let _ = write!(out, "{}\t{}\t{}", r.task_id, r.label, r.origin_label);
    for v in &r.features {
        let _ = write!(out, "\t{v}");
    }
    out.push('\n');
}

pub fn dataset_to_text(records: &[InstructionRecord]) -> String {
    let mut out = String::new();
    out.push_str(DATASET_HEADER);
    out.push('\n');
    for r in records {
        format_record(&mut out, r);
    }
    out
}

pub fn write_dataset(records: &[InstructionRecord], path: &Path) -> Result<()> {
    fs::write(path, dataset_to_text(records))?;
    Ok(())
}

pub fn parse_dataset(text: &str, path: &str) -> Result<Vec<InstructionRecord>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text.split_inclusive('\n').enumerate();
    let (_, header) = lines.next().expect("nonempty text has a first line");
    if header.trim_end() != DATASET_HEADER {
        return Err(err(1, format!("expected header `{DATASET_HEADER}`")));
    }
    let mut records = Vec::new();
    let mut width = None;
    for (i, raw) in lines {
        let lineno = i + 1;
        let Some(line) = raw.strip_suffix('\n') else {
            return Err(err(lineno, "truncated record (missing newline)".into()));
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(err(lineno, format!("expected at least 4 fields, got {}", fields.len())));
        }
        if let Some(w) = width {
            if fields.len() != w {
                return Err(err(lineno, format!("expected {w} fields, got {}", fields.len())));
            }
        }
        width = Some(fields.len());
        let int = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|e| err(lineno, format!("{what}: {e}")))
        };
        let features = fields[3..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(lineno, format!("bad feature value `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(InstructionRecord {
            task_id: int(fields[0], "task_id")?,
            label: int(fields[1], "label")?,
            origin_label: int(fields[2], "origin_label")?,
            features,
        });
    }
    Ok(records)
}

pub fn read_dataset(path: &Path) -> Result<Vec<InstructionRecord>> {
    parse_dataset(&crate::error::read_text(path)?, &path.display().to_string())
}

/// Macro accuracy of a nearest-class-mean classifier fitted on `train`
/// labels and scored on `eval`. Serves as the separability baseline.
pub fn nearest_center_accuracy(
    train: &[InstructionRecord],
    eval: &[InstructionRecord],
    classes_per_task: &[usize],
) -> Result<Vec<f64>> {
    let d = train
        .first()
        .map(|r| r.features.len())
        .ok_or_else(|| Error::Usage("empty training set".into()))?;
    let mut accs = Vec::with_capacity(classes_per_task.len());
    for (task, &classes) in classes_per_task.iter().enumerate() {
        let mut sums = vec![0.0; classes * d];
        let mut counts = vec![0usize; classes];
        for r in train.iter().filter(|r| r.task_id == task) {
            counts[r.label] += 1;
            for (s, v) in sums[r.label * d..(r.label + 1) * d].iter_mut().zip(&r.features) {
                *s += v;
            }
        }
        for c in 0..classes {
            let n = counts[c].max(1) as f64;
            sums[c * d..(c + 1) * d].iter_mut().for_each(|v| *v /= n);
        }
        let task_eval: Vec<_> = eval.iter().filter(|r| r.task_id == task).collect();
        if task_eval.is_empty() {
            return Err(Error::Usage(format!("task {task} has no eval records")));
        }
        let correct = task_eval
            .iter()
            .filter(|r| {
                let mut best = (f64::INFINITY, 0);
                for c in 0..classes {
                    if counts[c] == 0 {
                        continue;
                    }
                    let dist: f64 = sums[c * d..(c + 1) * d]
                        .iter()
                        .zip(&r.features)
                        .map(|(m, x)| (m - x) * (m - x))
                        .sum();
                    if dist < best.0 {
                        best = (dist, c);
                    }
                }
                best.1 == r.label
            })
            .count();
        accs.push(correct as f64 / task_eval.len() as f64);
    }
    Ok(accs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> DatasetManifest {
        DatasetManifest::uniform(3, 16, 4, 400, 100, 0.3, 2.0, 42)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&manifest()).unwrap();
        let b = generate_dataset(&manifest()).unwrap();
        assert_eq!(dataset_to_text(&a.train), dataset_to_text(&b.train));
        assert_eq!(dataset_to_text(&a.eval), dataset_to_text(&b.eval));
    }

    #[test]
    fn split_sizes_and_balance() {
        let ds = generate_dataset(&manifest()).unwrap();
        assert_eq!(ds.train.len(), 3 * 400);
        assert_eq!(ds.eval.len(), 3 * 100);
        for task in 0..3 {
            let mut counts = [0usize; 4];
            ds.train
                .iter()
                .chain(&ds.eval)
                .filter(|r| r.task_id == task)
                .for_each(|r| counts[r.label] += 1);
            assert_eq!(counts, [125; 4]);
        }
        assert_eq!(ds.manifest.rounding_dropped, 0);
    }

    #[test]
    fn every_class_in_both_splits() {
        // eval stride equal to the class count once put a single class in eval
        let ds = generate_dataset(&DatasetManifest::uniform(1, 2, 4, 600, 200, 0.3, 2.0, 1)).unwrap();
        for split in [&ds.train, &ds.eval] {
            let mut counts = [0usize; 4];
            split.iter().for_each(|r| counts[r.label] += 1);
            assert_eq!(counts[0] * 4, split.len(), "{counts:?}");
            assert!(counts.iter().all(|&n| n == counts[0]), "{counts:?}");
        }
    }

    #[test]
    fn rounding_is_recorded() {
        let m = DatasetManifest::uniform(1, 2, 3, 10, 4, 0.3, 2.0, 1);
        let ds = generate_dataset(&m).unwrap();
        assert_eq!(ds.manifest.rounding_dropped, 2);
        assert_eq!(ds.train.len() + ds.eval.len(), 12);
        assert_eq!(ds.eval.len(), 4);
    }

    #[test]
    fn nearest_center_separable() {
        let ds = generate_dataset(&manifest()).unwrap();
        let accs = nearest_center_accuracy(&ds.train, &ds.eval, &ds.manifest.classes_per_task).unwrap();
        let macro_acc = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(macro_acc >= 0.95, "{macro_acc}");
    }

    #[test]
    fn label_noise_edges() {
        let ds = generate_dataset(&manifest()).unwrap();
        let classes = &ds.manifest.classes_per_task;
        let same = inject_label_noise(ds.train.clone(), classes, 0.0, 3).unwrap();
        assert_eq!(same, ds.train);
        let flipped = inject_label_noise(ds.train.clone(), classes, 1.0, 3).unwrap();
        assert!(flipped.iter().all(|r| r.label != r.origin_label && r.label < 4));
        assert!(matches!(
            inject_label_noise(ds.train.clone(), classes, 1.5, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn feedback_bias_edges() {
        let ds = generate_dataset(&manifest()).unwrap();
        let classes = &ds.manifest.classes_per_task;
        let same = inject_feedback_bias(ds.train.clone(), classes, 0.0, 0, 3).unwrap();
        assert_eq!(same, ds.train);
        let all = inject_feedback_bias(ds.train.clone(), classes, 1.0, 2, 3).unwrap();
        assert!(all.iter().all(|r| r.label == 2));
        assert!(matches!(
            inject_feedback_bias(ds.train.clone(), classes, 0.5, 4, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn eval_split_never_corrupted() {
        let mut m = manifest();
        m.corruption.label_noise_rate = 0.5;
        m.corruption.feedback_bias = 0.5;
        let ds = generate_dataset(&m).unwrap();
        assert!(ds.eval.iter().all(|r| r.label == r.origin_label));
        assert!(ds.train.iter().any(|r| r.label != r.origin_label));
    }

    #[test]
    fn empty_file_is_empty_collection() {
        assert!(parse_dataset("", "x").unwrap().is_empty());
        assert!(parse_dataset("#dppeft-dataset v1\n", "x").unwrap().is_empty());
    }

    #[test]
    fn truncated_file_names_line() {
        let ds = generate_dataset(&manifest()).unwrap();
        let text = dataset_to_text(&ds.train[..3]);
        let cut = &text[..text.len() - 7];
        match parse_dataset(cut, "t.tsv") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line() {
        let text = "#dppeft-dataset v1\n0\t1\t1\t0.5\nzero\t1\t1\t0.5\n";
        match parse_dataset(text, "t.tsv") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let mut m = manifest();
        m.corruption.label_noise_rate = 0.1;
        let parsed = DatasetManifest::parse(&m.to_text(), "m").unwrap();
        assert_eq!(parsed, m);
    }

    #[test]
    fn manifest_broadcast_and_unknown_keys() {
        let text = "k=2\nd_in=4\nc_k=3\nn_train_k=30,60\nn_eval_k=9\nzeta=0.5\ncenter_scale=1\nseed=9\n";
        let m = DatasetManifest::parse(text, "m").unwrap();
        assert_eq!(m.classes_per_task, vec![3, 3]);
        assert_eq!(m.n_train, vec![30, 60]);
        let bad = format!("{text}typo=1\n");
        assert!(matches!(
            DatasetManifest::parse(&bad, "m"),
            Err(Error::Parse { line: 9, .. })
        ));
    }
}
