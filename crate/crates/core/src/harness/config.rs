//! `key=value` run configuration shared by every CLI subcommand.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::accountant::Composition;
use crate::dataio::key_values;
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN_DIM: usize = 32;
pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_DELTA: f64 = 1e-5;
pub const DEFAULT_KL_CEILING: f64 = 1.0;

/// Every recognised key. Anything else is rejected.
pub const KEYS: &[&str] = &[
    "lr",
    "batch_size",
    "steps",
    "clip_c",
    "sigma",
    "alpha",
    "lambda1",
    "lambda2",
    "delta",
    "seed",
    "eval_every",
    "composition",
    "controller",
    "dataset_path",
    "out_dir",
    // architecture
    "hidden_dim",
    "rank",
    "heads_trainable",
    "backbone_seed",
    // controller
    "kl_ceiling",
    // sweep
    "sweep_lr",
    "sweep_batch_size",
    "replicates",
    // robustness
    "manifest_path",
    "robustness_levels",
    // audit
    "n_train",
];

/// Raw configuration as read from disk; fields are optional until a
/// subcommand asks for them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub clip_c: Option<f64>,
    pub sigma: Option<f64>,
    pub alpha: Option<Vec<f64>>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub delta: Option<f64>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub composition: Option<Composition>,
    pub controller: Option<bool>,
    pub dataset_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub hidden_dim: Option<usize>,
    pub rank: Option<usize>,
    pub heads_trainable: Option<bool>,
    pub backbone_seed: Option<u64>,
    pub kl_ceiling: Option<f64>,
    pub sweep_lr: Option<Vec<f64>>,
    pub sweep_batch_size: Option<Vec<usize>>,
    pub replicates: Option<usize>,
    pub manifest_path: Option<PathBuf>,
    pub robustness_levels: Option<Vec<(f64, f64)>>,
    pub n_train: Option<Vec<usize>>,
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Some(true),
        "false" | "0" | "off" | "no" => Some(false),
        _ => None,
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    let out: Option<Vec<T>> = v.split(',').map(|s| s.trim().parse().ok()).collect();
    out.filter(|l| !l.is_empty())
}

fn parse_levels(v: &str) -> Option<Vec<(f64, f64)>> {
    v.split(',')
        .map(|pair| {
            let (p, b) = pair.trim().split_once(':')?;
            Some((p.trim().parse().ok()?, b.trim().parse().ok()?))
        })
        .collect()
}

impl RunConfig {
    /// Parses config text; relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, origin: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let pairs = key_values(text, origin).map_err(|e| Error::Config(e.to_string()))?;
        for (line, key, value) in pairs {
            let bad = || Error::config(format!("{origin}:{line}: invalid value `{value}` for `{key}`"));
            let real = || value.parse::<f64>().map_err(|_| bad());
            let count = || value.parse::<usize>().map_err(|_| bad());
            let seed = || value.parse::<u64>().map_err(|_| bad());
            let flag = || parse_bool(value).ok_or_else(bad);
            let path = || {
                let p = PathBuf::from(value);
                if p.is_absolute() {
                    p
                } else {
                    base_dir.join(p)
                }
            };
            match key {
                "lr" => cfg.lr = Some(real()?),
                "batch_size" => cfg.batch_size = Some(count()?),
                "steps" => cfg.steps = Some(count()?),
                "clip_c" => cfg.clip_c = Some(real()?),
                "sigma" => cfg.sigma = Some(real()?),
                "alpha" => cfg.alpha = Some(parse_list(value).ok_or_else(bad)?),
                "lambda1" => cfg.lambda1 = Some(real()?),
                "lambda2" => cfg.lambda2 = Some(real()?),
                "delta" => cfg.delta = Some(real()?),
                "seed" => cfg.seed = Some(seed()?),
                "eval_every" => cfg.eval_every = Some(count()?),
                "composition" => cfg.composition = Some(value.parse()?),
                "controller" => cfg.controller = Some(flag()?),
                "dataset_path" => cfg.dataset_path = Some(path()),
                "out_dir" => cfg.out_dir = Some(path()),
                "hidden_dim" => cfg.hidden_dim = Some(count()?),
                "rank" => cfg.rank = Some(count()?),
                "heads_trainable" => cfg.heads_trainable = Some(flag()?),
                "backbone_seed" => cfg.backbone_seed = Some(seed()?),
                "kl_ceiling" => cfg.kl_ceiling = Some(real()?),
                "sweep_lr" => cfg.sweep_lr = Some(parse_list(value).ok_or_else(bad)?),
                "sweep_batch_size" => cfg.sweep_batch_size = Some(parse_list(value).ok_or_else(bad)?),
                "replicates" => cfg.replicates = Some(count()?),
                "manifest_path" => cfg.manifest_path = Some(path()),
                "robustness_levels" => cfg.robustness_levels = Some(parse_levels(value).ok_or_else(bad)?),
                "n_train" => cfg.n_train = Some(parse_list(value).ok_or_else(bad)?),
                other => {
                    return Err(Error::config(format!("{origin}:{line}: unknown key `{other}`")))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::error::read_text(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    /// Canonical text form; paths are written as given.
    pub fn to_text(&self) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        let mut out = String::new();
        macro_rules! put {
            ($key:literal, $val:expr) => {
                if let Some(v) = &$val {
                    let _ = writeln!(out, "{}={}", $key, v);
                }
            };
        }
        put!("lr", self.lr);
        put!("batch_size", self.batch_size);
        put!("steps", self.steps);
        put!("clip_c", self.clip_c);
        put!("sigma", self.sigma);
        put!("alpha", self.alpha.as_deref().map(list));
        put!("lambda1", self.lambda1);
        put!("lambda2", self.lambda2);
        put!("delta", self.delta);
        put!("seed", self.seed);
        put!("eval_every", self.eval_every);
        put!("composition", self.composition);
        put!("controller", self.controller);
        put!("dataset_path", self.dataset_path.as_ref().map(|p| p.display().to_string()));
        put!("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        put!("hidden_dim", self.hidden_dim);
        put!("rank", self.rank);
        put!("heads_trainable", self.heads_trainable);
        put!("backbone_seed", self.backbone_seed);
        put!("kl_ceiling", self.kl_ceiling);
        put!("sweep_lr", self.sweep_lr.as_deref().map(list));
        put!("sweep_batch_size", self.sweep_batch_size.as_deref().map(list));
        put!("replicates", self.replicates);
        put!("manifest_path", self.manifest_path.as_ref().map(|p| p.display().to_string()));
        put!(
            "robustness_levels",
            self.robustness_levels.as_ref().map(|l| l
                .iter()
                .map(|(p, b)| format!("{p}:{b}"))
                .collect::<Vec<_>>()
                .join(","))
        );
        put!("n_train", self.n_train.as_deref().map(list));
        out
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        fn need<T: Clone>(v: &Option<T>, key: &str) -> Result<T> {
            v.clone()
                .ok_or_else(|| Error::config(format!("missing required key `{key}`")))
        }
        let steps = need(&self.steps, "steps")?;
        let cfg = TrainConfig {
            learning_rate: need(&self.lr, "lr")?,
            batch_size: need(&self.batch_size, "batch_size")?,
            steps,
            clip_c: need(&self.clip_c, "clip_c")?,
            sigma: need(&self.sigma, "sigma")?,
            alpha: self.alpha.clone().unwrap_or_else(|| vec![1.0]),
            lambda1: self.lambda1.unwrap_or(0.0),
            lambda2: self.lambda2.unwrap_or(0.0),
            delta: self.delta.unwrap_or(DEFAULT_DELTA),
            seed: need(&self.seed, "seed")?,
            eval_every: self.eval_every.unwrap_or(steps.max(1)),
            composition: self.composition.unwrap_or_default(),
            controller: self.controller.unwrap_or(false),
            kl_ceiling: self.kl_ceiling.unwrap_or(DEFAULT_KL_CEILING),
            hidden_dim: self.hidden_dim.unwrap_or(DEFAULT_HIDDEN_DIM),
            rank: self.rank.unwrap_or(DEFAULT_RANK),
            heads_trainable: self.heads_trainable.unwrap_or(true),
            backbone_seed: self.backbone_seed.unwrap_or(0),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Validated training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Per-task batch size B.
    pub batch_size: usize,
    pub steps: usize,
    pub clip_c: f64,
    pub sigma: f64,
    /// Task weights; a single entry is broadcast to every task.
    pub alpha: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub composition: Composition,
    pub controller: bool,
    pub kl_ceiling: f64,
    pub hidden_dim: usize,
    pub rank: usize,
    pub heads_trainable: bool,
    pub backbone_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 32,
            steps: 100,
            clip_c: 1.0,
            sigma: 1.0,
            alpha: vec![1.0],
            lambda1: 0.0,
            lambda2: 0.0,
            delta: DEFAULT_DELTA,
            seed: 0,
            eval_every: 100,
            composition: Composition::Parallel,
            controller: false,
            kl_ceiling: DEFAULT_KL_CEILING,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            rank: DEFAULT_RANK,
            heads_trainable: true,
            backbone_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("lr must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
            return Err(Error::config("clip_c must be finite and > 0"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma must be finite and >= 0"));
        }
        crate::dp::TaskWeights::new(self.alpha.clone())?;
        crate::objective::LossConfig::new(self.lambda1, self.lambda2)?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta must lie in (0, 1)"));
        }
        if !(self.kl_ceiling > 0.0) {
            return Err(Error::config("kl_ceiling must be > 0"));
        }
        Ok(())
    }

    /// Task weights expanded to `tasks` entries.
    pub fn task_weights(&self, tasks: usize) -> Result<crate::dp::TaskWeights> {
        let alpha = match self.alpha.len() {
            1 => vec![self.alpha[0]; tasks],
            n if n == tasks => self.alpha.clone(),
            n => {
                return Err(Error::config(format!(
                    "alpha has {n} entries but the dataset has {tasks} tasks"
                )))
            }
        };
        crate::dp::TaskWeights::new(alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "\
# a comment
lr=0.1
batch_size=32
steps=50
clip_c=1.0
sigma=1.0
alpha=1,0.5,0.25
seed=7
composition=sequential
controller=false
dataset_path=data/ds
out_dir=/tmp/out
";

    #[test]
    fn parses_and_resolves_paths() {
        let cfg = RunConfig::parse(TEXT, "t.conf", Path::new("/base")).unwrap();
        assert_eq!(cfg.alpha, Some(vec![1.0, 0.5, 0.25]));
        assert_eq!(cfg.dataset_path, Some(PathBuf::from("/base/data/ds")));
        assert_eq!(cfg.out_dir, Some(PathBuf::from("/tmp/out")));
        let train = cfg.train_config().unwrap();
        assert_eq!(train.composition, Composition::Sequential);
        assert_eq!(train.eval_every, 50);
        assert_eq!(train.task_weights(3).unwrap().as_slice(), &[1.0, 0.5, 0.25]);
        assert!(train.task_weights(2).is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = format!("{TEXT}learning_rate=0.2\n");
        match RunConfig::parse(&text, "t.conf", Path::new(".")) {
            Err(Error::Config(msg)) => assert!(msg.contains("learning_rate")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_values_rejected() {
        for bad in ["lr=abc", "alpha=", "controller=maybe", "composition=mixed", "robustness_levels=0.1"] {
            assert!(RunConfig::parse(bad, "t", Path::new(".")).is_err(), "{bad}");
        }
    }

    #[test]
    fn missing_required_key() {
        let cfg = RunConfig::parse("lr=0.1\n", "t", Path::new(".")).unwrap();
        assert!(matches!(cfg.train_config(), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::parse(TEXT, "t.conf", Path::new("/base")).unwrap();
        cfg.robustness_levels = Some(vec![(0.0, 0.0), (0.1, 0.2)]);
        cfg.sweep_lr = Some(vec![0.01, 0.1]);
        let again = RunConfig::parse(&cfg.to_text(), "t", Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_alpha_rejected() {
        let cfg = RunConfig::parse(&TEXT.replace("alpha=1,0.5,0.25", "alpha=2"), "t", Path::new(".")).unwrap();
        assert!(cfg.train_config().is_err());
    }
}
