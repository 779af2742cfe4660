//! Task loss, the update-norm regularizer and the gradient-distribution KL
//! penalty that together form the reported training objective
//! `L = L_task + λ₁‖P(u)‖² + λ₂·KL(p(ĝ) ‖ p(g))`.

use crate::error::{Error, Result};
use crate::model::{cross_entropy, AdapterState};

/// Variances below this are treated as degenerate and skipped by the KL.
pub const V_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self { lambda1, lambda2 })
    }
}

/// Mean cross-entropy over a batch of logit vectors.
pub fn task_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Usage("task loss of an empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape {
            what: "labels",
            expected: logits.len(),
            actual: labels.len(),
        });
    }
    let mut sum = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        sum += cross_entropy(z, y)?;
    }
    Ok(sum / logits.len() as f64)
}

/// `‖P(u)‖²`: squared Frobenius norm of every realized delta `B_t A_t` plus
/// the squared head deltas.
pub fn reg_term(adapter: &AdapterState) -> f64 {
    adapter.realized_sq_norm()
}

/// Per-coordinate moments of the clipped per-sample gradients of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDistStats {
    pub task_id: usize,
    pub batch_size: usize,
    pub mean: Vec<f64>,
    /// Unbiased sample variance; all zeros when `batch_size < 2`.
    pub variance: Vec<f64>,
}

impl GradientDistStats {
    pub fn from_clipped(clipped: &[Vec<f64>], task_id: usize) -> Result<Self> {
        let first = clipped
            .first()
            .ok_or_else(|| Error::Usage("gradient statistics of an empty batch".into()))?;
        let m = first.len();
        let b = clipped.len();
        let mut mean = vec![0.0; m];
        for g in clipped {
            if g.len() != m {
                return Err(Error::Shape {
                    what: "clipped gradient",
                    expected: m,
                    actual: g.len(),
                });
            }
            mean.iter_mut().zip(g).for_each(|(s, v)| *s += v);
        }
        mean.iter_mut().for_each(|v| *v /= b as f64);
        let mut variance = vec![0.0; m];
        if b >= 2 {
            for g in clipped {
                for ((s, v), mu) in variance.iter_mut().zip(g).zip(&mean) {
                    *s += (v - mu) * (v - mu);
                }
            }
            variance.iter_mut().for_each(|v| *v /= (b - 1) as f64);
        }
        Ok(Self {
            task_id,
            batch_size: b,
            mean,
            variance,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.batch_size < 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub coordinates_used: usize,
    pub degenerate: usize,
}

/// Diagonal-Gaussian KL between the noised and clean gradient distributions.
///
/// `p(g) = N(μ, diag v)` and `p(ĝ) = N(μ, diag(v + w))` with
/// `w = σ²C²/(α_k B²)`, the noise variance carried by the batch mean. Each
/// coordinate contributes `½[w/v − ln(1 + w/v)]`.
pub fn gradient_kl(
    stats: &GradientDistStats,
    sigma: f64,
    clip_c: f64,
    alpha_k: f64,
) -> Result<KlEstimate> {
    if let Some(v) = stats.variance.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Numeric(format!("negative or NaN gradient variance {v}")));
    }
    let b = stats.batch_size as f64;
    let w = crate::dp::allocate_variance(sigma, clip_c, alpha_k)? / (b * b);
    let m = stats.variance.len();
    if stats.is_degenerate() {
        return Ok(KlEstimate {
            value: 0.0,
            coordinates_used: 0,
            degenerate: m,
        });
    }
    let mut value = 0.0;
    let mut used = 0;
    for &v in &stats.variance {
        if v < V_FLOOR {
            continue;
        }
        used += 1;
        let t = w / v;
        value += 0.5 * (t - t.ln_1p());
    }
    Ok(KlEstimate {
        value,
        coordinates_used: used,
        degenerate: m - used,
    })
}

/// The objective and its three weighted addends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    /// λ₁ · ‖P(u)‖²
    pub reg: f64,
    /// λ₂ · KL
    pub kl: f64,
    pub total: f64,
}

pub fn combine(task: f64, reg_value: f64, kl_value: f64, config: LossConfig) -> LossBreakdown {
    let reg = config.lambda1 * reg_value;
    let kl = config.lambda2 * kl_value;
    LossBreakdown {
        task,
        reg,
        kl,
        total: task + reg + kl,
    }
}

/// `L_task + λ₁·reg_term + λ₂·gradient_kl` for one step.
pub fn composite_loss(
    task_loss_value: f64,
    adapter: &AdapterState,
    stats: &GradientDistStats,
    config: LossConfig,
    sigma: f64,
    clip_c: f64,
    alpha_k: f64,
) -> Result<LossBreakdown> {
    let config = LossConfig::new(config.lambda1, config.lambda2)?;
    let kl = gradient_kl(stats, sigma, clip_c, alpha_k)?;
    Ok(combine(task_loss_value, reg_term(adapter), kl.value, config))
}
