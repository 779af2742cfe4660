//! Per-sample clipping, the Gaussian mechanism and per-task noise allocation.

use crate::error::{Error, Result};
use crate::model::PerSampleGradient;
use crate::rng::{fill_standard_normal, keyed_stream, Domain};

/// Coordinates per independent noise sub-stream.
pub const NOISE_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    pub clip_c: f64,
}

impl ClipConfig {
    pub fn new(clip_c: f64) -> Result<Self> {
        check_clip(clip_c)?;
        Ok(Self { clip_c })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Noise multiplier σ.
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(Self { sigma, seed })
    }

    /// Per-coordinate variance σ²C² of the uniform mechanism.
    pub fn base_variance(&self, clip: ClipConfig) -> f64 {
        self.sigma * self.sigma * clip.clip_c * clip.clip_c
    }
}

/// Per-task importance weights α_k, each in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskWeights(Vec<f64>);

impl TaskWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::config("alpha list is empty"));
        }
        for (k, &a) in alpha.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config(format!(
                    "alpha for task {k} must lie in (0, 1], got {a}"
                )));
            }
        }
        Ok(Self(alpha))
    }

    pub fn uniform(tasks: usize) -> Self {
        Self(vec![1.0; tasks])
    }

    pub fn get(&self, task: usize) -> Option<f64> {
        self.0.get(task).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Identifies the noise stream of one release.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u64,
    pub task: u64,
}

/// A clipped, noised and averaged batch gradient for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatizedGradient {
    pub task_id: usize,
    pub g_hat: Vec<f64>,
    pub batch_size: usize,
    pub step: u64,
    /// Per-coordinate variance of the noise added to the clipped sum.
    pub variance: f64,
}

fn check_clip(c: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::config(format!("clipping threshold must be finite and > 0, got {c}")));
    }
    Ok(())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `g` by `min(1, C/‖g‖₂)`. Inputs already inside the ball (including
/// zero) come back bit-identical, and the output norm never exceeds C.
pub fn clip(g: &[f64], clip_c: f64) -> Result<Vec<f64>> {
    check_clip(clip_c)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cannot clip a non-finite gradient".into()));
    }
    let norm = l2_norm(g);
    if norm <= clip_c {
        return Ok(g.to_vec());
    }
    let mut factor = clip_c / norm;
    let mut out: Vec<f64> = g.iter().map(|v| v * factor).collect();
    // Rounding can leave the scaled norm a few ulps above C.
    while l2_norm(&out) > clip_c {
        factor *= 1.0 - 4.0 * f64::EPSILON;
        out.iter_mut().zip(g).for_each(|(o, v)| *o = v * factor);
    }
    Ok(out)
}

/// Per-coordinate noise variance σ²C²/α_k for a task.
pub fn allocate_variance(sigma: f64, clip_c: f64, alpha_k: f64) -> Result<f64> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    check_clip(clip_c)?;
    if !(alpha_k > 0.0 && alpha_k.is_finite()) {
        return Err(Error::config(format!("task weight must be > 0, got {alpha_k}")));
    }
    Ok(sigma * sigma * clip_c * clip_c / alpha_k)
}

/// Adds i.i.d. `N(0, variance)` noise to every coordinate.
///
/// Coordinate block `j` (of [`NOISE_BLOCK`] entries) draws from the stream
/// keyed by `(seed, step, task)` on sub-stream `j`.
pub fn add_noise(g: &[f64], variance: f64, key: NoiseKey) -> Result<Vec<f64>> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::config(format!("noise variance must be finite and >= 0, got {variance}")));
    }
    let mut out = g.to_vec();
    if variance == 0.0 {
        return Ok(out);
    }
    let std = variance.sqrt();
    let mut z = [0.0; NOISE_BLOCK];
    for (j, block) in out.chunks_mut(NOISE_BLOCK).enumerate() {
        let mut rng = keyed_stream(key.seed, Domain::Noise, key.step, key.task, j as u64);
        let z = &mut z[..block.len()];
        fill_standard_normal(&mut rng, z);
        block.iter_mut().zip(z.iter()).for_each(|(v, n)| *v += std * n);
    }
    Ok(out)
}

/// Clips every per-sample gradient of a single-task batch, in input order.
pub fn clip_batch(grads: &[PerSampleGradient], task_id: usize, clip_c: f64) -> Result<Vec<Vec<f64>>> {
    if grads.is_empty() {
        return Err(Error::Usage("cannot privatize an empty batch".into()));
    }
    if let Some(g) = grads.iter().find(|g| g.task_id != task_id) {
        return Err(Error::Usage(format!(
            "batch for task {task_id} contains a gradient from task {}",
            g.task_id
        )));
    }
    let m = grads[0].g.len();
    if let Some(g) = grads.iter().find(|g| g.g.len() != m) {
        return Err(Error::Shape {
            what: "per-sample gradient",
            expected: m,
            actual: g.g.len(),
        });
    }
    grads.iter().map(|g| clip(&g.g, clip_c)).collect()
}

/// `(1/B) · [Σ_i clipped_i + z]` with `z ~ N(0, σ²C²/α_k · I)`.
pub fn privatize_clipped(
    clipped: &[Vec<f64>],
    task_id: usize,
    clip_c: f64,
    sigma: f64,
    alpha_k: f64,
    key: NoiseKey,
) -> Result<PrivatizedGradient> {
    let first = clipped
        .first()
        .ok_or_else(|| Error::Usage("cannot privatize an empty batch".into()))?;
    let variance = allocate_variance(sigma, clip_c, alpha_k)?;
    let mut sum = vec![0.0; first.len()];
    for g in clipped {
        sum.iter_mut().zip(g).for_each(|(s, v)| *s += v);
    }
    let noised = add_noise(&sum, variance, key)?;
    let b = clipped.len() as f64;
    Ok(PrivatizedGradient {
        task_id,
        g_hat: noised.into_iter().map(|v| v / b).collect(),
        batch_size: clipped.len(),
        step: key.step,
        variance,
    })
}

/// Clips each per-sample gradient, sums, adds task-scaled Gaussian noise and
/// averages over the batch.
pub fn privatize_batch(
    grads: &[PerSampleGradient],
    task_id: usize,
    clip_c: f64,
    sigma: f64,
    alpha_k: f64,
    key: NoiseKey,
) -> Result<PrivatizedGradient> {
    let clipped = clip_batch(grads, task_id, clip_c)?;
    privatize_clipped(&clipped, task_id, clip_c, sigma, alpha_k, key)
}
