//! Frozen backbone, low-rank projection subspace and exact per-sample gradients.
//!
//! The backbone is a two-layer tanh MLP with one linear head per task:
//!
//! ```text
//! logits = head_k(tanh(W2' · tanh(W1' · x + b1) + b2))
//! ```
//!
//! Training never touches the backbone. All updates live in the vector `u`,
//! which is laid out as low-rank factors `(A_t, B_t)` for each targeted matrix
//! followed by optional per-task head deltas. The effective weights are
//! `W_t' = W_t + B_t · A_t`.

use fnv::FnvHasher;
use std::hash::Hasher;

use crate::dataio::InstructionRecord;
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, keyed_stream, Domain};

/// Standard deviation of the initial `A` factors; `B` starts at zero.
pub const ADAPTER_INIT_SCALE: f64 = 0.01;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                what: "matrix data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self · x + bias`
    fn affine(&self, x: &[f64], bias: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x) + bias[r];
        }
    }

    /// `out = selfᵀ · y`
    fn matvec_t(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backbone dimensions. The activation is fixed to tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Number of classes for each task; its length is the task count.
    pub classes_per_task: Vec<usize>,
    pub init_seed: u64,
}

impl BackboneSpec {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        classes_per_task: Vec<usize>,
        init_seed: u64,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dim,
            classes_per_task,
            init_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be at least 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim must be at least 1"));
        }
        if self.classes_per_task.is_empty() {
            return Err(Error::config("at least one task is required"));
        }
        if let Some(k) = self.classes_per_task.iter().position(|&c| c < 2) {
            return Err(Error::config(format!("task {k} needs at least 2 classes")));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.classes_per_task.len()
    }

    pub fn classes(&self, task: usize) -> usize {
        self.classes_per_task[task]
    }

    /// Number of head parameters (weights and biases) over all tasks.
    pub fn head_param_count(&self) -> usize {
        self.classes_per_task
            .iter()
            .map(|c| c * (self.hidden_dim + 1))
            .sum()
    }

    /// Total backbone parameter count |θ|.
    pub fn param_count(&self) -> usize {
        let (d, h) = (self.input_dim, self.hidden_dim);
        (h * d + h) + (h * h + h) + self.head_param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// The frozen backbone θ.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub heads: Vec<Head>,
}

impl FrozenParams {
    /// All-zero parameters with the given shapes.
    pub fn zeros(spec: &BackboneSpec) -> Self {
        let (d, h) = (spec.input_dim, spec.hidden_dim);
        Self {
            w1: Matrix::zeros(h, d),
            b1: vec![0.0; h],
            w2: Matrix::zeros(h, h),
            b2: vec![0.0; h],
            heads: spec
                .classes_per_task
                .iter()
                .map(|&c| Head {
                    weight: Matrix::zeros(c, h),
                    bias: vec![0.0; c],
                })
                .collect(),
        }
    }

    /// Parameter tensors in declaration order.
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.w1.data, &self.b1, &self.w2.data, &self.b2];
        for head in &self.heads {
            out.push(&head.weight.data);
            out.push(&head.bias);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
        ];
        for head in &mut self.heads {
            out.push(&mut head.weight.data);
            out.push(&mut head.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// 64-bit FNV-1a over the little-endian bytes of every parameter in
    /// declaration order (W1, b1, W2, b2, then each head's weight and bias).
    pub fn checksum(&self) -> u64 {
        let mut hasher = FnvHasher::default();
        for tensor in self.tensors() {
            for v in tensor {
                hasher.write(&v.to_le_bytes());
            }
        }
        hasher.finish()
    }
}

/// Draws the frozen backbone. Every tensor (biases included) is zero-mean
/// Gaussian with standard deviation `1/sqrt(fan_in)` of its layer.
pub fn init_backbone(spec: &BackboneSpec) -> Result<FrozenParams> {
    spec.validate()?;
    let mut params = FrozenParams::zeros(spec);
    let (d, h) = (spec.input_dim, spec.hidden_dim);
    let mut fan_in = vec![d, d, h, h];
    fan_in.extend(spec.classes_per_task.iter().flat_map(|_| [h, h]));
    for (i, (tensor, fan)) in params.tensors_mut().into_iter().zip(fan_in).enumerate() {
        let mut rng = keyed_stream(spec.init_seed, Domain::BackboneInit, i as u64, 0, 0);
        fill_standard_normal(&mut rng, tensor);
        let scale = 1.0 / (fan as f64).sqrt();
        tensor.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(params)
}

/// Backbone matrices that can carry a low-rank delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    W1,
    W2,
}

impl Target {
    /// `(out_dim, in_dim)` of the target matrix.
    fn shape(self, spec: &BackboneSpec) -> (usize, usize) {
        match self {
            Target::W1 => (spec.hidden_dim, spec.input_dim),
            Target::W2 => (spec.hidden_dim, spec.hidden_dim),
        }
    }
}

/// Describes the trainable subspace Ω.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSpec {
    pub rank: usize,
    pub targets: Vec<Target>,
    pub heads_trainable: bool,
}

impl ProjectionSpec {
    /// Rank-`rank` factors on both hidden matrices.
    pub fn new(rank: usize, heads_trainable: bool) -> Self {
        Self {
            rank,
            targets: vec![Target::W1, Target::W2],
            heads_trainable,
        }
    }

    /// Dimension m of the update vector u.
    pub fn subspace_dim(&self, spec: &BackboneSpec) -> usize {
        let factors: usize = self
            .targets
            .iter()
            .map(|t| {
                let (out, inp) = t.shape(spec);
                self.rank * (inp + out)
            })
            .sum();
        factors
            + if self.heads_trainable {
                spec.head_param_count()
            } else {
                0
            }
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        spec.validate()?;
        if self.rank == 0 {
            return Err(Error::config("projection rank must be at least 1"));
        }
        let mut sorted = self.targets.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.targets.len() {
            return Err(Error::config("projection targets must be distinct"));
        }
        let m = self.subspace_dim(spec);
        let total = spec.param_count();
        if m >= total {
            return Err(Error::config(format!(
                "subspace dimension {m} must be smaller than the backbone size {total}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct FactorBlock {
    target: Target,
    out_dim: usize,
    in_dim: usize,
    a_offset: usize,
    b_offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct HeadBlock {
    classes: usize,
    weight_offset: usize,
    bias_offset: usize,
}

/// Offsets of every factor view inside u.
///
/// Order: for each target `A_t` (r × in, row-major) then `B_t` (out × r,
/// row-major); then, when heads are trainable, each task's head weight delta
/// (C_k × h) followed by its bias delta (C_k).
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    rank: usize,
    hidden_dim: usize,
    factors: Vec<FactorBlock>,
    heads: Option<Vec<HeadBlock>>,
    dim: usize,
}

impl Layout {
    pub fn new(spec: &BackboneSpec, proj: &ProjectionSpec) -> Result<Self> {
        proj.validate(spec)?;
        let r = proj.rank;
        let mut offset = 0;
        let factors = proj
            .targets
            .iter()
            .map(|&target| {
                let (out_dim, in_dim) = target.shape(spec);
                let a_offset = offset;
                let b_offset = a_offset + r * in_dim;
                offset = b_offset + out_dim * r;
                FactorBlock {
                    target,
                    out_dim,
                    in_dim,
                    a_offset,
                    b_offset,
                }
            })
            .collect();
        let heads = proj.heads_trainable.then(|| {
            spec.classes_per_task
                .iter()
                .map(|&classes| {
                    let weight_offset = offset;
                    let bias_offset = weight_offset + classes * spec.hidden_dim;
                    offset = bias_offset + classes;
                    HeadBlock {
                        classes,
                        weight_offset,
                        bias_offset,
                    }
                })
                .collect()
        });
        debug_assert_eq!(offset, proj.subspace_dim(spec));
        Ok(Self {
            rank: r,
            hidden_dim: spec.hidden_dim,
            factors,
            heads,
            dim: offset,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn heads_trainable(&self) -> bool {
        self.heads.is_some()
    }

    /// Index ranges of `(A_t, B_t)` for a target, if it carries factors.
    pub fn factor_ranges(
        &self,
        target: Target,
    ) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        self.factors.iter().find(|f| f.target == target).map(|f| {
            (
                f.a_offset..f.b_offset,
                f.b_offset..f.b_offset + f.out_dim * self.rank,
            )
        })
    }

    /// Index ranges of a task's `(weight delta, bias delta)`.
    pub fn head_ranges(
        &self,
        task: usize,
    ) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        self.heads.as_ref().and_then(|heads| heads.get(task)).map(|h| {
            (
                h.weight_offset..h.bias_offset,
                h.bias_offset..h.bias_offset + h.classes,
            )
        })
    }

    /// Index range covering every head delta.
    pub fn head_block(&self) -> Option<std::ops::Range<usize>> {
        let heads = self.heads.as_ref()?;
        let start = heads.first()?.weight_offset;
        Some(start..self.dim)
    }
}

/// The trainable vector u together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    layout: Layout,
    u: Vec<f64>,
}

impl AdapterState {
    pub fn zeros(layout: Layout) -> Self {
        let u = vec![0.0; layout.dim];
        Self { layout, u }
    }

    /// `B_t = 0`, `A_t ~ N(0, 0.01²)`, head deltas zero; hence θ' = θ.
    pub fn init(layout: Layout, seed: u64) -> Self {
        let mut state = Self::zeros(layout);
        for (i, f) in state.layout.factors.clone().iter().enumerate() {
            let mut rng = keyed_stream(seed, Domain::AdapterInit, i as u64, 0, 0);
            let a = &mut state.u[f.a_offset..f.b_offset];
            fill_standard_normal(&mut rng, a);
            a.iter_mut().for_each(|v| *v *= ADAPTER_INIT_SCALE);
        }
        state
    }

    pub fn from_vec(layout: Layout, u: Vec<f64>) -> Result<Self> {
        if u.len() != layout.dim {
            return Err(Error::Shape {
                what: "adapter vector",
                expected: layout.dim,
                actual: u.len(),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("adapter vector has non-finite entries".into()));
        }
        Ok(Self { layout, u })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.u
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.u
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// `A_t` as an r × in matrix.
    pub fn factor_a(&self, target: Target) -> Option<Matrix> {
        let f = self.layout.factors.iter().find(|f| f.target == target)?;
        Some(Matrix {
            rows: self.layout.rank,
            cols: f.in_dim,
            data: self.u[f.a_offset..f.b_offset].to_vec(),
        })
    }

    /// `B_t` as an out × r matrix.
    pub fn factor_b(&self, target: Target) -> Option<Matrix> {
        let f = self.layout.factors.iter().find(|f| f.target == target)?;
        Some(Matrix {
            rows: f.out_dim,
            cols: self.layout.rank,
            data: self.u[f.b_offset..f.b_offset + f.out_dim * self.layout.rank].to_vec(),
        })
    }

    /// Realized delta `B_t · A_t` for a target (out × in).
    pub fn delta(&self, target: Target) -> Option<Matrix> {
        let f = self.layout.factors.iter().find(|f| f.target == target)?;
        Some(self.factor_product(f))
    }

    fn factor_product(&self, f: &FactorBlock) -> Matrix {
        let r = self.layout.rank;
        let a = &self.u[f.a_offset..f.b_offset];
        let b = &self.u[f.b_offset..f.b_offset + f.out_dim * r];
        let mut out = Matrix::zeros(f.out_dim, f.in_dim);
        for i in 0..f.out_dim {
            let row = &mut out.data[i * f.in_dim..(i + 1) * f.in_dim];
            for s in 0..r {
                let bis = b[i * r + s];
                if bis == 0.0 {
                    continue;
                }
                for (o, &asj) in row.iter_mut().zip(&a[s * f.in_dim..(s + 1) * f.in_dim]) {
                    *o += bis * asj;
                }
            }
        }
        out
    }

    /// Squared norm of the realized update P(u): `Σ_t ‖B_t A_t‖_F² + ‖head deltas‖²`.
    pub fn realized_sq_norm(&self) -> f64 {
        let factors: f64 = self
            .layout
            .factors
            .iter()
            .map(|f| self.factor_product(f).data.iter().map(|v| v * v).sum::<f64>())
            .sum();
        let heads: f64 = self
            .layout
            .head_block()
            .map(|r| self.u[r].iter().map(|v| v * v).sum())
            .unwrap_or(0.0);
        factors + heads
    }

    /// Gradient of `‖P(u)‖²` with respect to u.
    ///
    /// For `ΔW = B A`: `∂/∂A = 2 Bᵀ ΔW`, `∂/∂B = 2 ΔW Aᵀ`; head deltas give `2 Δ`.
    pub fn realized_sq_norm_grad(&self) -> Vec<f64> {
        let r = self.layout.rank;
        let mut g = vec![0.0; self.u.len()];
        for f in &self.layout.factors {
            let delta = self.factor_product(f);
            let a = &self.u[f.a_offset..f.b_offset];
            let b = &self.u[f.b_offset..f.b_offset + f.out_dim * r];
            for s in 0..r {
                for j in 0..f.in_dim {
                    let mut acc = 0.0;
                    for i in 0..f.out_dim {
                        acc += b[i * r + s] * delta.get(i, j);
                    }
                    g[f.a_offset + s * f.in_dim + j] = 2.0 * acc;
                }
            }
            for i in 0..f.out_dim {
                for s in 0..r {
                    let acc = dot(delta.row(i), &a[s * f.in_dim..(s + 1) * f.in_dim]);
                    g[f.b_offset + i * r + s] = 2.0 * acc;
                }
            }
        }
        if let Some(range) = self.layout.head_block() {
            for i in range {
                g[i] = 2.0 * self.u[i];
            }
        }
        g
    }
}

/// θ' = θ + P(u), borrowed against the frozen backbone and the adapter.
#[derive(Debug, Clone)]
pub struct EffectiveParams<'a> {
    frozen: &'a FrozenParams,
    adapter: &'a AdapterState,
    w1: Matrix,
    w2: Matrix,
    heads: Vec<Head>,
}

/// Applies the adapter to the frozen backbone. The frozen parameters are not
/// modified.
pub fn project_update<'a>(
    frozen: &'a FrozenParams,
    adapter: &'a AdapterState,
) -> Result<EffectiveParams<'a>> {
    let layout = &adapter.layout;
    let (h, d) = (frozen.w1.rows, frozen.w1.cols);
    if layout.hidden_dim != h {
        return Err(Error::Shape {
            what: "adapter hidden dimension",
            expected: h,
            actual: layout.hidden_dim,
        });
    }
    for f in &layout.factors {
        let expected = match f.target {
            Target::W1 => (h, d),
            Target::W2 => (h, h),
        };
        if (f.out_dim, f.in_dim) != expected {
            return Err(Error::Shape {
                what: "adapter factor input dimension",
                expected: expected.1,
                actual: f.in_dim,
            });
        }
    }
    if let Some(heads) = &layout.heads {
        if heads.len() != frozen.heads.len() {
            return Err(Error::Shape {
                what: "adapter head count",
                expected: frozen.heads.len(),
                actual: heads.len(),
            });
        }
        for (hb, head) in heads.iter().zip(&frozen.heads) {
            if hb.classes != head.bias.len() {
                return Err(Error::Shape {
                    what: "adapter head classes",
                    expected: head.bias.len(),
                    actual: hb.classes,
                });
            }
        }
    }

    let mut w1 = frozen.w1.clone();
    let mut w2 = frozen.w2.clone();
    for f in &layout.factors {
        let delta = adapter.factor_product(f);
        let w = match f.target {
            Target::W1 => &mut w1,
            Target::W2 => &mut w2,
        };
        for (wv, dv) in w.data.iter_mut().zip(&delta.data) {
            *wv += dv;
        }
    }
    let mut heads = frozen.heads.clone();
    if let Some(blocks) = &layout.heads {
        for (head, hb) in heads.iter_mut().zip(blocks) {
            let dw = &adapter.u[hb.weight_offset..hb.bias_offset];
            let db = &adapter.u[hb.bias_offset..hb.bias_offset + hb.classes];
            head.weight.data.iter_mut().zip(dw).for_each(|(w, d)| *w += d);
            head.bias.iter_mut().zip(db).for_each(|(b, d)| *b += d);
        }
    }
    Ok(EffectiveParams {
        frozen,
        adapter,
        w1,
        w2,
        heads,
    })
}

impl EffectiveParams<'_> {
    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn b1(&self) -> &[f64] {
        &self.frozen.b1
    }

    pub fn b2(&self) -> &[f64] {
        &self.frozen.b2
    }

    pub fn head(&self, task: usize) -> Option<&Head> {
        self.heads.get(task)
    }

    pub fn frozen(&self) -> &FrozenParams {
        self.frozen
    }

    pub fn adapter(&self) -> &AdapterState {
        self.adapter
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn classes(&self, task: usize) -> Option<usize> {
        self.heads.get(task).map(|h| h.bias.len())
    }
}

struct Activations {
    a1: Vec<f64>,
    a2: Vec<f64>,
    logits: Vec<f64>,
}

fn run_forward(theta: &EffectiveParams<'_>, x: &[f64], task: usize) -> Result<Activations> {
    let head = theta
        .heads
        .get(task)
        .ok_or_else(|| Error::Lookup(format!("task {task} out of range (K = {})", theta.heads.len())))?;
    if x.len() != theta.w1.cols {
        return Err(Error::Shape {
            what: "input features",
            expected: theta.w1.cols,
            actual: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("input features contain non-finite values".into()));
    }
    let h = theta.w1.rows;
    let mut a1 = vec![0.0; h];
    theta.w1.affine(x, &theta.frozen.b1, &mut a1);
    a1.iter_mut().for_each(|v| *v = v.tanh());
    let mut a2 = vec![0.0; h];
    theta.w2.affine(&a1, &theta.frozen.b2, &mut a2);
    a2.iter_mut().for_each(|v| *v = v.tanh());
    let mut logits = vec![0.0; head.bias.len()];
    head.weight.affine(&a2, &head.bias, &mut logits);
    Ok(Activations { a1, a2, logits })
}

/// Task logits for one input.
pub fn forward(theta: &EffectiveParams<'_>, x: &[f64], task: usize) -> Result<Vec<f64>> {
    Ok(run_forward(theta, x, task)?.logits)
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy of one logit vector against a label.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

fn check_record(theta: &EffectiveParams<'_>, record: &InstructionRecord) -> Result<()> {
    let classes = theta.classes(record.task_id).ok_or_else(|| {
        Error::Lookup(format!(
            "task {} out of range (K = {})",
            record.task_id,
            theta.num_tasks()
        ))
    })?;
    if record.label >= classes {
        return Err(Error::Input(format!(
            "label {} out of range for task {} with {classes} classes",
            record.label, record.task_id
        )));
    }
    Ok(())
}

/// Per-sample cross-entropy loss.
pub fn sample_loss(theta: &EffectiveParams<'_>, record: &InstructionRecord) -> Result<f64> {
    check_record(theta, record)?;
    let act = run_forward(theta, &record.features, record.task_id)?;
    cross_entropy(&act.logits, record.label)
}

/// ∂loss/∂u for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGradient {
    pub sample_index: usize,
    pub task_id: usize,
    pub loss: f64,
    pub g: Vec<f64>,
}

impl PerSampleGradient {
    pub fn norm(&self) -> f64 {
        self.g.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Exact gradient of the per-sample cross-entropy with respect to u, by
/// back-propagation through the effective network and the factorization.
pub fn per_sample_grad(
    theta: &EffectiveParams<'_>,
    record: &InstructionRecord,
    sample_index: usize,
) -> Result<PerSampleGradient> {
    check_record(theta, record)?;
    let layout = &theta.adapter.layout;
    let u = &theta.adapter.u;
    let task = record.task_id;
    let x = &record.features;
    let Activations { a1, a2, logits } = run_forward(theta, x, task)?;
    let loss = cross_entropy(&logits, record.label)?;

    let lse = log_sum_exp(&logits);
    let mut dlogits: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    dlogits[record.label] -= 1.0;

    let mut g = vec![0.0; layout.dim];
    if let Some((w_range, b_range)) = layout.head_ranges(task) {
        let h = a2.len();
        let gw = &mut g[w_range];
        for (c, &dc) in dlogits.iter().enumerate() {
            for (gv, &av) in gw[c * h..(c + 1) * h].iter_mut().zip(&a2) {
                *gv = dc * av;
            }
        }
        g[b_range].copy_from_slice(&dlogits);
    }

    let h = a1.len();
    let mut dz2 = vec![0.0; h];
    theta.heads[task].weight.matvec_t(&dlogits, &mut dz2);
    dz2.iter_mut().zip(&a2).for_each(|(d, a)| *d *= 1.0 - a * a);

    let mut dz1 = vec![0.0; h];
    theta.w2.matvec_t(&dz2, &mut dz1);
    dz1.iter_mut().zip(&a1).for_each(|(d, a)| *d *= 1.0 - a * a);

    let r = layout.rank;
    for f in &layout.factors {
        let (input, dz): (&[f64], &[f64]) = match f.target {
            Target::W1 => (x, &dz1),
            Target::W2 => (&a1, &dz2),
        };
        let a = &u[f.a_offset..f.b_offset];
        let b = &u[f.b_offset..f.b_offset + f.out_dim * r];
        // ∂L/∂ΔW = dz ⊗ input, so ∂L/∂B = dz ⊗ (A·input), ∂L/∂A = (Bᵀ·dz) ⊗ input.
        let a_in: Vec<f64> = (0..r)
            .map(|s| dot(&a[s * f.in_dim..(s + 1) * f.in_dim], input))
            .collect();
        let mut bt_dz = vec![0.0; r];
        for (i, &dzi) in dz.iter().enumerate() {
            for s in 0..r {
                bt_dz[s] += b[i * r + s] * dzi;
            }
        }
        for s in 0..r {
            let row = &mut g[f.a_offset + s * f.in_dim..f.a_offset + (s + 1) * f.in_dim];
            for (gv, &xv) in row.iter_mut().zip(input) {
                *gv = bt_dz[s] * xv;
            }
        }
        for (i, &dzi) in dz.iter().enumerate() {
            for s in 0..r {
                g[f.b_offset + i * r + s] = dzi * a_in[s];
            }
        }
    }

    if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for sample {sample_index}"
        )));
    }
    Ok(PerSampleGradient {
        sample_index,
        task_id: task,
        loss,
        g,
    })
}

/// Central finite-difference estimate of ∂loss/∂u, one coordinate at a time.
pub fn finite_diff_grad(
    theta: &EffectiveParams<'_>,
    record: &InstructionRecord,
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    check_record(theta, record)?;
    let base = theta.adapter.clone();
    let mut out = vec![0.0; base.dim()];
    let mut probe = base.clone();
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = base.u[i];
        probe.u[i] = orig + step;
        let plus = sample_loss(&project_update(theta.frozen, &probe)?, record)?;
        probe.u[i] = orig - step;
        let minus = sample_loss(&project_update(theta.frozen, &probe)?, record)?;
        probe.u[i] = orig;
        *slot = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// Trainable share of the backbone: m / |θ|.
pub fn trainable_fraction(spec: &BackboneSpec, proj: &ProjectionSpec) -> Result<f64> {
    proj.validate(spec)?;
    Ok(proj.subspace_dim(spec) as f64 / spec.param_count() as f64)
}
