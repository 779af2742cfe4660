//! Rényi DP accounting for the per-task Gaussian releases.
//!
//! Every privatized release of task `k` is a (Poisson-approximated)
//! subsampled Gaussian mechanism with sampling rate `q_k = B/N_k` and noise
//! multiplier `σ/√α_k`. Releases compose additively in RDP; the ledger keeps
//! per-task event counts so `T` identical steps account to exactly `T` times
//! the single-step curve.

use std::fmt;
use std::str::FromStr;

use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

/// How per-task guarantees combine into the overall budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Composition {
    /// Tasks hold disjoint records: overall ε is the per-task maximum.
    #[default]
    Parallel,
    /// Tasks may share records: per-task RDP curves are summed.
    Sequential,
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Composition::Parallel => "parallel",
            Composition::Sequential => "sequential",
        })
    }
}

impl FromStr for Composition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Composition::Parallel),
            "sequential" => Ok(Composition::Sequential),
            other => Err(Error::config(format!(
                "composition must be `parallel` or `sequential`, got `{other}`"
            ))),
        }
    }
}

/// Default RDP orders: three fractional orders below 2 (usable only for
/// unsampled releases), every integer 2..=20, then a sparse tail to 512.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75];
    orders.extend((2..=20).map(f64::from));
    orders.extend([24.0, 28.0, 32.0, 40.0, 48.0, 64.0, 96.0, 128.0, 256.0, 512.0]);
    orders
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccountantConfig {
    pub orders: Vec<f64>,
    pub delta: f64,
    /// Sampling rate q_k = B/N_k per task.
    pub sampling_rates: Vec<f64>,
    pub composition: Composition,
}

impl AccountantConfig {
    pub fn new(sampling_rates: Vec<f64>, delta: f64, composition: Composition) -> Result<Self> {
        let cfg = Self {
            orders: default_orders(),
            delta,
            sampling_rates,
            composition,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_orders(&self.orders)?;
        check_delta(self.delta)?;
        for (k, &q) in self.sampling_rates.iter().enumerate() {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::config(format!(
                    "sampling rate for task {k} must lie in (0, 1], got {q}"
                )));
            }
        }
        Ok(())
    }
}

fn validate_orders(orders: &[f64]) -> Result<()> {
    if orders.is_empty() {
        return Err(Error::config("RDP order set is empty"));
    }
    if orders.iter().any(|&a| !(a > 1.0 && a.is_finite())) {
        return Err(Error::config("RDP orders must be finite and > 1"));
    }
    if orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("RDP orders must be strictly ascending"));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// Noise multiplier of task `k`'s mechanism: `σ/√α_k`.
pub fn effective_sigma(sigma: f64, alpha_k: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("sigma must be finite and > 0, got {sigma}")));
    }
    if !(alpha_k > 0.0 && alpha_k <= 1.0) {
        return Err(Error::config(format!("task weight must lie in (0, 1], got {alpha_k}")));
    }
    Ok(sigma / alpha_k.sqrt())
}

/// RDP of the Gaussian mechanism with unit sensitivity: `α / (2σ²)`.
pub fn rdp_gaussian(order: f64, sigma_eff: f64) -> Result<f64> {
    if !(order > 1.0) {
        return Err(Error::config(format!("RDP order must exceed 1, got {order}")));
    }
    if !(sigma_eff > 0.0) {
        return Err(Error::config(format!("noise multiplier must be > 0, got {sigma_eff}")));
    }
    Ok(order / (2.0 * sigma_eff * sigma_eff))
}

/// `ln(eˣ − 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 40.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `ln(1 + eˣ)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// RDP of the Poisson-subsampled Gaussian mechanism at an integer order.
///
/// Uses the binomial expansion
/// `A_α = Σ_k C(α,k) (1−q)^{α−k} q^k exp((k²−k)/(2σ²))`, rewritten as
/// `A_α − 1 = Σ_{k≥2} C(α,k) (1−q)^{α−k} q^k (exp((k²−k)/(2σ²)) − 1)` so that
/// every term is non-negative and the sum is evaluated in log space.
/// Returns `ln(A_α)/(α−1)`.
pub fn rdp_subsampled_gaussian(order: f64, sigma_eff: f64, q: f64) -> Result<f64> {
    if !(order >= 2.0 && order.fract() == 0.0 && order.is_finite()) {
        return Err(Error::config(format!(
            "subsampled RDP needs an integer order >= 2, got {order}"
        )));
    }
    if !(sigma_eff > 0.0) {
        return Err(Error::config(format!("noise multiplier must be > 0, got {sigma_eff}")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config(format!("sampling rate must lie in [0, 1], got {q}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let n = order as u64;
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let two_var = 2.0 * sigma_eff * sigma_eff;
    let terms: Vec<f64> = (2..=n)
        .map(|k| {
            let rest = n - k;
            let keep = if rest == 0 { 0.0 } else { rest as f64 * ln_1mq };
            let kf = k as f64;
            ln_binomial(n, k) + keep + kf * ln_q + ln_expm1((kf * kf - kf) / two_var)
        })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let ln_a_minus_1 = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    Ok(softplus(ln_a_minus_1) / (order - 1.0))
}

/// RDP of one release at `order`; unusable orders map to `+∞`.
fn release_rdp(order: f64, sigma_eff: f64, q: f64) -> f64 {
    if sigma_eff == 0.0 {
        return f64::INFINITY;
    }
    if q >= 1.0 {
        return rdp_gaussian(order, sigma_eff).unwrap_or(f64::INFINITY);
    }
    if order.fract() != 0.0 {
        return f64::INFINITY;
    }
    rdp_subsampled_gaussian(order, sigma_eff, q).unwrap_or(f64::INFINITY)
}

#[derive(Debug, Clone, PartialEq)]
struct EventGroup {
    sigma_eff: f64,
    q: f64,
    count: u64,
}

/// Accumulated RDP per task.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpLedger {
    orders: Vec<f64>,
    tasks: Vec<Vec<EventGroup>>,
}

impl RdpLedger {
    pub fn new(orders: Vec<f64>, num_tasks: usize) -> Result<Self> {
        validate_orders(&orders)?;
        if num_tasks == 0 {
            return Err(Error::config("ledger needs at least one task"));
        }
        Ok(Self {
            orders,
            tasks: vec![Vec::new(); num_tasks],
        })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Records one release for `task`. A zero `sigma_eff` (no noise) makes
    /// the task's budget infinite.
    pub fn record_step(&mut self, task: usize, sigma_eff: f64, q: f64) -> Result<()> {
        self.record_steps(task, sigma_eff, q, 1)
    }

    pub fn record_steps(&mut self, task: usize, sigma_eff: f64, q: f64, count: u64) -> Result<()> {
        let n = self.tasks.len();
        let groups = self
            .tasks
            .get_mut(task)
            .ok_or_else(|| Error::Usage(format!("unknown task {task} (ledger has {n})")))?;
        if !(sigma_eff >= 0.0) {
            return Err(Error::config(format!("noise multiplier must be >= 0, got {sigma_eff}")));
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::config(format!("sampling rate must lie in (0, 1], got {q}")));
        }
        if count == 0 {
            return Ok(());
        }
        match groups.iter_mut().find(|g| g.sigma_eff == sigma_eff && g.q == q) {
            Some(g) => g.count += count,
            None => groups.push(EventGroup {
                sigma_eff,
                q,
                count,
            }),
        }
        Ok(())
    }

    pub fn steps(&self, task: usize) -> u64 {
        self.tasks
            .get(task)
            .map(|g| g.iter().map(|e| e.count).sum())
            .unwrap_or(0)
    }

    /// Accumulated RDP of `task` at every order.
    pub fn task_rdp(&self, task: usize) -> Result<Vec<f64>> {
        let groups = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::Usage(format!("unknown task {task}")))?;
        Ok(self
            .orders
            .iter()
            .map(|&a| {
                groups
                    .iter()
                    .map(|g| g.count as f64 * release_rdp(a, g.sigma_eff, g.q))
                    .sum()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskBudget {
    pub task: usize,
    pub epsilon: f64,
    /// Order attaining the minimum; `None` when every order is infinite.
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyReport {
    pub per_task: Vec<TaskBudget>,
    pub epsilon: f64,
    pub order: Option<f64>,
    pub delta: f64,
    pub composition: Composition,
}

impl PrivacyReport {
    /// CSV with one row per task, an `overall` row, and a leading comment
    /// naming the accounting assumptions.
    pub fn to_csv(&self) -> String {
        let fmt_order = |o: Option<f64>| o.map(|v| v.to_string()).unwrap_or_else(|| "none".into());
        let mut out = format!(
            "# delta={} composition={} sampling_model=poisson_approx\ntask,eps,optimal_order\n",
            self.delta, self.composition
        );
        for t in &self.per_task {
            out.push_str(&format!("{},{},{}\n", t.task, t.epsilon, fmt_order(t.order)));
        }
        out.push_str(&format!("overall,{},{}\n", self.epsilon, fmt_order(self.order)));
        out
    }
}

/// `min_α [rdp(α) + ln(1/δ)/(α−1)]` together with the minimizing order.
pub fn rdp_to_epsilon(orders: &[f64], rdp: &[f64], delta: f64) -> (f64, Option<f64>) {
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, None);
    for (&a, &r) in orders.iter().zip(rdp) {
        let eps = r + log_inv_delta / (a - 1.0);
        if eps < best.0 {
            best = (eps, Some(a));
        }
    }
    best
}

/// Converts the ledger into (ε, δ) guarantees.
pub fn to_eps_delta(ledger: &RdpLedger, delta: f64, composition: Composition) -> Result<PrivacyReport> {
    check_delta(delta)?;
    validate_orders(&ledger.orders)?;
    let curves = (0..ledger.num_tasks())
        .map(|k| ledger.task_rdp(k))
        .collect::<Result<Vec<_>>>()?;
    let per_task: Vec<TaskBudget> = curves
        .iter()
        .enumerate()
        .map(|(task, curve)| {
            let (epsilon, order) = rdp_to_epsilon(&ledger.orders, curve, delta);
            TaskBudget {
                task,
                epsilon,
                order,
            }
        })
        .collect();
    let (epsilon, order) = match composition {
        Composition::Parallel => per_task
            .iter()
            .fold((f64::NEG_INFINITY, None), |best, t| {
                if t.epsilon > best.0 {
                    (t.epsilon, t.order)
                } else {
                    best
                }
            }),
        Composition::Sequential => {
            let total: Vec<f64> = (0..ledger.orders.len())
                .map(|i| curves.iter().map(|c| c[i]).sum())
                .collect();
            rdp_to_epsilon(&ledger.orders, &total, delta)
        }
    };
    Ok(PrivacyReport {
        per_task,
        epsilon,
        order,
        delta,
        composition,
    })
}
