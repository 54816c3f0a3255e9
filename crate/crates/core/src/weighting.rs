//! Task-weighting rules: Auto-Lambda meta-gradients and the classical
//! baselines (DWA, uncertainty weighting, gradient cosine similarity).
//!
//! Auto-Lambda treats the loss weights as meta-parameters. One outer
//! iteration takes a plain SGD lookahead of the weighted training loss,
//!
//! ```text
//! theta' = theta - alpha * grad_theta sum_i lambda_i L_i(train, theta)
//! ```
//!
//! and moves `lambda` down the gradient of the unweighted primary validation
//! loss at `theta'`. Since `theta'` is linear in `lambda`, that gradient is
//!
//! ```text
//! g_i = -alpha * < grad_theta L_i(train, theta), grad_theta' L_pri(val, theta') >
//! ```
//!
//! which [`autolambda_meta_grad_exact`] evaluates directly and
//! [`autolambda_meta_grad_fd`] approximates with two extra forward passes at
//! `theta +- eps * grad_theta' L_pri`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, NodeId, Tape};
use crate::error::{AutodiffError, WeightingError};
use crate::network::{Batch, MultiTaskNet};

/// How the finite-difference step is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum EpsRule {
    /// `eps = value`
    Fixed(f64),
    /// `eps = value / ||grad_theta' L_pri||`
    Scaled(f64),
}

impl Default for EpsRule {
    fn default() -> Self {
        EpsRule::Scaled(0.01)
    }
}

impl EpsRule {
    pub fn eps(self, direction_norm: f64) -> f64 {
        match self {
            EpsRule::Fixed(e) => e,
            EpsRule::Scaled(c) => c / direction_norm,
        }
    }
}

/// How the meta-gradient is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradMode {
    /// Central difference of the training losses around `theta`.
    Fd,
    /// Inner products of per-task gradients with the lookahead direction.
    Exact,
}

/// Hyper-parameters of Auto-Lambda.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoLambdaConfig {
    pub mode: MetaGradMode,
    /// Learning rate of the weights.
    pub beta: f64,
    /// Initial value of every weight.
    pub init: f64,
    /// Lower bound applied after every update; `None` leaves weights unbounded.
    pub clamp_floor: Option<f64>,
    pub eps_rule: EpsRule,
    /// Tasks whose weights are updated per step; `None` means all of them.
    pub sample_size: Option<usize>,
}

impl Default for AutoLambdaConfig {
    fn default() -> Self {
        Self {
            mode: MetaGradMode::Fd,
            beta: DEFAULT_BETA,
            init: 0.1,
            clamp_floor: Some(1e-3),
            eps_rule: EpsRule::default(),
            sample_size: None,
        }
    }
}

/// Default weight learning rate. Sized for the desk-scale families with the
/// default network learning rate; the update magnitude scales with `lr * beta`.
pub const DEFAULT_BETA: f64 = 0.3;

/// The weight vector and everything needed to update it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaState {
    pub lambda: Vec<f64>,
    pub beta: f64,
    pub init: f64,
    pub clamp_floor: Option<f64>,
    pub eps_rule: EpsRule,
    /// Primary tasks, sorted and without duplicates.
    pub primary: Vec<usize>,
    /// Number of tasks sampled per meta step.
    pub sample_size: usize,
}

impl LambdaState {
    pub fn new(
        num_tasks: usize,
        primary: &[usize],
        cfg: &AutoLambdaConfig,
    ) -> Result<Self, WeightingError> {
        let mut primary = primary.to_vec();
        primary.sort_unstable();
        primary.dedup();
        if primary.is_empty() {
            return Err(WeightingError::EmptyPrimarySet);
        }
        if let Some(&p) = primary.iter().find(|&&p| p >= num_tasks) {
            return Err(WeightingError::InvalidConfig(format!("primary task {p} out of range")));
        }
        let sample_size = cfg.sample_size.unwrap_or(num_tasks);
        if sample_size == 0 || sample_size > num_tasks {
            return Err(WeightingError::BadSize {
                tasks: num_tasks,
                sample: sample_size,
            });
        }
        if !(cfg.beta >= 0.0 && cfg.beta.is_finite()) {
            return Err(WeightingError::InvalidConfig("beta must be finite and >= 0".into()));
        }
        let eps_ok = match cfg.eps_rule {
            EpsRule::Fixed(e) | EpsRule::Scaled(e) => e > 0.0 && e.is_finite(),
        };
        if !eps_ok {
            return Err(WeightingError::InvalidConfig("eps must be positive".into()));
        }
        let init = match cfg.clamp_floor {
            Some(floor) => cfg.init.max(floor),
            None => cfg.init,
        };
        Ok(Self {
            lambda: vec![init; num_tasks],
            beta: cfg.beta,
            init: cfg.init,
            clamp_floor: cfg.clamp_floor,
            eps_rule: cfg.eps_rule,
            primary,
            sample_size,
        })
    }
}

/// `lambda <- max(floor, lambda - beta * g)`.
pub fn autolambda_update(state: &mut LambdaState, g: &[f64]) {
    debug_assert_eq!(g.len(), state.lambda.len());
    for (l, &gi) in state.lambda.iter_mut().zip(g) {
        *l -= state.beta * gi;
        if let Some(floor) = state.clamp_floor {
            *l = l.max(floor);
        }
    }
}

/// A uniformly random `sample_size`-subset of `0..num_tasks`, sorted.
pub fn stochastic_task_subset<R: Rng + ?Sized>(
    num_tasks: usize,
    sample_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>, WeightingError> {
    if sample_size == 0 || sample_size > num_tasks {
        return Err(WeightingError::BadSize {
            tasks: num_tasks,
            sample: sample_size,
        });
    }
    if sample_size == num_tasks {
        return Ok((0..num_tasks).collect());
    }
    let mut picked = index::sample(rng, num_tasks, sample_size).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Pieces shared by both meta-gradient modes.
struct Lookahead {
    /// `grad_theta' L_pri(val, theta')`
    direction: GradientMap,
    /// Training batches restricted to the sampled tasks.
    sampled_train: Vec<Option<Batch>>,
}

fn lookahead(
    net: &MultiTaskNet,
    train: &[Option<Batch>],
    val: &[Option<Batch>],
    state: &LambdaState,
    alpha: f64,
    sampled: &[usize],
) -> Result<Lookahead, WeightingError> {
    let k = net.num_tasks();
    if state.primary.is_empty() {
        return Err(WeightingError::EmptyPrimarySet);
    }
    let sampled_train: Vec<Option<Batch>> = (0..k)
        .map(|t| if sampled.contains(&t) { train[t].clone() } else { None })
        .collect();
    let inner = net.weighted_multi_task_grad(&sampled_train, &state.lambda)?;
    let theta_prime = net.virtual_step(&inner.grads, alpha);

    let primary_val: Vec<Option<Batch>> = (0..k)
        .map(|t| {
            if state.primary.contains(&t) {
                val.get(t).cloned().flatten()
            } else {
                None
            }
        })
        .collect();
    if primary_val.iter().all(Option::is_none) {
        return Err(WeightingError::EmptyPrimarySet);
    }
    let ones = vec![1.0; k];
    let direction = net.weighted_grad_at(&theta_prime, &primary_val, &ones)?.grads;
    Ok(Lookahead {
        direction,
        sampled_train,
    })
}

/// Meta-gradient from per-task gradient inner products. Unsampled tasks get 0.
pub fn autolambda_meta_grad_exact(
    net: &MultiTaskNet,
    train: &[Option<Batch>],
    val: &[Option<Batch>],
    state: &LambdaState,
    alpha: f64,
    sampled: &[usize],
) -> Result<Vec<f64>, WeightingError> {
    let la = lookahead(net, train, val, state, alpha, sampled)?;
    let per_task = net.task_grads_at(net.params(), &la.sampled_train)?;
    Ok(per_task
        .iter()
        .map(|entry| match entry {
            Some((_, grad)) => -alpha * grad.dot(&la.direction),
            None => 0.0,
        })
        .collect())
}

/// Meta-gradient by central differences of the training losses at
/// `theta +- eps * direction`. Unsampled tasks get 0.
pub fn autolambda_meta_grad_fd(
    net: &MultiTaskNet,
    train: &[Option<Batch>],
    val: &[Option<Batch>],
    state: &LambdaState,
    alpha: f64,
    sampled: &[usize],
) -> Result<Vec<f64>, WeightingError> {
    let la = lookahead(net, train, val, state, alpha, sampled)?;
    let k = net.num_tasks();
    let norm = la.direction.norm();
    if norm == 0.0 {
        return Ok(vec![0.0; k]);
    }
    let eps = state.eps_rule.eps(norm);
    let (plus, minus) = net.perturb(&la.direction, eps)?;
    let up = net.losses_at(&plus, &la.sampled_train)?;
    let down = net.losses_at(&minus, &la.sampled_train)?;
    Ok(up
        .iter()
        .zip(&down)
        .map(|(u, d)| match (u, d) {
            (Some(u), Some(d)) => -alpha * (u - d) / (2.0 * eps),
            _ => 0.0,
        })
        .collect())
}

/// Dispatches on `mode`.
pub fn autolambda_meta_grad(
    mode: MetaGradMode,
    net: &MultiTaskNet,
    train: &[Option<Batch>],
    val: &[Option<Batch>],
    state: &LambdaState,
    alpha: f64,
    sampled: &[usize],
) -> Result<Vec<f64>, WeightingError> {
    match mode {
        MetaGradMode::Fd => autolambda_meta_grad_fd(net, train, val, state, alpha, sampled),
        MetaGradMode::Exact => autolambda_meta_grad_exact(net, train, val, state, alpha, sampled),
    }
}

/// Dynamic Weight Average. `history` holds epoch-average losses, oldest first;
/// only the last two epochs are used. With fewer than two epochs every weight
/// is 1.
pub fn dwa_weights(history: &[Vec<f64>], temperature: f64) -> Result<Vec<f64>, WeightingError> {
    if !(temperature > 0.0) {
        return Err(WeightingError::InvalidConfig("DWA temperature must be positive".into()));
    }
    let n = history.len();
    if n < 2 {
        return Ok(vec![1.0; history.first().map_or(0, Vec::len)]);
    }
    let (older, newer) = (&history[n - 2], &history[n - 1]);
    if older.len() != newer.len() {
        return Err(WeightingError::InvalidConfig("ragged DWA history".into()));
    }
    let k = newer.len();
    let mut ratios = Vec::with_capacity(k);
    for (task, (&o, &l)) in older.iter().zip(newer).enumerate() {
        if o == 0.0 {
            return Err(WeightingError::ZeroLoss { task });
        }
        ratios.push(l / o / temperature);
    }
    let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = ratios.iter().map(|r| libm::exp(r - max)).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| k as f64 * e / z).collect())
}

/// `sum_i exp(-s_i) * L_i + s_i`, where each `s_i` is a one-element
/// trainable node holding a log-variance.
pub fn uncertainty_weighted_loss(
    tape: &mut Tape,
    losses: &[NodeId],
    log_vars: &[NodeId],
) -> Result<NodeId, AutodiffError> {
    assert_eq!(losses.len(), log_vars.len(), "one log-variance per loss");
    let mut total: Option<NodeId> = None;
    for (&loss, &s) in losses.iter().zip(log_vars) {
        let neg = tape.scale(s, -1.0)?;
        let precision = tape.exp(neg)?;
        let weighted = tape.mul(precision, loss)?;
        let term = tape.add(weighted, s)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or(AutodiffError::NotScalar)
}

/// Gating rule of the gradient cosine similarity baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcsGating {
    /// Weight 1 when the cosine is positive, else 0.
    #[default]
    Binary,
    /// Weight `max(cos, 0)`.
    Cosine,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

/// Gradient cosine similarity weights. Primary tasks always get 1; each
/// auxiliary is gated by the cosine between its shared-parameter gradient and
/// the primary one. An undefined cosine (zero gradient) gives 0.
pub fn gcs_weights(
    task_grads: &[Option<Vec<f64>>],
    primary_grad: &[f64],
    primary: &[usize],
    gating: GcsGating,
) -> Vec<f64> {
    task_grads
        .iter()
        .enumerate()
        .map(|(t, g)| {
            if primary.contains(&t) {
                return 1.0;
            }
            let Some(c) = g.as_ref().and_then(|g| cosine(g, primary_grad)) else {
                return 0.0;
            };
            match gating {
                GcsGating::Binary => {
                    if c > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                GcsGating::Cosine => c.max(0.0),
            }
        })
        .collect()
}
