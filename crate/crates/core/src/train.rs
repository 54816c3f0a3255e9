//! The outer training loop shared by every weighting strategy.
//!
//! Each iteration draws a batch pair, lets the strategy decide the task
//! weights (Auto-Lambda first takes its meta step on the same pair), and then
//! applies one optimizer step to the weighted training loss.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, ParamId};
use crate::error::{AutodiffError, NetworkError, TrainError, WeightingError};
use crate::metrics::{evaluate, MetricTable};
use crate::network::{Activation, Batch, HeadSpec, MultiTaskNet, NetworkSpec, Sgd};
use crate::tasks::{sample_batch_pair, BatchPair, PairMode, PoolKind, TaskFamily};
use crate::tensor::Tensor;
use crate::weighting::{
    autolambda_meta_grad, autolambda_update, dwa_weights, gcs_weights, stochastic_task_subset,
    uncertainty_weighted_loss, AutoLambdaConfig, GcsGating, LambdaState,
};

/// Layer widths of the network; heads are sized from the family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkShape {
    pub trunk_layers: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            trunk_layers: vec![32, 32],
            head_hidden: Vec::new(),
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl NetworkShape {
    pub fn spec_for(&self, family: &TaskFamily) -> NetworkSpec {
        NetworkSpec {
            input_dim: family.input_dim(),
            trunk_layers: self.trunk_layers.clone(),
            heads: family
                .tasks()
                .iter()
                .map(|t| HeadSpec {
                    hidden: self.head_hidden.clone(),
                    output_dim: t.output_dim,
                    loss: t.loss,
                })
                .collect(),
            activation: self.activation,
            seed: self.seed,
        }
    }
}

/// Which weighting rule drives training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyConfig {
    Equal,
    /// Constant weights, e.g. a 0/1 task grouping.
    Fixed {
        weights: Vec<f64>,
    },
    Dwa {
        #[serde(default = "default_dwa_temperature")]
        temperature: f64,
    },
    Uncertainty,
    Gcs {
        #[serde(default)]
        gating: GcsGating,
    },
    AutoLambda(AutoLambdaConfig),
}

fn default_dwa_temperature() -> f64 {
    2.0
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::Equal => "equal",
            StrategyConfig::Fixed { .. } => "fixed",
            StrategyConfig::Dwa { .. } => "dwa",
            StrategyConfig::Uncertainty => "uncertainty",
            StrategyConfig::Gcs { .. } => "gcs",
            StrategyConfig::AutoLambda(_) => "auto_lambda",
        }
    }
}

/// Settings of the outer loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Network learning rate; also the lookahead step of Auto-Lambda.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pair_mode: PairMode,
    /// Primary tasks; `None` means every task that is not a noise task.
    pub primary: Option<Vec<usize>>,
    /// Seed of the batch and task-sampling stream.
    pub seed: u64,
    /// Steps per DWA epoch; `None` means one pass over the training pool.
    pub steps_per_epoch: Option<usize>,
    /// Screen every recorded op for NaN/Inf.
    pub check_finite: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 256,
            lr: 0.03,
            momentum: 0.0,
            weight_decay: 0.0,
            pair_mode: PairMode::Swap,
            primary: None,
            seed: 0,
            steps_per_epoch: None,
            check_finite: cfg!(debug_assertions),
        }
    }
}

impl TrainerConfig {
    pub fn primary_for(&self, family: &TaskFamily) -> Vec<usize> {
        self.primary.clone().unwrap_or_else(|| family.real_tasks())
    }
}

/// What happened in one outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Task weights applied to this step's network update.
    pub lambda: Vec<f64>,
    /// Per-task training-batch loss before the update.
    pub train_loss: Vec<f64>,
    /// Per-task validation-batch loss before the update; `None` for tasks
    /// without a validation batch.
    pub val_loss: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: MultiTaskNet,
    pub records: Vec<StepRecord>,
    /// Test-pool metrics of the non-noise tasks.
    pub metrics: MetricTable,
    /// Validation-pool loss of every task.
    pub val_losses: Vec<f64>,
    /// Test-pool loss of every task.
    pub test_losses: Vec<f64>,
    /// Strategy weights after the last step.
    pub final_weights: Vec<f64>,
}

struct StepCtx<'a> {
    net: &'a mut MultiTaskNet,
    opt: &'a mut Sgd,
    pair: &'a BatchPair,
    rng: &'a mut ChaCha8Rng,
}

struct StepOut {
    weights: Vec<f64>,
    train_loss: Vec<f64>,
}

trait Strategy {
    fn step(&mut self, ctx: StepCtx<'_>) -> Result<StepOut, TrainError>;
    fn current_weights(&self) -> Vec<f64>;
}

fn losses_or_nan(losses: &[Option<f64>]) -> Vec<f64> {
    losses.iter().map(|l| l.unwrap_or(f64::NAN)).collect()
}

struct FixedWeights(Vec<f64>);

impl Strategy for FixedWeights {
    fn step(&mut self, ctx: StepCtx<'_>) -> Result<StepOut, TrainError> {
        let wg = ctx.net.weighted_multi_task_grad(&ctx.pair.train, &self.0)?;
        ctx.net.apply(ctx.opt, &wg.grads);
        Ok(StepOut {
            weights: self.0.clone(),
            train_loss: losses_or_nan(&wg.losses),
        })
    }

    fn current_weights(&self) -> Vec<f64> {
        self.0.clone()
    }
}

struct Dwa {
    temperature: f64,
    steps_per_epoch: usize,
    history: Vec<Vec<f64>>,
    running: Vec<f64>,
    seen: usize,
    weights: Vec<f64>,
}

impl Strategy for Dwa {
    fn step(&mut self, ctx: StepCtx<'_>) -> Result<StepOut, TrainError> {
        let wg = ctx.net.weighted_multi_task_grad(&ctx.pair.train, &self.weights)?;
        ctx.net.apply(ctx.opt, &wg.grads);
        let used = self.weights.clone();
        for (acc, l) in self.running.iter_mut().zip(&wg.losses) {
            *acc += l.unwrap_or(0.0);
        }
        self.seen += 1;
        if self.seen == self.steps_per_epoch {
            let avg = self.running.iter().map(|s| s / self.seen as f64).collect();
            self.history.push(avg);
            if self.history.len() > 2 {
                self.history.remove(0);
            }
            self.running.iter_mut().for_each(|v| *v = 0.0);
            self.seen = 0;
            self.weights = dwa_weights(&self.history, self.temperature)?;
        }
        Ok(StepOut {
            weights: used,
            train_loss: losses_or_nan(&wg.losses),
        })
    }

    fn current_weights(&self) -> Vec<f64> {
        self.weights.clone()
    }
}

struct Uncertainty {
    /// Per-task log-variances.
    log_vars: Vec<Tensor>,
    first_id: u32,
}

impl Strategy for Uncertainty {
    fn step(&mut self, ctx: StepCtx<'_>) -> Result<StepOut, TrainError> {
        let net = &*ctx.net;
        let mut tape = net.new_tape();
        let bound = net.bind(&mut tape, net.params())?;
        let loss_nodes = net.all_task_losses(&mut tape, &bound, &ctx.pair.train)?;
        let mut losses = Vec::new();
        let mut s_nodes = Vec::new();
        let mut train_loss = vec![f64::NAN; loss_nodes.len()];
        for (t, node) in loss_nodes.iter().enumerate() {
            if let Some(node) = node {
                train_loss[t] = tape.scalar_value(*node)?;
                losses.push(*node);
                let id = ParamId(self.first_id + t as u32);
                s_nodes.push(tape.param(id, self.log_vars[t].clone())?);
            }
        }
        let total = uncertainty_weighted_loss(&mut tape, &losses, &s_nodes)?;
        let grads = tape.backward(total)?;
        let used = self.current_weights();
        ctx.net.apply(ctx.opt, &grads);
        for (t, s) in self.log_vars.iter_mut().enumerate() {
            let id = ParamId(self.first_id + t as u32);
            if let Some(g) = grads.get(id) {
                ctx.opt.update(id, s, g);
            }
        }
        Ok(StepOut {
            weights: used,
            train_loss,
        })
    }

    fn current_weights(&self) -> Vec<f64> {
        self.log_vars.iter().map(|s| libm::exp(-s.data()[0])).collect()
    }
}

struct Gcs {
    gating: GcsGating,
    primary: Vec<usize>,
    weights: Vec<f64>,
}

impl Strategy for Gcs {
    fn step(&mut self, ctx: StepCtx<'_>) -> Result<StepOut, TrainError> {
        let net = &*ctx.net;
        let per_task = net.task_grads_at(net.params(), &ctx.pair.train)?;
        let shared = |g: &GradientMap| g.flatten_where(|id| net.is_shared(id));
        let flat: Vec<Option<Vec<f64>>> = per_task
            .iter()
            .map(|e| e.as_ref().map(|(_, g)| shared(g)))
            .collect();
        let mut primary_grad: Option<Vec<f64>> = None;
        for &p in &self.primary {
            if let Some(g) = &flat[p] {
                match &mut primary_grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => primary_grad = Some(g.clone()),
                }
            }
        }
        let primary_grad = primary_grad.ok_or(WeightingError::EmptyPrimarySet)?;
        self.weights = gcs_weights(&flat, &primary_grad, &self.primary, self.gating);
        let mut total = GradientMap::new();
        let mut train_loss = vec![f64::NAN; per_task.len()];
        for (t, entry) in per_task.iter().enumerate() {
            if let Some((loss, g)) = entry {
                train_loss[t] = *loss;
                total.axpy(self.weights[t], g);
            }
        }
        ctx.net.apply(ctx.opt, &total);
        Ok(StepOut {
            weights: self.weights.clone(),
            train_loss,
        })
    }

    fn current_weights(&self) -> Vec<f64> {
        self.weights.clone()
    }
}

struct AutoLambda {
    cfg: AutoLambdaConfig,
    state: LambdaState,
}

impl Strategy for AutoLambda {
    fn step(&mut self, ctx: StepCtx<'_>) -> Result<StepOut, TrainError> {
        let k = ctx.net.num_tasks();
        let sampled = stochastic_task_subset(k, self.state.sample_size, ctx.rng)?;
        let g = autolambda_meta_grad(
            self.cfg.mode,
            ctx.net,
            &ctx.pair.train,
            &ctx.pair.val,
            &self.state,
            ctx.opt.lr,
            &sampled,
        )?;
        autolambda_update(&mut self.state, &g);
        let wg = ctx
            .net
            .weighted_multi_task_grad(&ctx.pair.train, &self.state.lambda)?;
        ctx.net.apply(ctx.opt, &wg.grads);
        Ok(StepOut {
            weights: self.state.lambda.clone(),
            train_loss: losses_or_nan(&wg.losses),
        })
    }

    fn current_weights(&self) -> Vec<f64> {
        self.state.lambda.clone()
    }
}

fn build_strategy(
    strategy: &StrategyConfig,
    family: &TaskFamily,
    net: &MultiTaskNet,
    cfg: &TrainerConfig,
    primary: &[usize],
) -> Result<Box<dyn Strategy>, TrainError> {
    let k = family.num_tasks();
    Ok(match strategy {
        StrategyConfig::Equal => Box::new(FixedWeights(vec![1.0; k])),
        StrategyConfig::Fixed { weights } => {
            if weights.len() != k {
                return Err(TrainError::Config(format!(
                    "{} fixed weights for {k} tasks",
                    weights.len()
                )));
            }
            Box::new(FixedWeights(weights.clone()))
        }
        StrategyConfig::Dwa { temperature } => {
            dwa_weights(&[], *temperature)?;
            let per_epoch = cfg
                .steps_per_epoch
                .unwrap_or_else(|| (family.pool(PoolKind::Train).len_for(0) / cfg.batch_size).max(1));
            Box::new(Dwa {
                temperature: *temperature,
                steps_per_epoch: per_epoch.max(1),
                history: Vec::new(),
                running: vec![0.0; k],
                seen: 0,
                weights: vec![1.0; k],
            })
        }
        StrategyConfig::Uncertainty => Box::new(Uncertainty {
            log_vars: vec![Tensor::scalar(0.0); k],
            first_id: net.registry().len() as u32,
        }),
        StrategyConfig::Gcs { gating } => Box::new(Gcs {
            gating: *gating,
            primary: primary.to_vec(),
            weights: vec![1.0; k],
        }),
        StrategyConfig::AutoLambda(al) => Box::new(AutoLambda {
            cfg: al.clone(),
            state: LambdaState::new(k, primary, al)?,
        }),
    })
}

fn validate(cfg: &TrainerConfig, family: &TaskFamily, primary: &[usize]) -> Result<(), TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Config(String::from("batch_size must be positive")));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(TrainError::Config(String::from("lr must be positive")));
    }
    if !(0.0..1.0).contains(&cfg.momentum) || cfg.weight_decay < 0.0 {
        return Err(TrainError::Config(String::from(
            "momentum must be in [0,1) and weight_decay >= 0",
        )));
    }
    if primary.is_empty() {
        return Err(TrainError::Config(String::from("primary task set is empty")));
    }
    if let Some(&p) = primary.iter().find(|&&p| p >= family.num_tasks()) {
        return Err(TrainError::Config(format!("primary task {p} out of range")));
    }
    Ok(())
}

fn divergence(step: usize, e: TrainError) -> TrainError {
    match e {
        TrainError::Network(NetworkError::Autodiff(AutodiffError::NonFinite(_)))
        | TrainError::Weighting(WeightingError::Network(NetworkError::Autodiff(
            AutodiffError::NonFinite(_),
        ))) => TrainError::Divergence { step, task: None },
        other => other,
    }
}

/// Trains a fresh network on `family` and evaluates it on the test pool.
/// `observer` sees every step record as soon as it exists.
pub fn train_with<F>(
    family: &TaskFamily,
    shape: &NetworkShape,
    cfg: &TrainerConfig,
    strategy: &StrategyConfig,
    mut observer: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&StepRecord) -> Result<(), TrainError>,
{
    let primary = cfg.primary_for(family);
    validate(cfg, family, &primary)?;
    let mut net = MultiTaskNet::build(shape.spec_for(family))?;
    net.set_check_finite(cfg.check_finite);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut strat = build_strategy(strategy, family, &net, cfg, &primary)?;
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let pair = sample_batch_pair(family, cfg.batch_size, cfg.pair_mode, &primary, &mut rng)?;
        let val_loss = net
            .losses_at(net.params(), &pair.val)
            .map_err(|e| divergence(step, e.into()))?;
        let out = strat
            .step(StepCtx {
                net: &mut net,
                opt: &mut opt,
                pair: &pair,
                rng: &mut rng,
            })
            .map_err(|e| divergence(step, e))?;
        let bad_task = out
            .train_loss
            .iter()
            .zip(&pair.train)
            .position(|(l, b)| b.is_some() && !l.is_finite())
            .or_else(|| val_loss.iter().position(|l| l.is_some_and(|v| !v.is_finite())));
        if bad_task.is_some() || out.weights.iter().any(|w| !w.is_finite()) {
            return Err(TrainError::Divergence {
                step,
                task: bad_task,
            });
        }
        let record = StepRecord {
            step,
            lambda: out.weights,
            train_loss: out.train_loss,
            val_loss,
        };
        observer(&record)?;
        records.push(record);
    }

    let metrics = evaluate(&net, family, &family.real_tasks(), PoolKind::Test)?;
    let pool_losses = |kind| -> Result<Vec<f64>, TrainError> {
        Ok(net
            .losses_at(net.params(), &family.full_batches(kind))?
            .into_iter()
            .map(|l| l.unwrap_or(f64::NAN))
            .collect())
    };
    let val_losses = pool_losses(PoolKind::Val)?;
    let test_losses = pool_losses(PoolKind::Test)?;
    Ok(TrainOutcome {
        final_weights: strat.current_weights(),
        net,
        records,
        metrics,
        val_losses,
        test_losses,
    })
}

pub fn train(
    family: &TaskFamily,
    shape: &NetworkShape,
    cfg: &TrainerConfig,
    strategy: &StrategyConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with(family, shape, cfg, strategy, |_| Ok(()))
}

/// Mean of each task's weight over the last `fraction` of the records
/// (at least one record).
pub fn converged_weights(records: &[StepRecord], fraction: f64) -> Vec<f64> {
    let Some(last) = records.last() else {
        return Vec::new();
    };
    let n = records.len();
    let tail = (libm::ceil(n as f64 * fraction) as usize).clamp(1, n);
    let mut mean = vec![0.0; last.lambda.len()];
    for r in &records[n - tail..] {
        for (m, l) in mean.iter_mut().zip(&r.lambda) {
            *m += l / tail as f64;
        }
    }
    mean
}

/// Per-task losses of `batches` at the network's parameters, for callers that
/// only hold a trained network.
pub fn batch_losses(net: &MultiTaskNet, batches: &[Option<Batch>]) -> Result<Vec<Option<f64>>, TrainError> {
    Ok(net.losses_at(net.params(), batches)?)
}
