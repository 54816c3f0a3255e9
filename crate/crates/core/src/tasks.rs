//! Synthetic task families and train/validation batch pairing.
//!
//! A teacher family plants relatedness through shared input features. Every
//! task reads a subset of the input coordinates; its target is one fixed random
//! one-hidden-layer tanh teacher restricted to that subset. Tasks whose subsets
//! overlap more compute more similar functions, so the Jaccard overlap of the
//! subsets is a usable ground truth for how related two tasks are.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::TaskError;
use crate::network::{Batch, LossKind};
use crate::tensor::Tensor;

/// Hidden width of the planted teacher.
pub const TEACHER_WIDTH: usize = 16;
/// Width of the uniform noise targets of the noise-prediction task.
pub const NOISE_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mse,
    Accuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    Real,
    /// Fixed random targets; never part of the evaluated metric set.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub name: String,
    pub loss: LossKind,
    pub metric: MetricKind,
    /// Direction flag: `true` when a lower metric is better.
    pub lower_is_better: bool,
    /// Regression width, or class count for classification tasks.
    pub output_dim: usize,
    pub role: TaskRole,
}

impl TaskInfo {
    pub fn regression(name: &str, output_dim: usize) -> Self {
        Self {
            name: name.to_string(),
            loss: LossKind::Mse,
            metric: MetricKind::Mse,
            lower_is_better: true,
            output_dim,
            role: TaskRole::Real,
        }
    }

    pub fn classification(name: &str, classes: usize) -> Self {
        Self {
            name: name.to_string(),
            loss: LossKind::SoftmaxCe,
            metric: MetricKind::Accuracy,
            lower_is_better: false,
            output_dim: classes,
            role: TaskRole::Real,
        }
    }
}

/// Inputs of one data pool.
#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// Every task sees the same input rows.
    Shared(Tensor),
    /// Task `i` has its own rows.
    PerTask(Vec<Tensor>),
}

/// One data pool (training, held-out validation or test).
#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub inputs: Inputs,
    /// Per-task targets: `[n, out]` for regression, `[n]` for class indices.
    pub targets: Vec<Tensor>,
}

impl Pool {
    pub fn inputs_for(&self, task: usize) -> &Tensor {
        match &self.inputs {
            Inputs::Shared(x) => x,
            Inputs::PerTask(xs) => &xs[task],
        }
    }

    pub fn len_for(&self, task: usize) -> usize {
        self.inputs_for(task).rows()
    }

    pub fn batch(&self, task: usize, rows: &[usize]) -> Batch {
        Batch {
            x: self.inputs_for(task).select_rows(rows),
            y: self.targets[task].select_rows(rows),
        }
    }

    /// The whole pool of `task` as one batch.
    pub fn full(&self, task: usize) -> Batch {
        Batch {
            x: self.inputs_for(task).clone(),
            y: self.targets[task].clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Train,
    Val,
    Test,
}

/// The random teacher that produced a synthetic family.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    /// Input coordinates each task reads.
    pub feature_sets: Vec<Vec<usize>>,
    /// `[input_dim, TEACHER_WIDTH]`, shared by all tasks.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub readout: Vec<f64>,
    /// Per-task (mean, std) used to standardise the raw teacher output.
    pub standardise: Vec<(f64, f64)>,
}

impl Teacher {
    /// Hidden activations of the teacher of `task` for one input row.
    pub fn features(&self, task: usize, x: &[f64]) -> [f64; TEACHER_WIDTH] {
        let set = &self.feature_sets[task];
        let scale = 1.0 / libm::sqrt(set.len().max(1) as f64);
        let mut h = [0.0; TEACHER_WIDTH];
        for (u, hu) in h.iter_mut().enumerate() {
            let z: f64 = set
                .iter()
                .map(|&f| x[f] * self.weight.data()[f * TEACHER_WIDTH + u])
                .sum();
            *hu = libm::tanh(scale * z + self.bias[u]);
        }
        h
    }

    /// Standardised noiseless target of `task`.
    pub fn target(&self, task: usize, x: &[f64]) -> f64 {
        let raw: f64 = self
            .features(task, x)
            .iter()
            .zip(&self.readout)
            .map(|(h, v)| h * v)
            .sum();
        let (mean, std) = self.standardise[task];
        (raw - mean) / std
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskFamily {
    tasks: Vec<TaskInfo>,
    input_dim: usize,
    train: Pool,
    val: Pool,
    test: Pool,
    teacher: Option<Teacher>,
}

impl TaskFamily {
    /// Assembles a family from explicit pools, checking that every pool
    /// carries one correctly shaped target tensor per task.
    pub fn from_pools(
        tasks: Vec<TaskInfo>,
        input_dim: usize,
        train: Pool,
        val: Pool,
        test: Pool,
    ) -> Result<Self, TaskError> {
        let family = Self {
            tasks,
            input_dim,
            train,
            val,
            test,
            teacher: None,
        };
        family.validate()?;
        Ok(family)
    }

    fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::InvalidFamily(m));
        if self.tasks.is_empty() {
            return bad("a family needs at least one task".into());
        }
        for (name, pool) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if pool.targets.len() != self.tasks.len() {
                return bad(format!("{name} pool has {} target sets", pool.targets.len()));
            }
            if let Inputs::PerTask(xs) = &pool.inputs {
                if xs.len() != self.tasks.len() {
                    return bad(format!("{name} pool has {} input sets", xs.len()));
                }
            }
            for (t, info) in self.tasks.iter().enumerate() {
                let x = pool.inputs_for(t);
                if x.shape().len() != 2 || x.shape()[1] != self.input_dim {
                    return bad(format!("{name} inputs of task {t} have shape {:?}", x.shape()));
                }
                let y = &pool.targets[t];
                let ok = match info.loss {
                    LossKind::Mse => y.shape() == [x.rows(), info.output_dim],
                    LossKind::SoftmaxCe => {
                        y.shape() == [x.rows()]
                            && y.data().iter().all(|&c| {
                                c >= 0.0 && libm::trunc(c) == c && (c as usize) < info.output_dim
                            })
                    }
                };
                if !ok {
                    return bad(format!("{name} targets of task {t} do not match its head"));
                }
            }
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[TaskInfo] {
        &self.tasks
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn is_single_domain(&self) -> bool {
        matches!(self.train.inputs, Inputs::Shared(_))
    }

    pub fn pool(&self, kind: PoolKind) -> &Pool {
        match kind {
            PoolKind::Train => &self.train,
            PoolKind::Val => &self.val,
            PoolKind::Test => &self.test,
        }
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref()
    }

    /// Indices of tasks that count towards evaluation.
    pub fn real_tasks(&self) -> Vec<usize> {
        (0..self.tasks.len())
            .filter(|&t| self.tasks[t].role == TaskRole::Real)
            .collect()
    }

    /// Every task's whole pool, one batch per task.
    pub fn full_batches(&self, kind: PoolKind) -> Vec<Option<Batch>> {
        let pool = self.pool(kind);
        (0..self.tasks.len()).map(|t| Some(pool.full(t))).collect()
    }

    /// Restricts the family to the given tasks, in the given order.
    pub fn select_tasks(&self, keep: &[usize]) -> Result<TaskFamily, TaskError> {
        if let Some(&bad) = keep.iter().find(|&&t| t >= self.tasks.len()) {
            return Err(TaskError::UnknownTask(bad));
        }
        let pick = |pool: &Pool| Pool {
            inputs: match &pool.inputs {
                Inputs::Shared(x) => Inputs::Shared(x.clone()),
                Inputs::PerTask(xs) => Inputs::PerTask(keep.iter().map(|&t| xs[t].clone()).collect()),
            },
            targets: keep.iter().map(|&t| pool.targets[t].clone()).collect(),
        };
        Ok(TaskFamily {
            tasks: keep.iter().map(|&t| self.tasks[t].clone()).collect(),
            input_dim: self.input_dim,
            train: pick(&self.train),
            val: pick(&self.val),
            test: pick(&self.test),
            teacher: self.teacher.as_ref().map(|t| Teacher {
                feature_sets: keep.iter().map(|&i| t.feature_sets[i].clone()).collect(),
                standardise: keep.iter().map(|&i| t.standardise[i]).collect(),
                ..t.clone()
            }),
        })
    }

    /// Turns regression task `task` into a `classes`-way classification task by
    /// cutting its targets at the training-pool quantiles.
    pub fn classify(mut self, task: usize, classes: usize) -> Result<TaskFamily, TaskError> {
        let info = self.tasks.get(task).ok_or(TaskError::UnknownTask(task))?;
        if info.loss != LossKind::Mse || info.output_dim != 1 {
            return Err(TaskError::InvalidFamily(format!(
                "task {task} is not a scalar regression task"
            )));
        }
        if !(2..=5).contains(&classes) {
            return Err(TaskError::InvalidFamily(format!(
                "classification needs 2 to 5 classes, got {classes}"
            )));
        }
        let mut sorted = self.train.targets[task].data().to_vec();
        sorted.sort_by(f64::total_cmp);
        let cuts: Vec<f64> = (1..classes)
            .map(|c| sorted[(c * sorted.len() / classes).min(sorted.len() - 1)])
            .collect();
        let label = |v: f64| cuts.iter().filter(|&&c| v >= c).count() as f64;
        for pool in [&mut self.train, &mut self.val, &mut self.test] {
            let t = &pool.targets[task];
            let labels = t.data().iter().map(|&v| label(v)).collect();
            pool.targets[task] = Tensor::from_parts(vec![t.rows()], labels);
        }
        self.tasks[task] = TaskInfo {
            name: self.tasks[task].name.clone(),
            ..TaskInfo::classification("", classes)
        };
        Ok(self)
    }
}

/// Planted pairwise relatedness between synthetic tasks.
///
/// `overlap[i][j]` is the Jaccard overlap of the input-feature subsets of
/// tasks `i` and `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelatednessPlan {
    pub overlap: Vec<Vec<f64>>,
    pub teacher_seed: u64,
    /// Explicit feature subsets. When present they are used as is and
    /// `overlap` must equal their Jaccard matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_sets: Option<Vec<Vec<usize>>>,
}

impl RelatednessPlan {
    pub fn uniform(k: usize, rho: f64, teacher_seed: u64) -> Self {
        let overlap = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { rho }).collect())
            .collect();
        Self {
            overlap,
            teacher_seed,
            feature_sets: None,
        }
    }

    /// A plan whose overlaps are read off explicit feature subsets.
    pub fn from_feature_sets(sets: Vec<Vec<usize>>, teacher_seed: u64) -> Self {
        let overlap = sets
            .iter()
            .map(|a| sets.iter().map(|b| jaccard(a, b)).collect())
            .collect();
        Self {
            overlap,
            teacher_seed,
            feature_sets: Some(sets),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.overlap.len()
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let k = self.overlap.len();
        let bad = |m: String| Err(TaskError::InvalidPlan(m));
        for (i, row) in self.overlap.iter().enumerate() {
            if row.len() != k {
                return bad(format!("row {i} has {} entries, expected {k}", row.len()));
            }
            if row[i] != 1.0 {
                return bad(format!("diagonal entry {i} is {}, expected 1", row[i]));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("overlap ({i},{j}) = {v} outside [0,1]"));
                }
                if v != self.overlap[j][i] {
                    return bad(format!("overlap ({i},{j}) is not symmetric"));
                }
            }
        }
        Ok(())
    }

    /// Chooses a feature subset per task whose pairwise Jaccard overlaps equal
    /// the plan exactly.
    ///
    /// Without explicit subsets every task gets the same subset size `m`, and
    /// features are laid out as one block shared by all tasks (as large as the
    /// smallest pairwise intersection), one block per pair for the remaining
    /// intersection, and private features. The largest `m` for which all
    /// intersections are whole numbers and the layout fits in `input_dim` wins.
    pub fn realize(&self, input_dim: usize) -> Result<Vec<Vec<usize>>, TaskError> {
        self.validate()?;
        if let Some(sets) = &self.feature_sets {
            if sets.len() != self.overlap.len() {
                return Err(TaskError::InvalidPlan("one feature set per task required".into()));
            }
            for (i, s) in sets.iter().enumerate() {
                if s.is_empty() || s.iter().any(|&f| f >= input_dim) {
                    return Err(TaskError::InfeasiblePlan(format!(
                        "feature set {i} is empty or exceeds input_dim {input_dim}"
                    )));
                }
                for (j, t) in sets.iter().enumerate() {
                    if (jaccard(s, t) - self.overlap[i][j]).abs() > 1e-12 {
                        return Err(TaskError::InvalidPlan(format!(
                            "overlap ({i},{j}) disagrees with the given feature sets"
                        )));
                    }
                }
            }
            return Ok(sets.clone());
        }
        (1..=input_dim)
            .rev()
            .find_map(|m| self.layout(m, input_dim))
            .ok_or_else(|| {
                TaskError::InfeasiblePlan(format!(
                    "no uniform subset size fits the overlaps within {input_dim} features"
                ))
            })
    }

    fn layout(&self, m: usize, input_dim: usize) -> Option<Vec<Vec<usize>>> {
        let k = self.overlap.len();
        let mut shared = vec![vec![0usize; k]; k];
        for i in 0..k {
            for j in (i + 1)..k {
                let rho = self.overlap[i][j];
                let s = 2.0 * m as f64 * rho / (1.0 + rho);
                let r = libm::round(s);
                if (s - r).abs() > 1e-9 || r as usize > m {
                    return None;
                }
                shared[i][j] = r as usize;
                shared[j][i] = r as usize;
            }
        }
        let core = if k < 2 {
            m
        } else {
            (0..k)
                .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
                .map(|(i, j)| shared[i][j])
                .min()
                .unwrap()
        };
        let mut private = vec![0usize; k];
        for i in 0..k {
            let pairwise: usize = (0..k).filter(|&j| j != i).map(|j| shared[i][j] - core).sum();
            private[i] = m.checked_sub(core + pairwise)?;
        }
        let pair_total: usize = (0..k)
            .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
            .map(|(i, j)| shared[i][j] - core)
            .sum();
        if core + pair_total + private.iter().sum::<usize>() > input_dim {
            return None;
        }
        let mut sets: Vec<Vec<usize>> = vec![(0..core).collect(); k];
        let mut next = core;
        for i in 0..k {
            for j in (i + 1)..k {
                for _ in 0..shared[i][j] - core {
                    sets[i].push(next);
                    sets[j].push(next);
                    next += 1;
                }
            }
        }
        for (i, set) in sets.iter_mut().enumerate() {
            set.extend(next..next + private[i]);
            next += private[i];
            set.sort_unstable();
        }
        Some(sets)
    }
}

/// `|a ∩ b| / |a ∪ b|` for index sets without duplicates.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Sizes of the three data pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for PoolSizes {
    fn default() -> Self {
        Self {
            train: 256,
            val: 256,
            test: 1024,
        }
    }
}

/// Parameters of a planted teacher family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub input_dim: usize,
    pub plan: RelatednessPlan,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub sizes: PoolSizes,
    /// Each task draws its own inputs instead of sharing one stream.
    #[serde(default)]
    pub multi_domain: bool,
    /// Task names; defaults to `t0`, `t1`, ...
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub names: Vec<String>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Generates a planted teacher family; see the module docs.
pub fn gen_teacher_family(cfg: &TeacherConfig) -> Result<TaskFamily, TaskError> {
    let k = cfg.plan.num_tasks();
    if k < 2 {
        return Err(TaskError::InvalidPlan("a teacher family needs at least two tasks".into()));
    }
    if !(cfg.noise_std >= 0.0 && cfg.noise_std.is_finite()) {
        return Err(TaskError::InvalidFamily("noise_std must be finite and non-negative".into()));
    }
    if !cfg.names.is_empty() && cfg.names.len() != k {
        return Err(TaskError::InvalidFamily(format!("{} names for {k} tasks", cfg.names.len())));
    }
    let sizes = cfg.sizes;
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(TaskError::InvalidFamily("pool sizes must be positive".into()));
    }
    let feature_sets = cfg.plan.realize(cfg.input_dim)?;

    let mut trng = ChaCha8Rng::seed_from_u64(cfg.plan.teacher_seed);
    let weight = normal_tensor(&mut trng, cfg.input_dim, TEACHER_WIDTH);
    let bias: Vec<f64> = (0..TEACHER_WIDTH).map(|_| trng.random_range(-0.5..0.5)).collect();
    let readout: Vec<f64> = (0..TEACHER_WIDTH)
        .map(|_| StandardNormal.sample(&mut trng))
        .collect();
    let mut teacher = Teacher {
        feature_sets,
        weight,
        bias,
        readout,
        standardise: vec![(0.0, 1.0); k],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw_inputs = |rng: &mut ChaCha8Rng, n: usize| {
        if cfg.multi_domain {
            Inputs::PerTask((0..k).map(|_| normal_tensor(rng, n, cfg.input_dim)).collect())
        } else {
            Inputs::Shared(normal_tensor(rng, n, cfg.input_dim))
        }
    };
    let train_x = draw_inputs(&mut rng, sizes.train);
    let val_x = draw_inputs(&mut rng, sizes.val);
    let test_x = draw_inputs(&mut rng, sizes.test);

    let input_of = |inputs: &Inputs, t: usize| -> Tensor {
        match inputs {
            Inputs::Shared(x) => x.clone(),
            Inputs::PerTask(xs) => xs[t].clone(),
        }
    };

    // Standardise with training-pool statistics of the raw teacher output.
    for t in 0..k {
        let x = input_of(&train_x, t);
        let raw: Vec<f64> = (0..x.rows()).map(|r| teacher.target(t, x.row(r))).collect();
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = libm::sqrt(var);
        teacher.standardise[t] = (mean, if std > 1e-12 { std } else { 1.0 });
    }

    let make_pool = |inputs: Inputs, rng: &mut ChaCha8Rng| -> Pool {
        let targets = (0..k)
            .map(|t| {
                let x = input_of(&inputs, t);
                let data = (0..x.rows())
                    .map(|r| {
                        let eps: f64 = StandardNormal.sample(rng);
                        teacher.target(t, x.row(r)) + cfg.noise_std * eps
                    })
                    .collect();
                Tensor::from_parts(vec![x.rows(), 1], data)
            })
            .collect();
        Pool { inputs, targets }
    };
    let train = make_pool(train_x, &mut rng);
    let val = make_pool(val_x, &mut rng);
    let test = make_pool(test_x, &mut rng);

    let tasks = (0..k)
        .map(|t| {
            let name = cfg.names.get(t).cloned().unwrap_or_else(|| format!("t{t}"));
            TaskInfo::regression(&name, 1)
        })
        .collect();
    Ok(TaskFamily {
        tasks,
        input_dim: cfg.input_dim,
        train,
        val,
        test,
        teacher: Some(teacher),
    })
}

/// Appends a noise-prediction task: every sample gets a fixed target drawn
/// from `U[0,1)^NOISE_DIM`, trained with MSE. Multi-domain families give the
/// noise task its own standard-normal inputs.
pub fn add_noise_task(family: &TaskFamily, seed: u64) -> TaskFamily {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = family.clone();
    for pool in [&mut out.train, &mut out.val, &mut out.test] {
        let n = pool.len_for(0);
        if let Inputs::PerTask(xs) = &mut pool.inputs {
            xs.push(normal_tensor(&mut rng, n, family.input_dim));
        }
        let data = (0..n * NOISE_DIM).map(|_| rng.random::<f64>()).collect();
        pool.targets.push(Tensor::from_parts(vec![n, NOISE_DIM], data));
    }
    out.tasks.push(TaskInfo {
        role: TaskRole::Noise,
        ..TaskInfo::regression("noise", NOISE_DIM)
    });
    if let Some(t) = &mut out.teacher {
        t.feature_sets.push(Vec::new());
        t.standardise.push((0.0, 1.0));
    }
    out
}

/// How the validation half of a batch pair is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Two disjoint batches of the training pool.
    Swap,
    /// Validation batch from the held-out validation pool.
    DisjointSplit,
    /// Validation batch identical to the training batch.
    NoSwap,
}

/// Training batches for every task and validation batches for the primary
/// tasks of one outer iteration.
#[derive(Clone, Debug)]
pub struct BatchPair {
    pub train: Vec<Option<Batch>>,
    pub val: Vec<Option<Batch>>,
    /// Row indices used per task, into the training pool.
    pub train_rows: Vec<Vec<usize>>,
    /// Row indices used per primary task, into the pool named by `val_pool`.
    pub val_rows: Vec<Option<Vec<usize>>>,
    pub val_pool: PoolKind,
}

/// Draws a [`BatchPair`]. Single-domain families use one set of rows for all
/// tasks; multi-domain families draw rows per task.
pub fn sample_batch_pair<R: Rng + ?Sized>(
    family: &TaskFamily,
    batch_size: usize,
    mode: PairMode,
    primary: &[usize],
    rng: &mut R,
) -> Result<BatchPair, TaskError> {
    if primary.is_empty() {
        return Err(TaskError::EmptyPrimarySet);
    }
    let k = family.num_tasks();
    if let Some(&bad) = primary.iter().find(|&&p| p >= k) {
        return Err(TaskError::UnknownTask(bad));
    }
    if batch_size == 0 {
        return Err(TaskError::PoolExhausted {
            requested: 0,
            available: family.train.len_for(0),
        });
    }

    let draw = |rng: &mut R, task: usize| -> Result<(Vec<usize>, Option<Vec<usize>>), TaskError> {
        let n = family.train.len_for(task);
        match mode {
            PairMode::Swap => {
                if 2 * batch_size > n {
                    return Err(TaskError::PoolExhausted {
                        requested: 2 * batch_size,
                        available: n,
                    });
                }
                let rows = index::sample(rng, n, 2 * batch_size).into_vec();
                Ok((rows[..batch_size].to_vec(), Some(rows[batch_size..].to_vec())))
            }
            PairMode::NoSwap => {
                if batch_size > n {
                    return Err(TaskError::PoolExhausted {
                        requested: batch_size,
                        available: n,
                    });
                }
                let rows = index::sample(rng, n, batch_size).into_vec();
                Ok((rows.clone(), Some(rows)))
            }
            PairMode::DisjointSplit => {
                let nv = family.val.len_for(task);
                if batch_size > n || batch_size > nv {
                    return Err(TaskError::PoolExhausted {
                        requested: batch_size,
                        available: n.min(nv),
                    });
                }
                let rows = index::sample(rng, n, batch_size).into_vec();
                let vrows = index::sample(rng, nv, batch_size).into_vec();
                Ok((rows, Some(vrows)))
            }
        }
    };

    let mut train_rows = Vec::with_capacity(k);
    let mut val_rows = Vec::with_capacity(k);
    if family.is_single_domain() {
        let (t, v) = draw(rng, 0)?;
        for task in 0..k {
            train_rows.push(t.clone());
            val_rows.push(primary.contains(&task).then(|| v.clone()).flatten());
        }
    } else {
        for task in 0..k {
            let (t, v) = draw(rng, task)?;
            train_rows.push(t);
            val_rows.push(if primary.contains(&task) { v } else { None });
        }
    }

    let val_pool = match mode {
        PairMode::DisjointSplit => PoolKind::Val,
        _ => PoolKind::Train,
    };
    let train = (0..k).map(|t| Some(family.train.batch(t, &train_rows[t]))).collect();
    let vp = family.pool(val_pool);
    let val = val_rows
        .iter()
        .enumerate()
        .map(|(t, rows)| rows.as_ref().map(|r| vp.batch(t, r)))
        .collect();
    Ok(BatchPair {
        train,
        val,
        train_rows,
        val_rows,
        val_pool,
    })
}

/// Test-pool MSE of predicting the clean target of `target_task` by ridge
/// regression on the teacher features of `source_task`, fitted on the
/// training pool. Lower means `source_task` carries more of what
/// `target_task` needs.
pub fn transfer_probe_error(
    family: &TaskFamily,
    source_task: usize,
    target_task: usize,
    ridge: f64,
) -> Result<f64, TaskError> {
    let teacher = family
        .teacher
        .as_ref()
        .ok_or_else(|| TaskError::InvalidFamily("family has no teacher".into()))?;
    for t in [source_task, target_task] {
        if t >= family.num_tasks() || teacher.feature_sets[t].is_empty() {
            return Err(TaskError::UnknownTask(t));
        }
    }
    let design = |pool: &Pool| -> (Vec<[f64; TEACHER_WIDTH + 1]>, Vec<f64>) {
        let xs = pool.inputs_for(source_task);
        let xt = pool.inputs_for(target_task);
        (0..xs.rows())
            .map(|r| {
                let h = teacher.features(source_task, xs.row(r));
                let mut row = [1.0; TEACHER_WIDTH + 1];
                row[..TEACHER_WIDTH].copy_from_slice(&h);
                (row, teacher.target(target_task, xt.row(r)))
            })
            .unzip()
    };
    let (a, y) = design(&family.train);
    const D: usize = TEACHER_WIDTH + 1;
    let mut gram = [[0.0; D]; D];
    let mut rhs = [0.0; D];
    for (row, &yv) in a.iter().zip(&y) {
        for i in 0..D {
            rhs[i] += row[i] * yv;
            for j in 0..D {
                gram[i][j] += row[i] * row[j];
            }
        }
    }
    for (i, g) in gram.iter_mut().enumerate() {
        g[i] += ridge;
    }
    let coef = solve_spd(gram, rhs);
    let (at, yt) = design(&family.test);
    let mse = at
        .iter()
        .zip(&yt)
        .map(|(row, &yv)| {
            let p: f64 = row.iter().zip(&coef).map(|(a, c)| a * c).sum();
            (p - yv) * (p - yv)
        })
        .sum::<f64>()
        / yt.len() as f64;
    Ok(mse)
}

/// Gaussian elimination with partial pivoting for a small dense system.
fn solve_spd<const D: usize>(mut a: [[f64; D]; D], mut b: [f64; D]) -> [f64; D] {
    for col in 0..D {
        let pivot = (col..D)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in (col + 1)..D {
            let f = a[r][col] / a[col][col];
            for c in col..D {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; D];
    for r in (0..D).rev() {
        let s: f64 = ((r + 1)..D).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan3(r12: f64, r13: f64, r23: f64) -> RelatednessPlan {
        RelatednessPlan {
            overlap: vec![
                vec![1.0, r12, r13],
                vec![r12, 1.0, r23],
                vec![r13, r23, 1.0],
            ],
            teacher_seed: 11,
            feature_sets: None,
        }
    }

    fn cfg(plan: RelatednessPlan, input_dim: usize) -> TeacherConfig {
        TeacherConfig {
            input_dim,
            plan,
            noise_std: 0.1,
            seed: 5,
            sizes: PoolSizes {
                train: 64,
                val: 32,
                test: 32,
            },
            multi_domain: false,
            names: Vec::new(),
        }
    }

    #[test]
    fn full_overlap_shares_one_feature_set() {
        let sets = plan3(1.0, 1.0, 1.0).realize(10).unwrap();
        assert_eq!(sets[0], sets[1]);
        assert_eq!(sets[1], sets[2]);
        assert_eq!(sets[0].len(), 10);
    }

    #[test]
    fn zero_overlap_gives_disjoint_sets() {
        let sets = plan3(0.0, 0.0, 0.0).realize(12).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(sets[i].iter().all(|f| !sets[j].contains(f)));
                }
            }
        }
    }

    #[test]
    fn planted_overlaps_are_exact() {
        let plan = plan3(0.8, 0.2, 0.2);
        let sets = plan.realize(24).unwrap();
        assert_eq!(jaccard(&sets[0], &sets[1]), 0.8);
        assert_eq!(jaccard(&sets[0], &sets[2]), 0.2);
        assert_eq!(jaccard(&sets[1], &sets[2]), 0.2);
    }

    #[test]
    fn infeasible_and_invalid_plans() {
        assert!(matches!(
            plan3(0.8, 0.2, 0.2).realize(5),
            Err(TaskError::InfeasiblePlan(_))
        ));
        let mut asym = plan3(0.5, 0.5, 0.5);
        asym.overlap[0][1] = 0.4;
        assert!(matches!(asym.realize(20), Err(TaskError::InvalidPlan(_))));
        let mut diag = plan3(0.5, 0.5, 0.5);
        diag.overlap[2][2] = 0.9;
        assert!(matches!(diag.validate(), Err(TaskError::InvalidPlan(_))));
    }

    #[test]
    fn explicit_feature_sets_round_trip() {
        let plan = RelatednessPlan::from_feature_sets(vec![vec![0, 1], vec![0, 1, 2, 3]], 1);
        assert_eq!(plan.overlap[0][1], 0.5);
        assert_eq!(plan.realize(4).unwrap()[1], vec![0, 1, 2, 3]);
        assert!(plan.realize(3).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let c = cfg(plan3(0.5, 0.5, 0.5), 12);
        let a = gen_teacher_family(&c).unwrap();
        let b = gen_teacher_family(&c).unwrap();
        assert_eq!(a, b);
        assert!(a.is_single_domain());
        assert_eq!(a.pool(PoolKind::Train).targets[0].shape(), &[64, 1]);
    }

    #[test]
    fn noise_task_is_fixed_per_sample() {
        let fam = add_noise_task(&gen_teacher_family(&cfg(plan3(0.5, 0.5, 0.5), 12)).unwrap(), 9);
        assert_eq!(fam.num_tasks(), 4);
        let info = &fam.tasks()[3];
        assert!(info.lower_is_better);
        assert_eq!(info.role, TaskRole::Noise);
        let pool = fam.pool(PoolKind::Train);
        assert_eq!(pool.batch(3, &[7]), pool.batch(3, &[7]));
        assert!(pool.targets[3].data().iter().all(|&v| (0.0..1.0).contains(&v)));
        assert_eq!(fam.real_tasks(), vec![0, 1, 2]);
    }

    #[test]
    fn pair_modes() {
        let fam = gen_teacher_family(&cfg(plan3(0.5, 0.5, 0.5), 12)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let swap = sample_batch_pair(&fam, 8, PairMode::Swap, &[0], &mut rng).unwrap();
        let v = swap.val_rows[0].as_ref().unwrap();
        assert!(swap.train_rows[0].iter().all(|r| !v.contains(r)));
        assert!(swap.val[1].is_none() && swap.val[2].is_none());
        assert_eq!(swap.train_rows[0], swap.train_rows[2]);

        let same = sample_batch_pair(&fam, 8, PairMode::NoSwap, &[0, 1], &mut rng).unwrap();
        assert_eq!(Some(&same.train_rows[1]), same.val_rows[1].as_ref());

        let split = sample_batch_pair(&fam, 8, PairMode::DisjointSplit, &[2], &mut rng).unwrap();
        assert_eq!(split.val_pool, PoolKind::Val);

        assert!(matches!(
            sample_batch_pair(&fam, 40, PairMode::Swap, &[0], &mut rng),
            Err(TaskError::PoolExhausted { .. })
        ));
        assert!(matches!(
            sample_batch_pair(&fam, 4, PairMode::Swap, &[], &mut rng),
            Err(TaskError::EmptyPrimarySet)
        ));
    }

    #[test]
    fn multi_domain_val_only_for_primaries() {
        let mut c = cfg(plan3(0.5, 0.5, 0.5), 12);
        c.multi_domain = true;
        let fam = gen_teacher_family(&c).unwrap();
        assert!(!fam.is_single_domain());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = sample_batch_pair(&fam, 4, PairMode::Swap, &[1], &mut rng).unwrap();
        assert!(pair.val[0].is_none() && pair.val[2].is_none());
        assert_eq!(
            pair.val[1].as_ref().unwrap().x,
            fam.pool(PoolKind::Train).inputs_for(1).select_rows(pair.val_rows[1].as_ref().unwrap())
        );
    }

    #[test]
    fn classify_makes_balanced_labels() {
        let fam = gen_teacher_family(&cfg(plan3(0.5, 0.5, 0.5), 12)).unwrap();
        let fam = fam.classify(1, 4).unwrap();
        let info = &fam.tasks()[1];
        assert_eq!(info.loss, LossKind::SoftmaxCe);
        assert!(!info.lower_is_better);
        let labels = fam.pool(PoolKind::Train).targets[1].data();
        for c in 0..4 {
            let n = labels.iter().filter(|&&l| l == c as f64).count();
            assert_eq!(n, 16);
        }
        assert!(fam.clone().classify(1, 3).is_err());
        assert!(fam.classify(0, 6).is_err());
    }
}
