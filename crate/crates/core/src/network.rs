//! Hard-parameter-sharing multi-task MLP.
//!
//! A shared trunk maps inputs to a representation that every task head reads.
//! Parameters live in a flat registry whose index is the [`ParamId`]; each
//! entry belongs to exactly one [`ParamGroup`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, NodeId, ParamId, Tape, TapeOptions};
use crate::error::NetworkError;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    /// Hidden widths between the trunk and the output layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Output width; the number of classes for cross-entropy heads.
    pub output_dim: usize,
    pub loss: LossKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub trunk_layers: Vec<usize>,
    pub heads: Vec<HeadSpec>,
    pub activation: Activation,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::InvalidSpec(String::from(m)));
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1");
        }
        if self.heads.is_empty() {
            return bad("at least one task head is required");
        }
        if self.trunk_layers.contains(&0) {
            return bad("trunk widths must be at least 1");
        }
        for h in &self.heads {
            if h.output_dim == 0 || h.hidden.contains(&0) {
                return bad("head widths must be at least 1");
            }
            if h.loss == LossKind::SoftmaxCe && h.output_dim < 2 {
                return bad("cross-entropy heads need at least two classes");
            }
        }
        Ok(())
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Shared,
    Task(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub id: ParamId,
    pub group: ParamGroup,
    pub name: String,
    pub shape: Vec<usize>,
}

/// A frozen set of parameter values, indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    values: Vec<Tensor>,
}

impl ParamSnapshot {
    /// Values in [`ParamId`] order.
    pub fn from_values(values: Vec<Tensor>) -> Self {
        Self { values }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.values.get(id.0 as usize)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self + scale * direction`; fails if `direction` lacks a parameter.
    pub fn offset(&self, direction: &GradientMap, scale: f64) -> Result<ParamSnapshot, NetworkError> {
        let mut values = self.values.clone();
        for (i, v) in values.iter_mut().enumerate() {
            let id = ParamId(i as u32);
            let d = direction.get(id).ok_or(NetworkError::MissingDirection(id))?;
            v.axpy(scale, d);
        }
        Ok(ParamSnapshot { values })
    }
}

/// Inputs and targets for one task. Regression targets are `[n, out]`,
/// classification targets are `[n]` class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
}

/// Result of a weighted multi-task backward pass.
#[derive(Clone, Debug)]
pub struct WeightedGrad {
    pub grads: GradientMap,
    /// Unweighted per-task losses; `None` where no batch was given.
    pub losses: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
pub struct MultiTaskNet {
    spec: NetworkSpec,
    registry: Vec<ParamInfo>,
    trunk: Vec<Layer>,
    heads: Vec<Vec<Layer>>,
    params: ParamSnapshot,
    tape_options: TapeOptions,
}

impl MultiTaskNet {
    /// Builds the network and draws every weight and bias uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` with a generator seeded by `spec.seed`.
    pub fn build(spec: NetworkSpec) -> Result<Self, NetworkError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut registry = Vec::new();
        let mut values = Vec::new();
        let mut add_layer = |name: String, group: ParamGroup, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            let mut draw = |shape: Vec<usize>, suffix: &str| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                let id = ParamId(registry.len() as u32);
                registry.push(ParamInfo {
                    id,
                    group,
                    name: format!("{name}.{suffix}"),
                    shape: shape.clone(),
                });
                values.push(Tensor::from_parts(shape, data));
                id.0 as usize
            };
            let weight = draw(vec![fan_in, fan_out], "weight");
            let bias = draw(vec![fan_out], "bias");
            Layer { weight, bias }
        };

        let mut width = spec.input_dim;
        let mut trunk = Vec::new();
        for (l, &w) in spec.trunk_layers.iter().enumerate() {
            trunk.push(add_layer(format!("trunk.{l}"), ParamGroup::Shared, width, w));
            width = w;
        }
        let mut heads = Vec::new();
        for (t, head) in spec.heads.iter().enumerate() {
            let mut layers = Vec::new();
            let mut w_in = width;
            for (l, &w) in head.hidden.iter().chain(core::iter::once(&head.output_dim)).enumerate() {
                layers.push(add_layer(format!("head{t}.{l}"), ParamGroup::Task(t), w_in, w));
                w_in = w;
            }
            heads.push(layers);
        }
        Ok(Self {
            spec,
            registry,
            trunk,
            heads,
            params: ParamSnapshot { values },
            tape_options: TapeOptions::default(),
        })
    }

    /// Enables or disables NaN/Inf screening on the tapes this network builds.
    pub fn set_check_finite(&mut self, on: bool) {
        self.tape_options.check_finite = on;
    }

    pub fn new_tape(&self) -> Tape {
        Tape::with_options(self.tape_options)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn registry(&self) -> &[ParamInfo] {
        &self.registry
    }

    pub fn param_count(&self) -> usize {
        self.params.values.iter().map(Tensor::len).sum()
    }

    pub fn params(&self) -> &ParamSnapshot {
        &self.params
    }

    pub fn loss_kind(&self, task: usize) -> Option<LossKind> {
        self.spec.heads.get(task).map(|h| h.loss)
    }

    pub fn is_shared(&self, id: ParamId) -> bool {
        matches!(
            self.registry.get(id.0 as usize).map(|p| p.group),
            Some(ParamGroup::Shared)
        )
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        self.params.clone()
    }

    pub fn restore(&mut self, snapshot: &ParamSnapshot) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot from another network");
        self.params = snapshot.clone();
    }

    /// Registers every parameter of `at` on `tape`, in id order.
    pub fn bind(&self, tape: &mut Tape, at: &ParamSnapshot) -> Result<Vec<NodeId>, NetworkError> {
        at.values
            .iter()
            .enumerate()
            .map(|(i, v)| Ok(tape.param(ParamId(i as u32), v.clone())?))
            .collect()
    }

    fn dense(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        layer: Layer,
        input: NodeId,
        activate: bool,
    ) -> Result<NodeId, NetworkError> {
        let z = tape.matmul(input, bound[layer.weight])?;
        let z = tape.add(z, bound[layer.bias])?;
        let out = match (activate, self.spec.activation) {
            (false, _) => z,
            (true, Activation::Tanh) => tape.tanh(z)?,
            (true, Activation::Relu) => tape.relu(z)?,
        };
        Ok(out)
    }

    /// Shared representation of `x`.
    pub fn trunk_forward(&self, tape: &mut Tape, bound: &[NodeId], x: NodeId) -> Result<NodeId, NetworkError> {
        let mut h = x;
        for &layer in &self.trunk {
            h = self.dense(tape, bound, layer, h, true)?;
        }
        Ok(h)
    }

    /// Head output for `task` given the trunk representation.
    pub fn head_forward(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        task: usize,
        features: NodeId,
    ) -> Result<NodeId, NetworkError> {
        let layers = self.heads.get(task).ok_or(NetworkError::UnknownTask(task))?;
        let mut h = features;
        for (l, &layer) in layers.iter().enumerate() {
            h = self.dense(tape, bound, layer, h, l + 1 < layers.len())?;
        }
        Ok(h)
    }

    fn check_batch(&self, task: usize, batch: &Batch) -> Result<(), NetworkError> {
        let head = self.spec.heads.get(task).ok_or(NetworkError::UnknownTask(task))?;
        let mismatch = |detail: String| Err(NetworkError::ShapeMismatch { task, detail });
        let xs = batch.x.shape();
        if xs.len() != 2 || xs[1] != self.spec.input_dim {
            return mismatch(format!("input {:?}, expected [n, {}]", xs, self.spec.input_dim));
        }
        let ys = batch.y.shape();
        let ok = match head.loss {
            LossKind::Mse => ys == [xs[0], head.output_dim],
            LossKind::SoftmaxCe => ys == [xs[0]],
        };
        if !ok {
            return mismatch(format!("target {:?} for {} inputs", ys, xs[0]));
        }
        Ok(())
    }

    /// Unweighted loss of `task` on `batch`, recorded on `tape`.
    pub fn task_loss(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        task: usize,
        batch: &Batch,
    ) -> Result<NodeId, NetworkError> {
        self.check_batch(task, batch)?;
        let x = tape.constant(batch.x.clone());
        let h = self.trunk_forward(tape, bound, x)?;
        self.loss_from_features(tape, bound, task, h, batch)
    }

    fn loss_from_features(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        task: usize,
        features: NodeId,
        batch: &Batch,
    ) -> Result<NodeId, NetworkError> {
        let out = self.head_forward(tape, bound, task, features)?;
        let y = tape.constant(batch.y.clone());
        let loss = match self.spec.heads[task].loss {
            LossKind::Mse => tape.mse_loss(out, y)?,
            LossKind::SoftmaxCe => tape.softmax_cross_entropy(out, y)?,
        };
        Ok(loss)
    }

    /// Records the loss of every task that has a batch. Tasks fed the same
    /// input tensor share one trunk pass.
    pub fn all_task_losses(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        batches: &[Option<Batch>],
    ) -> Result<Vec<Option<NodeId>>, NetworkError> {
        if batches.len() != self.num_tasks() {
            return Err(NetworkError::WeightCount {
                expected: self.num_tasks(),
                got: batches.len(),
            });
        }
        let mut cached: Option<(&Tensor, NodeId)> = None;
        let mut out = Vec::with_capacity(batches.len());
        for (task, batch) in batches.iter().enumerate() {
            let Some(batch) = batch else {
                out.push(None);
                continue;
            };
            self.check_batch(task, batch)?;
            let features = match cached {
                Some((x, h)) if *x == batch.x => h,
                _ => {
                    let x = tape.constant(batch.x.clone());
                    let h = self.trunk_forward(tape, bound, x)?;
                    cached = Some((&batch.x, h));
                    h
                }
            };
            out.push(Some(self.loss_from_features(tape, bound, task, features, batch)?));
        }
        Ok(out)
    }

    /// Forward-only per-task losses at `at`.
    pub fn losses_at(
        &self,
        at: &ParamSnapshot,
        batches: &[Option<Batch>],
    ) -> Result<Vec<Option<f64>>, NetworkError> {
        let mut tape = self.new_tape();
        let bound = self.bind(&mut tape, at)?;
        let nodes = self.all_task_losses(&mut tape, &bound, batches)?;
        nodes
            .into_iter()
            .map(|n| n.map(|n| tape.scalar_value(n)).transpose().map_err(Into::into))
            .collect()
    }

    /// Gradient of `sum_i weights[i] * L_i` at `at`. Tasks without a batch
    /// contribute nothing regardless of their weight.
    pub fn weighted_grad_at(
        &self,
        at: &ParamSnapshot,
        batches: &[Option<Batch>],
        weights: &[f64],
    ) -> Result<WeightedGrad, NetworkError> {
        if weights.len() != self.num_tasks() {
            return Err(NetworkError::WeightCount {
                expected: self.num_tasks(),
                got: weights.len(),
            });
        }
        let mut tape = self.new_tape();
        let bound = self.bind(&mut tape, at)?;
        let nodes = self.all_task_losses(&mut tape, &bound, batches)?;
        let mut total: Option<NodeId> = None;
        let mut losses = Vec::with_capacity(nodes.len());
        for (node, &w) in nodes.iter().zip(weights) {
            let Some(node) = *node else {
                losses.push(None);
                continue;
            };
            losses.push(Some(tape.scalar_value(node)?));
            let term = tape.scale(node, w)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let grads = match total {
            Some(total) => tape.backward(total)?,
            None => zero_grads(at),
        };
        Ok(WeightedGrad { grads, losses })
    }

    /// Gradient of `sum_i weights[i] * L_i` at the current parameters.
    pub fn weighted_multi_task_grad(
        &self,
        batches: &[Option<Batch>],
        weights: &[f64],
    ) -> Result<WeightedGrad, NetworkError> {
        self.weighted_grad_at(&self.params, batches, weights)
    }

    /// Separate gradients for each task that has a batch.
    pub fn task_grads_at(
        &self,
        at: &ParamSnapshot,
        batches: &[Option<Batch>],
    ) -> Result<Vec<Option<(f64, GradientMap)>>, NetworkError> {
        let k = self.num_tasks();
        (0..k)
            .map(|task| {
                if batches.get(task).and_then(Option::as_ref).is_none() {
                    return Ok(None);
                }
                let mut w = vec![0.0; k];
                w[task] = 1.0;
                let only: Vec<Option<Batch>> = batches
                    .iter()
                    .enumerate()
                    .map(|(i, b)| if i == task { b.clone() } else { None })
                    .collect();
                let g = self.weighted_grad_at(at, &only, &w)?;
                Ok(Some((g.losses[task].unwrap_or(0.0), g.grads)))
            })
            .collect()
    }

    /// Raw head outputs for `task` on `x` at the current parameters.
    pub fn predict(&self, task: usize, x: &Tensor) -> Result<Tensor, NetworkError> {
        let mut tape = self.new_tape();
        let bound = self.bind(&mut tape, &self.params)?;
        let xn = tape.constant(x.clone());
        let h = self.trunk_forward(&mut tape, &bound, xn)?;
        let out = self.head_forward(&mut tape, &bound, task, h)?;
        Ok(tape.value(out)?.clone())
    }

    /// Plain SGD update in place: `theta -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &GradientMap, lr: f64) {
        for (id, g) in grads.iter() {
            if let Some(p) = self.params.values.get_mut(id.0 as usize) {
                p.axpy(-lr, g);
            }
        }
    }

    /// The parameters a plain SGD step would produce, leaving `self` as is.
    pub fn virtual_step(&self, grads: &GradientMap, lr: f64) -> ParamSnapshot {
        let mut values = self.params.values.clone();
        for (id, g) in grads.iter() {
            if let Some(p) = values.get_mut(id.0 as usize) {
                p.axpy(-lr, g);
            }
        }
        ParamSnapshot { values }
    }

    /// `(theta + eps * direction, theta - eps * direction)`.
    pub fn perturb(
        &self,
        direction: &GradientMap,
        eps: f64,
    ) -> Result<(ParamSnapshot, ParamSnapshot), NetworkError> {
        Ok((
            self.params.offset(direction, eps)?,
            self.params.offset(direction, -eps)?,
        ))
    }

    /// Applies an optimizer step to every parameter that has a gradient.
    pub fn apply(&mut self, opt: &mut Sgd, grads: &GradientMap) {
        for (id, g) in grads.iter() {
            if let Some(p) = self.params.values.get_mut(id.0 as usize) {
                opt.update(id, p, g);
            }
        }
    }
}

pub(crate) fn zero_grads(at: &ParamSnapshot) -> GradientMap {
    let mut g = GradientMap::new();
    for (i, v) in at.values.iter().enumerate() {
        g.insert(ParamId(i as u32), Tensor::zeros(v.shape()));
    }
    g
}

/// SGD with optional heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: alloc::collections::BTreeMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Default::default(),
        }
    }

    pub fn update(&mut self, id: ParamId, param: &mut Tensor, grad: &Tensor) {
        let mut step = grad.clone();
        if self.weight_decay != 0.0 {
            step.axpy(self.weight_decay, param);
        }
        if self.momentum != 0.0 {
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for (vi, si) in v.data_mut().iter_mut().zip(step.data()) {
                *vi = self.momentum * *vi + si;
            }
            step = v.clone();
        }
        param.axpy(-self.lr, &step);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(k: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim: 4,
            trunk_layers: vec![8],
            heads: (0..k)
                .map(|_| HeadSpec {
                    hidden: vec![],
                    output_dim: 1,
                    loss: LossKind::Mse,
                })
                .collect(),
            activation: Activation::Tanh,
            seed: 3,
        }
    }

    fn batch(n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Batch {
            x: Tensor::new(vec![n, 4], x).unwrap(),
            y: Tensor::new(vec![n, 1], y).unwrap(),
        }
    }

    #[test]
    fn registry_groups_are_disjoint() {
        let net = MultiTaskNet::build(spec(2)).unwrap();
        let groups: Vec<_> = net.registry().iter().map(|p| p.group).collect();
        assert_eq!(
            groups,
            vec![
                ParamGroup::Shared,
                ParamGroup::Shared,
                ParamGroup::Task(0),
                ParamGroup::Task(0),
                ParamGroup::Task(1),
                ParamGroup::Task(1)
            ]
        );
        let net20 = MultiTaskNet::build(spec(20)).unwrap();
        let mut distinct: Vec<ParamGroup> = Vec::new();
        for p in net20.registry() {
            if !distinct.contains(&p.group) {
                distinct.push(p.group);
            }
        }
        assert_eq!(distinct.len(), 21);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = MultiTaskNet::build(spec(2)).unwrap();
        let b = MultiTaskNet::build(spec(2)).unwrap();
        assert_eq!(a.params(), b.params());
        let w = a.params().get(ParamId(0)).unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.5));
        let mut other = spec(2);
        other.seed = 4;
        assert_ne!(MultiTaskNet::build(other).unwrap().params(), a.params());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(1);
        s.heads.clear();
        assert!(matches!(MultiTaskNet::build(s), Err(NetworkError::InvalidSpec(_))));
        let mut s = spec(1);
        s.trunk_layers = vec![0];
        assert!(MultiTaskNet::build(s).is_err());
    }

    #[test]
    fn task_loss_errors() {
        let net = MultiTaskNet::build(spec(2)).unwrap();
        let mut tape = net.new_tape();
        let bound = net.bind(&mut tape, net.params()).unwrap();
        assert!(matches!(
            net.task_loss(&mut tape, &bound, 5, &batch(3, 1)),
            Err(NetworkError::UnknownTask(5))
        ));
        let mut bad = batch(3, 1);
        bad.y = Tensor::zeros(&[2, 1]);
        assert!(matches!(
            net.task_loss(&mut tape, &bound, 0, &bad),
            Err(NetworkError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sgd_arithmetic_and_virtual_isolation() {
        let mut net = MultiTaskNet::build(spec(1)).unwrap();
        let before = net.snapshot();
        let g = net
            .weighted_multi_task_grad(&[Some(batch(5, 2))], &[1.0])
            .unwrap()
            .grads;
        let virt = net.virtual_step(&g, 0.1);
        assert_eq!(net.params(), &before);
        net.sgd_step(&g, 0.1);
        assert_eq!(net.params(), &virt);
        net.restore(&before);
        assert_eq!(net.params(), &before);

        let mut p = Tensor::scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        opt.update(ParamId(0), &mut p, &Tensor::scalar(2.0));
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut net = MultiTaskNet::build(spec(1)).unwrap();
        let before = net.snapshot();
        let z = zero_grads(&before);
        net.sgd_step(&z, 0.5);
        assert_eq!(net.params(), &before);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = Sgd::new(1.0, 0.9, 0.0);
        opt.update(ParamId(0), &mut p, &Tensor::scalar(1.0));
        opt.update(ParamId(0), &mut p, &Tensor::scalar(1.0));
        assert!((p.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn perturb_requires_full_direction() {
        let net = MultiTaskNet::build(spec(1)).unwrap();
        let mut partial = GradientMap::new();
        partial.insert(ParamId(0), Tensor::zeros(&[4, 8]));
        assert!(matches!(
            net.perturb(&partial, 0.1),
            Err(NetworkError::MissingDirection(ParamId(1)))
        ));
        let zero = zero_grads(net.params());
        let (plus, minus) = net.perturb(&zero, 0.1).unwrap();
        assert_eq!(&plus, net.params());
        assert_eq!(&minus, net.params());
    }
}
