//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to its nodes in execution
//! order. Because a node can only be created from nodes that already exist,
//! the record is topologically sorted by construction and [`Tape::backward`]
//! is a single reverse sweep.
//!
//! ```
//! use autolambda_core::autodiff::{ParamId, Tape};
//! use autolambda_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let p = tape.param(ParamId(0), Tensor::vector(&[1.0, 1.0]).unwrap()).unwrap();
//! let y = tape.scale(p, 3.0).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[3.0, 3.0]);
//! ```

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::AutodiffError;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Stable identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

/// The primitive operations a tape can record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    /// `[n,k] x [k,m] -> [n,m]`
    MatMul,
    /// Same-shape addition, or `[n,m] + [m]` bias broadcast.
    Add,
    /// Same-shape elementwise product.
    Mul,
    Tanh,
    Relu,
    Exp,
    /// Mean squared error over all elements of two equally shaped inputs.
    MseLoss,
    /// Mean over rows of `-log softmax(logits)[class]`; the target holds class
    /// indices, one per row.
    SoftmaxCrossEntropy,
    Scale(f64),
    Sum,
}

impl OpKind {
    fn arity(self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Mul
            | OpKind::MseLoss
            | OpKind::SoftmaxCrossEntropy => 2,
            OpKind::Tanh | OpKind::Relu | OpKind::Exp | OpKind::Scale(_) | OpKind::Sum => 1,
        }
    }

    fn same_variant(self, other: OpKind) -> bool {
        core::mem::discriminant(&self) == core::mem::discriminant(&other)
    }
}

#[derive(Clone, Debug)]
enum Origin {
    Constant,
    Param,
    Op { kind: OpKind, inputs: [usize; 2] },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    /// Softmax probabilities kept from the forward pass of a cross-entropy node.
    cache: Option<Tensor>,
}

/// Recording options for a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeOptions {
    /// Reject any op whose output contains NaN or infinity.
    pub check_finite: bool,
}

impl Default for TapeOptions {
    fn default() -> Self {
        Self {
            check_finite: cfg!(debug_assertions),
        }
    }
}

/// An append-only record of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, usize>,
    options: TapeOptions,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_options(TapeOptions::default())
    }

    pub fn with_options(options: TapeOptions) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
            options,
            fault: None,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupts the local backward rule of every op of the given kind.
    /// Exists so gradient checks can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, origin: Origin, cache: Option<Tensor>) -> NodeId {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            origin,
            cache,
        });
        NodeId {
            tape: self.id,
            index,
        }
    }

    fn resolve(&self, node: NodeId) -> Result<usize, AutodiffError> {
        if node.tape != self.id || node.index >= self.nodes.len() {
            return Err(AutodiffError::DetachedNode);
        }
        Ok(node.index)
    }

    /// Records a value that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Origin::Constant, None)
    }

    /// Registers a trainable parameter. Each id may appear once per tape.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Result<NodeId, AutodiffError> {
        if self.params.contains_key(&id) {
            return Err(AutodiffError::DuplicateParam(id));
        }
        let node = self.push(value, Origin::Param, None);
        self.params.insert(id, node.index);
        Ok(node)
    }

    pub fn value(&self, node: NodeId) -> Result<&Tensor, AutodiffError> {
        let i = self.resolve(node)?;
        Ok(&self.nodes[i].value)
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, node: NodeId) -> Result<f64, AutodiffError> {
        self.value(node)?.item().ok_or(AutodiffError::NotScalar)
    }

    /// Applies `kind` to `inputs` and appends the result to the tape.
    pub fn record(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if inputs.len() != kind.arity() {
            return Err(AutodiffError::Arity {
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        let a = self.resolve(inputs[0])?;
        let b = if kind.arity() == 2 {
            self.resolve(inputs[1])?
        } else {
            a
        };
        let (value, cache) = forward(kind, &self.nodes[a].value, &self.nodes[b].value)?;
        if self.options.check_finite && !value.is_finite() {
            return Err(AutodiffError::NonFinite(kind));
        }
        Ok(self.push(
            value,
            Origin::Op {
                kind,
                inputs: [a, b],
            },
            cache,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Mul, &[a, b])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Tanh, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Relu, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Exp, &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Scale(factor), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Sum, &[a])
    }

    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::MseLoss, &[pred, target])
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        classes: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::SoftmaxCrossEntropy, &[logits, classes])
    }

    /// Gradients of a scalar `loss` with respect to every parameter registered
    /// on this tape. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap, AutodiffError> {
        let root = self.resolve(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(AutodiffError::NotScalar);
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; root + 1];
        adjoints[root] = Some(Tensor::filled(self.nodes[root].value.shape(), 1.0));

        for i in (0..=root).rev() {
            let Some(upstream) = adjoints[i].take() else {
                continue;
            };
            match self.nodes[i].origin {
                Origin::Constant => {}
                Origin::Param => adjoints[i] = Some(upstream),
                Origin::Op { kind, inputs } => {
                    let faulty = self.fault.is_some_and(|f| f.same_variant(kind));
                    let (ga, gb) = self.local_backward(kind, inputs, i, &upstream, faulty);
                    accumulate(&mut adjoints[inputs[0]], ga);
                    if let Some(gb) = gb {
                        accumulate(&mut adjoints[inputs[1]], gb);
                    }
                }
            }
        }

        let grads = self
            .params
            .iter()
            .map(|(&id, &idx)| {
                let g = adjoints
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[idx].value.shape()));
                (id, g)
            })
            .collect();
        Ok(GradientMap { grads })
    }

    fn local_backward(
        &self,
        kind: OpKind,
        inputs: [usize; 2],
        out: usize,
        upstream: &Tensor,
        faulty: bool,
    ) -> (Tensor, Option<Tensor>) {
        let a = &self.nodes[inputs[0]].value;
        let b = &self.nodes[inputs[1]].value;
        let y = &self.nodes[out].value;
        let g = upstream.data();
        match kind {
            OpKind::MatMul => {
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; k * m];
                let (ad, bd) = (a.data(), b.data());
                for r in 0..n {
                    let grow = &g[r * m..(r + 1) * m];
                    for c in 0..k {
                        let brow = &bd[c * m..(c + 1) * m];
                        ga[r * k + c] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let av = ad[r * k + c];
                        for (acc, gv) in gb[c * m..(c + 1) * m].iter_mut().zip(grow) {
                            *acc += av * gv;
                        }
                    }
                }
                if faulty {
                    ga.iter_mut().for_each(|v| *v *= 1.5);
                }
                (
                    Tensor::from_parts(a.shape().to_vec(), ga),
                    Some(Tensor::from_parts(b.shape().to_vec(), gb)),
                )
            }
            OpKind::Add => {
                let ga = upstream.clone();
                let gb = if a.shape() == b.shape() {
                    upstream.clone()
                } else {
                    let m = b.len();
                    let mut col = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (acc, v) in col.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::from_parts(b.shape().to_vec(), col)
                };
                let gb = if faulty { gb.map(|v| 0.5 * v) } else { gb };
                (ga, Some(gb))
            }
            OpKind::Mul => {
                let ga = zip_map(upstream, b, |u, bv| u * bv);
                let gb = zip_map(upstream, a, |u, av| u * av);
                let ga = if faulty { ga.map(|v| 2.0 * v) } else { ga };
                (ga, Some(gb))
            }
            OpKind::Tanh => {
                let d = if faulty {
                    zip_map(upstream, y, |u, t| u * (1.0 - t))
                } else {
                    zip_map(upstream, y, |u, t| u * (1.0 - t * t))
                };
                (d, None)
            }
            OpKind::Relu => {
                let d = zip_map(upstream, a, |u, x| {
                    if x > 0.0 || (faulty && x > -0.5) {
                        u
                    } else {
                        0.0
                    }
                });
                (d, None)
            }
            OpKind::Exp => {
                let d = zip_map(upstream, y, |u, e| u * e);
                (if faulty { d.map(|v| 0.5 * v) } else { d }, None)
            }
            OpKind::Scale(c) => {
                let c = if faulty { c + 1.0 } else { c };
                (upstream.map(|u| c * u), None)
            }
            OpKind::Sum => {
                let s = if faulty { 2.0 * g[0] } else { g[0] };
                (Tensor::filled(a.shape(), s), None)
            }
            OpKind::MseLoss => {
                let n = a.len() as f64;
                let coef = if faulty { 1.0 } else { 2.0 } * g[0] / n;
                let ga = zip_map(a, b, |p, t| coef * (p - t));
                let gb = ga.map(|v| -v);
                (ga, Some(gb))
            }
            OpKind::SoftmaxCrossEntropy => {
                let probs = self.nodes[out]
                    .cache
                    .as_ref()
                    .expect("cross-entropy node keeps its softmax");
                let rows = b.len();
                let classes = probs.len() / rows;
                let mut d = probs.data().to_vec();
                for (r, &cls) in b.data().iter().enumerate() {
                    if !faulty {
                        d[r * classes + cls as usize] -= 1.0;
                    }
                }
                let coef = g[0] / rows as f64;
                d.iter_mut().for_each(|v| *v *= coef);
                // No gradient flows into class indices.
                (
                    Tensor::from_parts(a.shape().to_vec(), d),
                    Some(Tensor::zeros(b.shape())),
                )
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(existing) => existing.axpy(1.0, &grad),
        None => *slot = Some(grad),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn shape_err(kind: OpKind, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op: kind,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn forward(kind: OpKind, a: &Tensor, b: &Tensor) -> Result<(Tensor, Option<Tensor>), AutodiffError> {
    let out = match kind {
        OpKind::MatMul => {
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(kind, a, b));
            }
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; n * m];
            let (ad, bd) = (a.data(), b.data());
            for r in 0..n {
                let orow = &mut out[r * m..(r + 1) * m];
                for c in 0..k {
                    let av = ad[r * k + c];
                    for (o, bv) in orow.iter_mut().zip(&bd[c * m..(c + 1) * m]) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::from_parts(vec![n, m], out)
        }
        OpKind::Add => {
            if a.shape() == b.shape() {
                zip_map(a, b, |x, y| x + y)
            } else if a.shape().len() == 2 && b.shape() == [a.shape()[1]] {
                let m = b.len();
                let data = a
                    .data()
                    .chunks(m)
                    .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
                    .collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            } else {
                return Err(shape_err(kind, a, b));
            }
        }
        OpKind::Mul => {
            if a.shape() != b.shape() {
                return Err(shape_err(kind, a, b));
            }
            zip_map(a, b, |x, y| x * y)
        }
        OpKind::Tanh => a.map(libm::tanh),
        OpKind::Relu => a.map(|x| if x > 0.0 { x } else { 0.0 }),
        OpKind::Exp => a.map(libm::exp),
        OpKind::Scale(c) => a.map(|x| c * x),
        OpKind::Sum => Tensor::scalar(a.data().iter().sum()),
        OpKind::MseLoss => {
            if a.shape() != b.shape() {
                return Err(shape_err(kind, a, b));
            }
            let sse: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            Tensor::scalar(sse / a.len() as f64)
        }
        OpKind::SoftmaxCrossEntropy => {
            let (rows, classes) = match a.shape() {
                [c] => (1, *c),
                [n, c] => (*n, *c),
                _ => return Err(shape_err(kind, a, b)),
            };
            if b.shape() != [rows] {
                return Err(shape_err(kind, a, b));
            }
            let mut probs = vec![0.0; rows * classes];
            let mut total = 0.0;
            for (r, &cls) in b.data().iter().enumerate() {
                if cls < 0.0 || libm::trunc(cls) != cls || cls as usize >= classes {
                    return Err(AutodiffError::BadClassIndex(cls));
                }
                let logits = &a.data()[r * classes..(r + 1) * classes];
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let row = &mut probs[r * classes..(r + 1) * classes];
                let mut z = 0.0;
                for (p, &l) in row.iter_mut().zip(logits) {
                    *p = libm::exp(l - max);
                    z += *p;
                }
                row.iter_mut().for_each(|p| *p /= z);
                total += libm::log(z) + max - logits[cls as usize];
            }
            return Ok((
                Tensor::scalar(total / rows as f64),
                Some(Tensor::from_parts(a.shape().to_vec(), probs)),
            ));
        }
    };
    Ok((out, None))
}

/// Gradients keyed by parameter id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.grads.iter_mut().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Sum over every entry of every gradient, `<self, other>`. Keys missing
    /// from either side contribute nothing.
    pub fn dot(&self, other: &GradientMap) -> f64 {
        self.grads
            .iter()
            .filter_map(|(k, a)| other.grads.get(k).map(|b| a.dot(b)))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    /// `self += scale * other` over the keys of `other`.
    pub fn axpy(&mut self, scale: f64, other: &GradientMap) {
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(acc) => acc.axpy(scale, g),
                None => {
                    self.grads.insert(*k, g.map(|v| scale * v));
                }
            }
        }
    }

    pub fn scaled(&self, scale: f64) -> GradientMap {
        GradientMap {
            grads: self
                .grads
                .iter()
                .map(|(k, g)| (*k, g.map(|v| scale * v)))
                .collect(),
        }
    }

    /// Concatenation of the selected gradients in key order.
    pub fn flatten_where(&self, mut keep: impl FnMut(ParamId) -> bool) -> Vec<f64> {
        self.grads
            .iter()
            .filter(|(k, _)| keep(**k))
            .flat_map(|(_, g)| g.data().iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 2], &[0.0; 4]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mse_zero_residual() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[1.0, 2.0]));
        let q = tape.constant(t(&[2], &[1.0, 2.0]));
        let l = tape.mse_loss(p, q).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[2], &[0.0, 0.0]));
        let cls = tape.constant(t(&[1], &[0.0]));
        let l = tape.softmax_cross_entropy(logits, cls).unwrap();
        assert!((tape.scalar_value(l).unwrap() - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_class() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let cls = tape.constant(t(&[1], &[2.0]));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, cls),
            Err(AutodiffError::BadClassIndex(_))
        ));
    }

    #[test]
    fn linear_map_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), t(&[2], &[1.0, 1.0])).unwrap();
        let s = tape.scale(p, 3.0).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn mse_gradient_vanishes_at_minimum() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), t(&[3], &[0.5, -1.0, 2.0])).unwrap();
        let target = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let l = tape.mse_loss(p, target).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(ParamId(0)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), t(&[2], &[1.0, 2.0])).unwrap();
        tape.param(ParamId(7), t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(ParamId(7)).unwrap(), &Tensor::zeros(&[1, 3]));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(p), Err(AutodiffError::NotScalar)));

        let mut other = Tape::new();
        let q = other.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(q), Err(AutodiffError::DetachedNode)));
        assert!(matches!(
            tape.param(ParamId(0), Tensor::scalar(0.0)),
            Err(AutodiffError::DuplicateParam(_))
        ));
    }

    #[test]
    fn non_finite_outputs_are_screened() {
        let mut tape = Tape::with_options(TapeOptions { check_finite: true });
        let x = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(AutodiffError::NonFinite(OpKind::Exp))));

        let mut loose = Tape::with_options(TapeOptions {
            check_finite: false,
        });
        let x = loose.constant(Tensor::scalar(1000.0));
        let y = loose.exp(x).unwrap();
        assert!(loose.scalar_value(y).unwrap().is_infinite());
    }

    #[test]
    fn bias_broadcast_gradient_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.param(ParamId(1), t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.add(x, b).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(ParamId(1)).unwrap().data(), &[3.0, 3.0]);
    }
}
