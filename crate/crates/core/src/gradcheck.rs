//! Central-difference verification of [`Tape::backward`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{NodeId, OpKind, ParamId, Tape, TapeOptions};
use crate::error::{AutodiffError, NetworkError};
use crate::network::{Activation, Batch, HeadSpec, LossKind, MultiTaskNet, NetworkSpec, ParamGroup, ParamSnapshot};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check for a single parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub id: ParamId,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Set when the builder itself failed; the check then counts as failed.
    pub error: Option<AutodiffError>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_none()
            && self
                .params
                .iter()
                .all(|p| p.max_relative_error <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }
}

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR);
    (a - b).abs() / denom
}

fn evaluate<F>(
    params: &BTreeMap<ParamId, Tensor>,
    builder: &F,
) -> Result<(Tape, NodeId), AutodiffError>
where
    F: Fn(&mut Tape, &BTreeMap<ParamId, NodeId>) -> Result<NodeId, AutodiffError>,
{
    let mut tape = Tape::with_options(TapeOptions { check_finite: true });
    let mut nodes = BTreeMap::new();
    for (&id, value) in params {
        nodes.insert(id, tape.param(id, value.clone())?);
    }
    let loss = builder(&mut tape, &nodes)?;
    Ok((tape, loss))
}

/// Compares reverse-mode gradients of the loss produced by `builder` against
/// central differences with step `h`, entry by entry.
///
/// `builder` receives a fresh tape with every parameter already registered
/// and must deterministically return a scalar loss node.
pub fn grad_check<F>(
    params: &BTreeMap<ParamId, Tensor>,
    builder: F,
    h: f64,
    tolerance: f64,
) -> CheckReport
where
    F: Fn(&mut Tape, &BTreeMap<ParamId, NodeId>) -> Result<NodeId, AutodiffError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut report = CheckReport {
        params: Vec::new(),
        tolerance,
        error: None,
    };
    let analytic = match evaluate(params, &builder).and_then(|(tape, loss)| tape.backward(loss)) {
        Ok(g) => g,
        Err(e) => {
            report.error = Some(e);
            return report;
        }
    };

    let loss_at = |p: &BTreeMap<ParamId, Tensor>| -> Result<f64, AutodiffError> {
        let (tape, loss) = evaluate(p, &builder)?;
        tape.scalar_value(loss)
    };

    let mut work = params.clone();
    for (&id, value) in params {
        let grad = analytic.get(id).expect("every registered param has a gradient");
        let mut worst: f64 = 0.0;
        for k in 0..value.len() {
            let original = value.data()[k];
            work.get_mut(&id).unwrap().data_mut()[k] = original + h;
            let up = loss_at(&work);
            work.get_mut(&id).unwrap().data_mut()[k] = original - h;
            let down = loss_at(&work);
            work.get_mut(&id).unwrap().data_mut()[k] = original;
            let (up, down) = match (up, down) {
                (Ok(u), Ok(d)) => (u, d),
                (Err(e), _) | (_, Err(e)) => {
                    report.error = Some(e);
                    return report;
                }
            };
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
        report.params.push(ParamCheck {
            id,
            max_relative_error: worst,
        });
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Act {
    Tanh,
    Relu,
    /// `exp(0.3 * a)`
    Exp,
    /// `tanh(a) * a`
    Gate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Head {
    Mse,
    CrossEntropy,
    /// `sum(y * y) / len`
    SumSq,
}

/// Number of head-parameter entries that receive a nonzero gradient from a
/// task other than their owner. Zero when the parameter partition holds.
pub fn partition_violations(net: &MultiTaskNet, batches: &[Option<Batch>]) -> Result<usize, NetworkError> {
    let per_task = net.task_grads_at(net.params(), batches)?;
    let mut bad = 0;
    for (t, entry) in per_task.iter().enumerate() {
        let Some((_, grads)) = entry else { continue };
        for info in net.registry() {
            if matches!(info.group, ParamGroup::Task(owner) if owner != t) {
                let g = grads.get(info.id).ok_or(NetworkError::MissingDirection(info.id))?;
                bad += g.data().iter().filter(|&&v| v != 0.0).count();
            }
        }
    }
    Ok(bad)
}

/// A random small multi-task network with train and validation batches that
/// share their inputs across tasks.
#[derive(Clone, Debug)]
pub struct Problem {
    pub net: MultiTaskNet,
    pub train: Vec<Option<Batch>>,
    pub val: Vec<Option<Batch>>,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_batch(rng: &mut ChaCha8Rng, x: &Tensor, head: &HeadSpec) -> Batch {
    let n = x.rows();
    let y = match head.loss {
        LossKind::Mse => uniform_tensor(rng, &[n, head.output_dim]),
        LossKind::SoftmaxCe => Tensor::from_parts(
            vec![n],
            (0..n).map(|_| rng.random_range(0..head.output_dim) as f64).collect(),
        ),
    };
    Batch { x: x.clone(), y }
}

/// 2 to 4 tasks with mixed regression and classification heads. `max_width`
/// bounds every layer width. Without `allow_relu` the trunk is smooth, which
/// finite differences need.
pub fn random_problem(seed: u64, max_width: usize, allow_relu: bool) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=4);
    let input_dim = rng.random_range(2..=4);
    let depth = rng.random_range(1..=2);
    let trunk_layers = (0..depth).map(|_| rng.random_range(2..=max_width)).collect();
    let heads: Vec<HeadSpec> = (0..k)
        .map(|_| {
            if rng.random_bool(0.3) {
                HeadSpec {
                    hidden: vec![],
                    output_dim: rng.random_range(2..=3),
                    loss: LossKind::SoftmaxCe,
                }
            } else {
                let hidden = if rng.random_bool(0.3) {
                    vec![rng.random_range(2..=max_width)]
                } else {
                    vec![]
                };
                HeadSpec {
                    hidden,
                    output_dim: rng.random_range(1..=2),
                    loss: LossKind::Mse,
                }
            }
        })
        .collect();
    let activation = if !allow_relu || rng.random_bool(0.5) {
        Activation::Tanh
    } else {
        Activation::Relu
    };
    let spec = NetworkSpec {
        input_dim,
        trunk_layers,
        heads: heads.clone(),
        activation,
        seed,
    };
    let net = MultiTaskNet::build(spec).expect("random spec is valid");
    let n = rng.random_range(3..=6);
    let xt = uniform_tensor(&mut rng, &[n, input_dim]);
    let xv = uniform_tensor(&mut rng, &[n, input_dim]);
    let train = heads.iter().map(|h| Some(random_batch(&mut rng, &xt, h))).collect();
    let val = heads.iter().map(|h| Some(random_batch(&mut rng, &xv, h))).collect();
    Problem { net, train, val }
}

fn flatten(s: &ParamSnapshot) -> Vec<f64> {
    s.values().iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(like: &ParamSnapshot, v: &[f64]) -> ParamSnapshot {
    let mut off = 0;
    ParamSnapshot::from_values(
        like.values()
            .iter()
            .map(|t| {
                let out = Tensor::from_parts(t.shape().to_vec(), v[off..off + t.len()].to_vec());
                off += t.len();
                out
            })
            .collect(),
    )
}

/// Central-difference gradient of `sum_i w_i L_i` at the flat point `at`,
/// using forward passes only.
fn dense_grad(
    net: &MultiTaskNet,
    at: &[f64],
    like: &ParamSnapshot,
    batches: &[Option<Batch>],
    w: &[f64],
    h: f64,
) -> Result<Vec<f64>, NetworkError> {
    let f = |v: &[f64]| -> Result<f64, NetworkError> {
        let l = net.losses_at(&unflatten(like, v), batches)?;
        Ok(l.iter().zip(w).map(|(l, w)| l.map_or(0.0, |l| w * l)).sum())
    };
    let mut v = at.to_vec();
    (0..at.len())
        .map(|i| {
            let o = v[i];
            v[i] = o + h;
            let up = f(&v)?;
            v[i] = o - h;
            let down = f(&v)?;
            v[i] = o;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Weight meta-gradient assembled from scratch with per-parameter central
/// differences: the virtual step, the primary validation direction and every
/// task's training gradient are all finite-difference estimates. Costs
/// `O(K * P)` forward passes for `P` parameters, so it is meant for small
/// networks only.
pub fn dense_meta_grad_oracle(
    net: &MultiTaskNet,
    train: &[Option<Batch>],
    val: &[Option<Batch>],
    lambda: &[f64],
    primary: &[usize],
    alpha: f64,
) -> Result<Vec<f64>, NetworkError> {
    let h = 1e-5;
    let k = net.num_tasks();
    let like = net.params().clone();
    let theta = flatten(&like);
    let inner = dense_grad(net, &theta, &like, train, lambda, h)?;
    let theta_p: Vec<f64> = theta.iter().zip(&inner).map(|(t, g)| t - alpha * g).collect();
    let mut pw = vec![0.0; k];
    for &p in primary {
        pw[p] = 1.0;
    }
    let d = dense_grad(net, &theta_p, &like, val, &pw, h)?;
    (0..k)
        .map(|i| {
            let mut w = vec![0.0; k];
            w[i] = 1.0;
            let gi = dense_grad(net, &theta, &like, train, &w, h)?;
            Ok(-alpha * gi.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect()
}

/// A small randomly shaped feed-forward graph with a random mix of
/// activations and loss terms, for exercising every primitive op.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub params: BTreeMap<ParamId, Tensor>,
    x: Tensor,
    target: Tensor,
    classes: Tensor,
    acts: Vec<Act>,
    heads: Vec<Head>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(2..=5);
        let input = rng.random_range(2..=4);
        let depth = rng.random_range(1..=3);
        let mut params = BTreeMap::new();
        let mut acts = Vec::new();
        let mut width = input;
        for layer in 0..depth {
            let out = rng.random_range(2..=4);
            let scale = 1.0 / libm::sqrt(width as f64);
            params.insert(ParamId(2 * layer as u32), normal(&mut rng, &[width, out], scale));
            params.insert(ParamId(2 * layer as u32 + 1), normal(&mut rng, &[out], 0.3));
            acts.push(match rng.random_range(0..4) {
                0 => Act::Tanh,
                1 => Act::Relu,
                2 => Act::Exp,
                _ => Act::Gate,
            });
            width = out;
        }
        let mut heads: Vec<Head> = [Head::Mse, Head::CrossEntropy, Head::SumSq]
            .into_iter()
            .filter(|_| rng.random_bool(0.5))
            .collect();
        if heads.is_empty() {
            heads.push(Head::Mse);
        }
        let x = normal(&mut rng, &[rows, input], 1.0);
        let target = normal(&mut rng, &[rows, width], 1.0);
        let classes = Tensor::from_parts(
            vec![rows],
            (0..rows).map(|_| rng.random_range(0..width) as f64).collect(),
        );
        Self {
            params,
            x,
            target,
            classes,
            acts,
            heads,
        }
    }

    /// Op kinds the graph records.
    pub fn ops(&self) -> Vec<OpKind> {
        let mut ops = vec![OpKind::MatMul, OpKind::Add];
        for a in &self.acts {
            match a {
                Act::Tanh => ops.push(OpKind::Tanh),
                Act::Relu => ops.push(OpKind::Relu),
                Act::Exp => ops.extend([OpKind::Scale(0.3), OpKind::Exp]),
                Act::Gate => ops.extend([OpKind::Tanh, OpKind::Mul]),
            }
        }
        for h in &self.heads {
            match h {
                Head::Mse => ops.push(OpKind::MseLoss),
                Head::CrossEntropy => ops.push(OpKind::SoftmaxCrossEntropy),
                Head::SumSq => ops.extend([OpKind::Mul, OpKind::Sum, OpKind::Scale(1.0)]),
            }
        }
        ops
    }

    /// Records the graph on `tape`; `nodes` maps every id of `params`.
    pub fn build(&self, tape: &mut Tape, nodes: &BTreeMap<ParamId, NodeId>) -> Result<NodeId, AutodiffError> {
        let mut h = tape.constant(self.x.clone());
        for (layer, act) in self.acts.iter().enumerate() {
            let w = nodes[&ParamId(2 * layer as u32)];
            let b = nodes[&ParamId(2 * layer as u32 + 1)];
            let z = tape.matmul(h, w)?;
            let a = tape.add(z, b)?;
            h = match act {
                Act::Tanh => tape.tanh(a)?,
                Act::Relu => tape.relu(a)?,
                Act::Exp => {
                    let s = tape.scale(a, 0.3)?;
                    tape.exp(s)?
                }
                Act::Gate => {
                    let t = tape.tanh(a)?;
                    tape.mul(t, a)?
                }
            };
        }
        let mut total: Option<NodeId> = None;
        for head in &self.heads {
            let term = match head {
                Head::Mse => {
                    let y = tape.constant(self.target.clone());
                    tape.mse_loss(h, y)?
                }
                Head::CrossEntropy => {
                    let y = tape.constant(self.classes.clone());
                    tape.softmax_cross_entropy(h, y)?
                }
                Head::SumSq => {
                    let sq = tape.mul(h, h)?;
                    let s = tape.sum(sq)?;
                    tape.scale(s, 1.0 / self.target.len() as f64)?
                }
            };
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one head"))
    }

    pub fn check(&self, h: f64, tolerance: f64) -> CheckReport {
        grad_check(&self.params, |tape, nodes| self.build(tape, nodes), h, tolerance)
    }
}
