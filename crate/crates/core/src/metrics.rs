//! Per-task metrics and the relative multi-task improvement.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{MetricError, NetworkError};
use crate::network::{Batch, LossKind, MultiTaskNet};
use crate::tasks::{MetricKind, PoolKind, TaskFamily};

/// One metric value per task, with its direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub lower_is_better: Vec<bool>,
}

impl MetricTable {
    pub fn new(names: Vec<String>, values: Vec<f64>, lower_is_better: Vec<bool>) -> Self {
        assert_eq!(names.len(), values.len());
        assert_eq!(names.len(), lower_is_better.len());
        Self {
            names,
            values,
            lower_is_better,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value_of(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    /// Keeps the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> MetricTable {
        MetricTable {
            names: rows.iter().map(|&i| self.names[i].clone()).collect(),
            values: rows.iter().map(|&i| self.values[i]).collect(),
            lower_is_better: rows.iter().map(|&i| self.lower_is_better[i]).collect(),
        }
    }
}

/// Mean sign-corrected relative change of `model` over `baseline`, in percent:
/// `100/K * sum_i (-1)^l_i (M_i - B_i) / B_i` with `l_i = 1` for lower-better
/// metrics.
pub fn delta_mtl(model: &MetricTable, baseline: &MetricTable) -> Result<f64, MetricError> {
    if model.names != baseline.names || model.lower_is_better != baseline.lower_is_better {
        return Err(MetricError::Misaligned(
            "task names or directions differ".into(),
        ));
    }
    if model.is_empty() {
        return Err(MetricError::Misaligned("no tasks".into()));
    }
    let mut total = 0.0;
    for (i, ((&m, &b), &lower)) in model
        .values
        .iter()
        .zip(&baseline.values)
        .zip(&model.lower_is_better)
        .enumerate()
    {
        if b == 0.0 {
            return Err(MetricError::ZeroBaseline { task: i });
        }
        let sign = if lower { -1.0 } else { 1.0 };
        total += sign * (m - b) / b;
    }
    Ok(100.0 * total / model.len() as f64)
}

/// Fraction of rows whose arg-max logit equals the class index.
pub fn accuracy(logits: &crate::Tensor, classes: &crate::Tensor) -> f64 {
    let n = classes.len();
    let c = logits.len() / n;
    let hits = (0..n)
        .filter(|&r| {
            let row = &logits.data()[r * c..(r + 1) * c];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            best as f64 == classes.data()[r]
        })
        .count();
    hits as f64 / n as f64
}

/// Metric of `task` on `batch`: MSE for regression, accuracy for classification.
pub fn task_metric(net: &MultiTaskNet, family: &TaskFamily, task: usize, batch: &Batch) -> Result<f64, NetworkError> {
    let out = net.predict(task, &batch.x)?;
    let info = &family.tasks()[task];
    Ok(match (info.metric, info.loss) {
        (MetricKind::Accuracy, LossKind::SoftmaxCe) => accuracy(&out, &batch.y),
        _ => {
            let n = out.len() as f64;
            out.data()
                .iter()
                .zip(batch.y.data())
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / n
        }
    })
}

/// Metrics of the given tasks over a whole pool.
pub fn evaluate(
    net: &MultiTaskNet,
    family: &TaskFamily,
    tasks: &[usize],
    pool: PoolKind,
) -> Result<MetricTable, NetworkError> {
    let p = family.pool(pool);
    let mut values = Vec::with_capacity(tasks.len());
    for &t in tasks {
        values.push(task_metric(net, family, t, &p.full(t))?);
    }
    Ok(MetricTable {
        names: tasks.iter().map(|&t| family.tasks()[t].name.clone()).collect(),
        values,
        lower_is_better: tasks.iter().map(|&t| family.tasks()[t].lower_is_better).collect(),
    })
}

/// Kendall rank correlation (tau-a) between two equally long sequences.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut score = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            if (a[i] - a[j]) != 0.0 && (b[i] - b[j]) != 0.0 {
                score += s;
            }
        }
    }
    score / (n * (n - 1) / 2) as f64
}
