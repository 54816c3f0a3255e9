//! Exhaustive equal-weight task-grouping search and relationship matrices
//! read off converged auxiliary-mode weightings.
//!
//! Every search is split into independent jobs (one training each) so a
//! caller can fan them out across threads and merge by job index.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{MetricError, TrainError};
use crate::metrics::{delta_mtl, evaluate, MetricTable};
use crate::tasks::{PoolKind, TaskFamily};
use crate::train::{converged_weights, train, NetworkShape, StrategyConfig, TrainerConfig};
use crate::weighting::AutoLambdaConfig;

/// Largest task count whose full search is allowed.
pub const MAX_SEARCH_TASKS: usize = 6;

/// Fraction of the final steps averaged into a converged weight.
pub const CONVERGED_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingOptions {
    /// Upper bound on the number of trainings.
    pub cap: usize,
    /// Independent training seeds averaged per subset.
    pub seeds: usize,
}

impl Default for GroupingOptions {
    fn default() -> Self {
        Self { cap: 63, seeds: 1 }
    }
}

/// One subset of tasks trained together with equal weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingResult {
    /// Bit `t` set means task `t` is in the group.
    pub subset: u64,
    pub members: Vec<usize>,
    /// Test-pool metrics of the members.
    pub metrics: MetricTable,
    /// Validation-pool losses of the members.
    pub val_losses: Vec<f64>,
    /// Per-member change over the single-task run, in percent, sign
    /// corrected so that positive is better. Filled by [`attach_deltas`].
    pub delta_pct: Vec<f64>,
}

pub fn members_of(subset: u64) -> Vec<usize> {
    (0..64).filter(|b| subset >> b & 1 == 1).collect()
}

/// Subsets a full search trains, in increasing bitmask order.
pub fn grouping_jobs(num_tasks: usize, opts: &GroupingOptions) -> Result<Vec<u64>, MetricError> {
    let required = if num_tasks > MAX_SEARCH_TASKS {
        usize::MAX
    } else {
        ((1usize << num_tasks) - 1) * opts.seeds.max(1)
    };
    if required > opts.cap {
        return Err(MetricError::BudgetExceeded {
            required,
            cap: opts.cap,
        });
    }
    Ok((1..(1u64 << num_tasks)).collect())
}

/// Trains one subset. Every subset shares the network seed and trainer seed,
/// so groups differ only in their tasks.
pub fn train_grouping(
    family: &TaskFamily,
    shape: &NetworkShape,
    cfg: &TrainerConfig,
    subset: u64,
    seeds: usize,
) -> Result<GroupingResult, TrainError> {
    let members = members_of(subset);
    let sub = family.select_tasks(&members)?;
    let n = members.len();
    let mut cfg = cfg.clone();
    cfg.primary = Some((0..n).collect());
    let seeds = seeds.max(1);
    let mut metric_sum = vec![0.0; n];
    let mut val_sum = vec![0.0; n];
    let mut names = Vec::new();
    let mut lower = Vec::new();
    for s in 0..seeds as u64 {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed.wrapping_add(s);
        let mut run_shape = shape.clone();
        run_shape.seed = shape.seed.wrapping_add(s);
        let out = train(&sub, &run_shape, &run_cfg, &StrategyConfig::Equal)?;
        let all = evaluate(&out.net, &sub, &(0..n).collect::<Vec<_>>(), PoolKind::Test)?;
        for i in 0..n {
            metric_sum[i] += all.values[i] / seeds as f64;
            val_sum[i] += out.val_losses[i] / seeds as f64;
        }
        names = all.names;
        lower = all.lower_is_better;
    }
    Ok(GroupingResult {
        subset,
        members,
        metrics: MetricTable::new(names, metric_sum, lower),
        val_losses: val_sum,
        delta_pct: Vec::new(),
    })
}

/// Fills `delta_pct` of every result relative to the singleton subsets.
pub fn attach_deltas(results: &mut [GroupingResult]) -> Result<(), MetricError> {
    let singles: Vec<(usize, MetricTable)> = results
        .iter()
        .filter(|r| r.members.len() == 1)
        .map(|r| (r.members[0], r.metrics.clone()))
        .collect();
    for r in results.iter_mut() {
        let mut deltas = Vec::with_capacity(r.members.len());
        for (i, &t) in r.members.iter().enumerate() {
            let base = singles
                .iter()
                .find(|(s, _)| *s == t)
                .map(|(_, m)| m)
                .ok_or_else(|| MetricError::Misaligned(alloc::format!("no single-task run for task {t}")))?;
            deltas.push(delta_mtl(&r.metrics.select(&[i]), base)?);
        }
        r.delta_pct = deltas;
    }
    Ok(())
}

/// Runs the whole search sequentially.
pub fn grouping_search(
    family: &TaskFamily,
    shape: &NetworkShape,
    cfg: &TrainerConfig,
    opts: &GroupingOptions,
) -> Result<Vec<GroupingResult>, TrainError> {
    let jobs = grouping_jobs(family.num_tasks(), opts)?;
    let mut results = jobs
        .into_iter()
        .map(|subset| train_grouping(family, shape, cfg, subset, opts.seeds))
        .collect::<Result<Vec<_>, _>>()?;
    attach_deltas(&mut results)?;
    Ok(results)
}

/// Best group of each task by its delta, ties going to the smaller bitmask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestGrouping {
    pub task: usize,
    pub subset: u64,
    pub delta_pct: f64,
    pub val_loss: f64,
}

pub fn best_groupings(results: &[GroupingResult], num_tasks: usize) -> Vec<BestGrouping> {
    (0..num_tasks)
        .filter_map(|task| {
            let mut best: Option<BestGrouping> = None;
            for r in results {
                let Some(i) = r.members.iter().position(|&m| m == task) else {
                    continue;
                };
                let d = r.delta_pct.get(i).copied().unwrap_or(f64::NAN);
                if best.as_ref().is_none_or(|b| d > b.delta_pct) {
                    best = Some(BestGrouping {
                        task,
                        subset: r.subset,
                        delta_pct: d,
                        val_loss: r.val_losses[i],
                    });
                }
            }
            best
        })
        .collect()
}

/// Lowest validation loss each task reaches in any group.
pub fn best_val_losses(results: &[GroupingResult], num_tasks: usize) -> Vec<f64> {
    (0..num_tasks)
        .map(|task| {
            results
                .iter()
                .filter_map(|r| r.members.iter().position(|&m| m == task).map(|i| r.val_losses[i]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Entry `(i, j)` is the converged weight of task `j` when task `i` is the
/// only primary task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationshipMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl RelationshipMatrix {
    pub fn get(&self, primary: usize, aux: usize) -> f64 {
        self.values[primary][aux]
    }
}

/// Converged weights of one auxiliary-mode run with `primary` as the only
/// primary task.
pub fn relationship_row(
    family: &TaskFamily,
    shape: &NetworkShape,
    cfg: &TrainerConfig,
    al: &AutoLambdaConfig,
    primary: usize,
) -> Result<Vec<f64>, TrainError> {
    let mut cfg = cfg.clone();
    cfg.primary = Some(vec![primary]);
    let out = train(family, shape, &cfg, &StrategyConfig::AutoLambda(al.clone()))?;
    Ok(converged_weights(&out.records, CONVERGED_FRACTION))
}

pub fn relationship_matrix(
    family: &TaskFamily,
    shape: &NetworkShape,
    cfg: &TrainerConfig,
    al: &AutoLambdaConfig,
) -> Result<RelationshipMatrix, TrainError> {
    let values = (0..family.num_tasks())
        .map(|i| relationship_row(family, shape, cfg, al, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RelationshipMatrix {
        names: family.tasks().iter().map(|t| t.name.clone()).collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_counts() {
        let opts = GroupingOptions::default();
        assert_eq!(grouping_jobs(1, &opts).unwrap(), vec![1]);
        assert_eq!(grouping_jobs(3, &opts).unwrap().len(), 7);
        assert_eq!(grouping_jobs(6, &opts).unwrap().len(), 63);
        assert_eq!(
            grouping_jobs(3, &GroupingOptions { cap: 5, seeds: 1 }),
            Err(MetricError::BudgetExceeded { required: 7, cap: 5 })
        );
        assert!(grouping_jobs(7, &opts).is_err());
        assert_eq!(
            grouping_jobs(3, &GroupingOptions { cap: 10, seeds: 2 }),
            Err(MetricError::BudgetExceeded { required: 14, cap: 10 })
        );
    }

    #[test]
    fn members_from_bits() {
        assert_eq!(members_of(0b101), vec![0, 2]);
    }
}
