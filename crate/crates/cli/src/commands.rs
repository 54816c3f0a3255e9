//! The command verbs. Each takes a resolved [`RunConfig`], writes its CSV and
//! JSON outputs under the output directory and returns what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use autolambda_core::gradcheck::{partition_violations, RandomGraph};
use autolambda_core::grouping::{
    attach_deltas, best_groupings, grouping_jobs, train_grouping, GroupingResult, CONVERGED_FRACTION,
};
use autolambda_core::metrics::{delta_mtl, MetricTable};
use autolambda_core::network::MultiTaskNet;
use autolambda_core::tasks::{PairMode, PoolKind, TaskFamily};
use autolambda_core::train::{converged_weights, train_with, StepRecord, StrategyConfig, TrainOutcome, TrainerConfig};
use autolambda_core::train::NetworkShape;
use autolambda_core::weighting::AutoLambdaConfig;
use log::{debug, info};
use serde::Serialize;

use crate::config::{AblationDesign, RunConfig};
use crate::error::CliError;
use crate::parallel::parallel_map;
use crate::trajectory::{write_json, RunSummary, TrajectoryWriter};

pub const DEFAULT_OUT: &str = "autolambda-out";

pub fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(cfg.out.as_deref().unwrap_or(DEFAULT_OUT));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

pub fn task_names(family: &TaskFamily) -> Vec<String> {
    family.tasks().iter().map(|t| t.name.clone()).collect()
}

/// One training whose trajectory streams to `trajectory` when given. A
/// divergence still leaves the flushed prefix and a summary behind.
pub fn train_logged(
    family: &TaskFamily,
    shape: &NetworkShape,
    trainer: &TrainerConfig,
    strategy: &StrategyConfig,
    trajectory: Option<&Path>,
    config_hash: &str,
    eval_every: usize,
) -> Result<(TrainOutcome, RunSummary), CliError> {
    let names = task_names(family);
    let mut writer = trajectory
        .map(|p| TrajectoryWriter::create(p, &names, eval_every))
        .transpose()?;
    let start = Instant::now();
    let mut steps = 0;
    let mut write_err = None;
    let result = train_with(family, shape, trainer, strategy, |r: &StepRecord| {
        steps = r.step + 1;
        if let Some(w) = writer.as_mut() {
            if let Err(e) = w.write(r) {
                write_err = Some(e);
                return Err(autolambda_core::TrainError::Config("trajectory write failed".into()));
            }
        }
        if r.step % eval_every == 0 {
            debug!("{} step {} lambda {:?}", strategy.name(), r.step, r.lambda);
        }
        Ok(())
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    let mut summary = RunSummary {
        strategy: strategy.name().to_string(),
        config_hash: config_hash.to_string(),
        status: "ok".into(),
        steps_completed: steps,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        task_names: names,
        final_weights: Vec::new(),
        metrics: None,
        val_losses: Vec::new(),
        test_losses: Vec::new(),
    };
    match result {
        Ok(out) => {
            summary.final_weights.clone_from(&out.final_weights);
            summary.metrics = Some(out.metrics.clone());
            summary.val_losses.clone_from(&out.val_losses);
            summary.test_losses.clone_from(&out.test_losses);
            Ok((out, summary))
        }
        Err(e) => {
            summary.status = "diverged".into();
            if let Some(p) = trajectory {
                write_json(&summary, &p.with_extension("summary.json"))?;
            }
            Err(e.into())
        }
    }
}

pub fn run(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let family = cfg.family.build()?;
    let dir = out_dir(cfg)?;
    let hash = cfg.hash();
    info!("run {} config {hash}", cfg.strategy.name());
    let (_, summary) = train_logged(
        &family,
        &cfg.network,
        &cfg.trainer,
        &cfg.strategy,
        Some(&dir.join("trajectory.csv")),
        &hash,
        cfg.eval_every,
    )?;
    write_json(&summary, &dir.join("trajectory.summary.json"))?;
    info!("run finished in {:.1}s", summary.wall_clock_secs);
    Ok(summary)
}

/// Single-task test metrics of every real task, trained with the same budget.
pub fn single_task_baseline(
    family: &TaskFamily,
    shape: &NetworkShape,
    trainer: &TrainerConfig,
    jobs: usize,
) -> Result<MetricTable, CliError> {
    let real = family.real_tasks();
    let runs = parallel_map(jobs, &real, |_, &t| {
        let mut tr = trainer.clone();
        tr.primary = None;
        train_grouping(family, shape, &tr, 1 << t, 1)
    });
    let mut names = Vec::new();
    let mut values = Vec::new();
    let mut lower = Vec::new();
    for r in runs {
        let r = r?;
        names.push(r.metrics.names[0].clone());
        values.push(r.metrics.values[0]);
        lower.push(r.metrics.lower_is_better[0]);
    }
    Ok(MetricTable::new(names, values, lower))
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub run: usize,
    pub strategy: String,
    pub delta_mtl: f64,
    pub lambda_noise: Option<f64>,
    pub metrics: MetricTable,
    pub per_task_delta: Vec<f64>,
    pub final_weights: Vec<f64>,
}

fn noise_weight(family: &TaskFamily, weights: &[f64]) -> Option<f64> {
    let real = family.real_tasks();
    let noise: Vec<f64> = (0..family.num_tasks())
        .filter(|t| !real.contains(t))
        .map(|t| weights[t])
        .collect();
    (!noise.is_empty()).then(|| noise.iter().sum::<f64>() / noise.len() as f64)
}

pub fn compare(cfg: &RunConfig) -> Result<Vec<CompareRow>, CliError> {
    if cfg.strategies.len() < 2 {
        return Err(CliError::Config("compare needs at least two strategies".into()));
    }
    let family = cfg.family.build()?;
    let dir = out_dir(cfg)?;
    let hash = cfg.hash();
    info!("compare {} strategies, config {hash}", cfg.strategies.len());
    let baseline = single_task_baseline(&family, &cfg.network, &cfg.trainer, cfg.jobs)?;
    let outcomes = parallel_map(cfg.jobs, &cfg.strategies, |i, s| {
        let path = dir.join(format!("trajectory_{i}_{}.csv", s.name()));
        train_logged(&family, &cfg.network, &cfg.trainer, s, Some(&path), &hash, cfg.eval_every)
    });
    let mut rows = Vec::new();
    for (i, res) in outcomes.into_iter().enumerate() {
        let (out, summary) = res?;
        write_json(&summary, &dir.join(format!("trajectory_{i}_{}.summary.json", summary.strategy)))?;
        let per_task = (0..out.metrics.len())
            .map(|t| delta_mtl(&out.metrics.select(&[t]), &baseline.select(&[t])))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(CompareRow {
            run: i,
            strategy: summary.strategy.clone(),
            delta_mtl: delta_mtl(&out.metrics, &baseline)?,
            lambda_noise: noise_weight(&family, &out.final_weights),
            metrics: out.metrics,
            per_task_delta: per_task,
            final_weights: out.final_weights,
        });
    }
    let names = task_names(&family);
    let real = family.real_tasks();
    let mut w = csv_writer(&dir.join("compare.csv"))?;
    write_row(&mut w, &["run", "strategy", "task", "metric", "final_lambda", "delta_pct"])?;
    for r in &rows {
        for (j, &t) in real.iter().enumerate() {
            write_row(
                &mut w,
                &[
                    r.run.to_string(),
                    r.strategy.clone(),
                    names[t].clone(),
                    r.metrics.values[j].to_string(),
                    r.final_weights[t].to_string(),
                    r.per_task_delta[j].to_string(),
                ],
            )?;
        }
    }
    finish(w, &dir.join("compare.csv"))?;
    let mut w = csv_writer(&dir.join("compare_summary.csv"))?;
    write_row(&mut w, &["run", "strategy", "delta_mtl", "lambda_noise"])?;
    for r in &rows {
        write_row(
            &mut w,
            &[
                r.run.to_string(),
                r.strategy.clone(),
                r.delta_mtl.to_string(),
                r.lambda_noise.map(|v| v.to_string()).unwrap_or_default(),
            ],
        )?;
    }
    finish(w, &dir.join("compare_summary.csv"))?;
    Ok(rows)
}

pub fn grouping(cfg: &RunConfig) -> Result<Vec<GroupingResult>, CliError> {
    let family = cfg.family.build()?;
    let dir = out_dir(cfg)?;
    info!("grouping search, config {}", cfg.hash());
    let jobs = grouping_jobs(family.num_tasks(), &cfg.grouping)?;
    let mut trainer = cfg.trainer.clone();
    trainer.primary = None;
    let mut results = parallel_map(cfg.jobs, &jobs, |_, &subset| {
        debug!("grouping subset {subset:#b}");
        train_grouping(&family, &cfg.network, &trainer, subset, cfg.grouping.seeds)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    attach_deltas(&mut results)?;
    let names = task_names(&family);
    let path = dir.join("grouping.csv");
    let mut w = csv_writer(&path)?;
    write_row(&mut w, &["subset_bitmask", "task", "metric", "delta_pct"])?;
    for r in &results {
        for (i, &t) in r.members.iter().enumerate() {
            write_row(
                &mut w,
                &[
                    r.subset.to_string(),
                    names[t].clone(),
                    r.metrics.values[i].to_string(),
                    r.delta_pct[i].to_string(),
                ],
            )?;
        }
    }
    finish(w, &path)?;
    let path = dir.join("best_grouping.csv");
    let mut w = csv_writer(&path)?;
    write_row(&mut w, &["task", "subset_bitmask", "delta_pct", "val_loss"])?;
    for b in best_groupings(&results, family.num_tasks()) {
        write_row(
            &mut w,
            &[
                names[b.task].clone(),
                b.subset.to_string(),
                b.delta_pct.to_string(),
                b.val_loss.to_string(),
            ],
        )?;
    }
    finish(w, &path)?;
    Ok(results)
}

/// Row `i` holds the converged weights of the run with task `i` as the only
/// primary task, plus that task's change over its single-task run.
#[derive(Clone, Debug, Serialize)]
pub struct RelMatrixReport {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub primary_delta: Vec<f64>,
}

pub fn relmatrix(cfg: &RunConfig) -> Result<RelMatrixReport, CliError> {
    let family = cfg.family.build()?;
    let dir = out_dir(cfg)?;
    let hash = cfg.hash();
    info!("relationship matrix, config {hash}");
    let al = match &cfg.strategy {
        StrategyConfig::AutoLambda(a) => a.clone(),
        _ => AutoLambdaConfig::default(),
    };
    let k = family.num_tasks();
    let primaries: Vec<usize> = (0..k).collect();
    let rows = parallel_map(cfg.jobs, &primaries, |_, &p| -> Result<_, CliError> {
        let mut tr = cfg.trainer.clone();
        tr.primary = Some(vec![p]);
        let path = dir.join(format!("trajectory_primary_{p}.csv"));
        let (out, _) = train_logged(
            &family,
            &cfg.network,
            &tr,
            &StrategyConfig::AutoLambda(al.clone()),
            Some(&path),
            &hash,
            cfg.eval_every,
        )?;
        let single = train_grouping(&family, &cfg.network, &tr, 1 << p, 1)?;
        let own = MetricTable::new(
            vec![family.tasks()[p].name.clone()],
            vec![task_test_metric(&out.net, &family, p)?],
            vec![family.tasks()[p].lower_is_better],
        );
        let delta = delta_mtl(&own, &single.metrics)?;
        Ok((converged_weights(&out.records, CONVERGED_FRACTION), delta))
    });
    let mut values = Vec::new();
    let mut primary_delta = Vec::new();
    for r in rows {
        let (w, d) = r?;
        values.push(w);
        primary_delta.push(d);
    }
    let names = task_names(&family);
    let path = dir.join("relmatrix.csv");
    let mut w = csv_writer(&path)?;
    write_row(&mut w, &["primary_task", "task", "metric", "delta_pct"])?;
    for (p, row) in values.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            write_row(
                &mut w,
                &[names[p].clone(), names[t].clone(), v.to_string(), primary_delta[p].to_string()],
            )?;
        }
    }
    finish(w, &path)?;
    Ok(RelMatrixReport {
        names,
        values,
        primary_delta,
    })
}

fn task_test_metric(net: &MultiTaskNet, family: &TaskFamily, task: usize) -> Result<f64, CliError> {
    let m = autolambda_core::metrics::evaluate(net, family, &[task], PoolKind::Test)
        .map_err(|e| CliError::Train(e.into()))?;
    Ok(m.values[0])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub cell: usize,
    pub init: f64,
    pub beta: f64,
    pub pair_mode: PairMode,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    pub delta_mtl: f64,
    pub lambda_noise: Option<f64>,
    pub mean_real_lambda: f64,
}

impl AblationRow {
    pub fn noise_ratio(&self) -> Option<f64> {
        self.lambda_noise.map(|n| n / self.mean_real_lambda)
    }
}

pub fn ablation_cells(cfg: &RunConfig) -> Result<Vec<AblationCell>, CliError> {
    let a = &cfg.ablation;
    if a.inits.is_empty() || a.betas.is_empty() || a.pair_modes.is_empty() || a.seeds == 0 {
        return Err(CliError::Config("ablation lists and seeds must be non-empty".into()));
    }
    let mut combos = Vec::new();
    match a.design {
        AblationDesign::Full => {
            for &init in &a.inits {
                for &beta in &a.betas {
                    for &pm in &a.pair_modes {
                        combos.push((init, beta, pm));
                    }
                }
            }
        }
        AblationDesign::OneAtATime => {
            let base = (a.inits[0], a.betas[0], a.pair_modes[0]);
            combos.push(base);
            combos.extend(a.inits[1..].iter().map(|&i| (i, base.1, base.2)));
            combos.extend(a.betas[1..].iter().map(|&b| (base.0, b, base.2)));
            combos.extend(a.pair_modes[1..].iter().map(|&p| (base.0, base.1, p)));
        }
    }
    Ok(combos
        .into_iter()
        .enumerate()
        .map(|(cell, (init, beta, pair_mode))| AblationCell {
            cell,
            init,
            beta,
            pair_mode,
        })
        .collect())
}

pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>, CliError> {
    let cells = ablation_cells(cfg)?;
    let dir = out_dir(cfg)?;
    let hash = cfg.hash();
    info!("ablation of {} cells x {} seeds, config {hash}", cells.len(), cfg.ablation.seeds);
    let base_al = match &cfg.strategy {
        StrategyConfig::AutoLambda(a) => a.clone(),
        _ => AutoLambdaConfig::default(),
    };
    let base_seed = cfg.seed.unwrap_or(cfg.trainer.seed);
    let seeds: Vec<u64> = (0..cfg.ablation.seeds as u64).map(|s| base_seed + s).collect();
    let seeded: Vec<RunConfig> = seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = Some(s);
            c.resolve_seed();
            c
        })
        .collect();
    let families = seeded.iter().map(|c| c.family.build()).collect::<Result<Vec<_>, _>>()?;
    let baselines = seeded
        .iter()
        .zip(&families)
        .map(|(c, f)| single_task_baseline(f, &c.network, &c.trainer, cfg.jobs))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..cells.len()).map(move |c| (s, c)))
        .collect();
    let results = parallel_map(cfg.jobs, &jobs, |_, &(s, c)| -> Result<AblationRow, CliError> {
        let cell = &cells[c];
        let run_cfg = &seeded[s];
        let mut tr = run_cfg.trainer.clone();
        tr.pair_mode = cell.pair_mode;
        let al = AutoLambdaConfig {
            init: cell.init,
            beta: cell.beta,
            ..base_al.clone()
        };
        let path = dir.join(format!("trajectory_cell{}_seed{}.csv", cell.cell, seeds[s]));
        let (out, _) = train_logged(
            &families[s],
            &run_cfg.network,
            &tr,
            &StrategyConfig::AutoLambda(al),
            Some(&path),
            &hash,
            cfg.eval_every,
        )?;
        let w = converged_weights(&out.records, CONVERGED_FRACTION);
        let real = families[s].real_tasks();
        Ok(AblationRow {
            cell: cell.clone(),
            seed: seeds[s],
            delta_mtl: delta_mtl(&out.metrics, &baselines[s])?,
            lambda_noise: noise_weight(&families[s], &w),
            mean_real_lambda: real.iter().map(|&t| w[t]).sum::<f64>() / real.len() as f64,
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let path = dir.join("ablation.csv");
    let mut w = csv_writer(&path)?;
    write_row(
        &mut w,
        &["cell", "init", "beta", "pair_mode", "seed", "delta_pct", "lambda_noise", "mean_real_lambda", "noise_ratio"],
    )?;
    for r in &rows {
        write_row(
            &mut w,
            &[
                r.cell.cell.to_string(),
                r.cell.init.to_string(),
                r.cell.beta.to_string(),
                pair_mode_name(r.cell.pair_mode).to_string(),
                r.seed.to_string(),
                r.delta_mtl.to_string(),
                r.lambda_noise.map(|v| v.to_string()).unwrap_or_default(),
                r.mean_real_lambda.to_string(),
                r.noise_ratio().map(|v| v.to_string()).unwrap_or_default(),
            ],
        )?;
    }
    finish(w, &path)?;
    Ok(rows)
}

pub fn pair_mode_name(p: PairMode) -> &'static str {
    match p {
        PairMode::Swap => "swap",
        PairMode::DisjointSplit => "disjoint_split",
        PairMode::NoSwap => "no_swap",
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub graphs: usize,
    pub failed_graphs: Vec<u64>,
    pub worst_relative_error: f64,
    /// Primitive ops exercised by at least one graph.
    pub ops_covered: Vec<String>,
    pub partition_nets: usize,
    pub partition_violations: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failed_graphs.is_empty() && self.partition_violations == 0
    }
}

fn op_name(op: &autolambda_core::autodiff::OpKind) -> String {
    let s = format!("{op:?}");
    s.split('(').next().unwrap_or(&s).to_string()
}

pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckReport, CliError> {
    let dir = out_dir(cfg)?;
    let g = &cfg.gradcheck;
    let base = cfg.seed.unwrap_or(0);
    info!("gradcheck on {} graphs, config {}", g.graphs, cfg.hash());
    let seeds: Vec<u64> = (0..g.graphs as u64).map(|i| base + i).collect();
    let checks = parallel_map(cfg.jobs, &seeds, |_, &s| {
        let graph = RandomGraph::new(s);
        let report = graph.check(g.step, g.tolerance);
        (s, graph.ops(), report.passed(), report.worst())
    });
    let mut ops: Vec<String> = Vec::new();
    let path = dir.join("gradcheck.csv");
    let mut w = csv_writer(&path)?;
    write_row(&mut w, &["graph", "worst_rel_err", "passed"])?;
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for (s, graph_ops, ok, err) in &checks {
        for op in graph_ops {
            let n = op_name(op);
            if !ops.contains(&n) {
                ops.push(n);
            }
        }
        if !ok {
            failed.push(*s);
        }
        worst = worst.max(*err);
        write_row(&mut w, &[s.to_string(), err.to_string(), ok.to_string()])?;
    }
    finish(w, &path)?;
    ops.sort();

    let family = cfg.family.build()?;
    let batches: Vec<_> = {
        let pool = family.pool(PoolKind::Train);
        (0..family.num_tasks())
            .map(|t| {
                let n = pool.len_for(t).min(8);
                Some(pool.batch(t, &(0..n).collect::<Vec<_>>()))
            })
            .collect()
    };
    let mut violations = 0;
    for i in 0..g.partition_nets as u64 {
        let shape = NetworkShape {
            seed: base + i,
            ..cfg.network.clone()
        };
        let net = MultiTaskNet::build(shape.spec_for(&family)).map_err(|e| CliError::Config(e.to_string()))?;
        violations += partition_violations(&net, &batches).map_err(|e| CliError::Train(e.into()))?;
    }
    let report = GradcheckReport {
        graphs: g.graphs,
        failed_graphs: failed,
        worst_relative_error: worst,
        ops_covered: ops,
        partition_nets: g.partition_nets,
        partition_violations: violations,
    };
    write_json(&report, &dir.join("gradcheck.json"))?;
    Ok(report)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Csv {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_row<S: AsRef<[u8]>>(w: &mut csv::Writer<fs::File>, cells: &[S]) -> Result<(), CliError> {
    w.write_record(cells).map_err(|e| CliError::Check(e.to_string()))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}
