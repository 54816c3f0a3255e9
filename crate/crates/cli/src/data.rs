//! CSV ingestion and export of single-domain task families.

use std::collections::HashMap;
use std::path::Path;

use autolambda_core::network::LossKind;
use autolambda_core::tasks::{Inputs, Pool, PoolKind, TaskFamily, TaskInfo, TaskRole};
use autolambda_core::{TaskError, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CsvSchema, CsvTask};
use crate::error::CliError;

/// Name of the split column written by [`export_family_csv`].
pub const SPLIT_COLUMN: &str = "split";

fn csv_err(path: &Path, source: csv::Error) -> CliError {
    match source.kind() {
        csv::ErrorKind::Io(_) => match source.into_kind() {
            csv::ErrorKind::Io(e) => CliError::io(path, e),
            _ => unreachable!(),
        },
        _ => CliError::Csv {
            path: path.to_path_buf(),
            source,
        },
    }
}

fn mismatch(msg: String) -> CliError {
    CliError::Task(TaskError::SchemaMismatch(msg))
}

fn task_info(t: &CsvTask) -> Result<TaskInfo, CliError> {
    let info = match t.loss {
        LossKind::Mse => {
            if t.targets.is_empty() {
                return Err(mismatch(format!("task {} has no target columns", t.name)));
            }
            TaskInfo::regression(&t.name, t.targets.len())
        }
        LossKind::SoftmaxCe => {
            let classes = t
                .classes
                .ok_or_else(|| mismatch(format!("task {} needs a class count", t.name)))?;
            if t.targets.len() != 1 || classes < 2 {
                return Err(mismatch(format!(
                    "task {} needs one class column and at least two classes",
                    t.name
                )));
            }
            TaskInfo::classification(&t.name, classes)
        }
    };
    Ok(if t.noise {
        TaskInfo {
            role: TaskRole::Noise,
            ..info
        }
    } else {
        info
    })
}

/// Reads a CSV file with a header row into a family. Rows are shuffled under
/// `seed` before the split, so the same file and seed always give the same
/// pools.
pub fn load_csv_dataset(path: &Path, schema: &CsvSchema, seed: u64) -> Result<TaskFamily, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let index: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let col = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| mismatch(format!("column {name} not in header")))
    };
    if schema.inputs.is_empty() || schema.tasks.is_empty() {
        return Err(mismatch("schema needs input columns and at least one task".into()));
    }
    let input_cols = schema.inputs.iter().map(|c| col(c)).collect::<Result<Vec<_>, _>>()?;
    let target_cols = schema
        .tasks
        .iter()
        .map(|t| t.targets.iter().map(|c| col(c)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let split_col = schema.split_column.as_deref().map(col).transpose()?;
    let infos = schema.tasks.iter().map(task_info).collect::<Result<Vec<_>, _>>()?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        if record.len() != header.len() {
            return Err(mismatch(format!(
                "row {} has {} cells, header has {}",
                r + 1,
                record.len(),
                header.len()
            )));
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        CliError::Task(TaskError::NonNumericCell {
                            row: r + 1,
                            column: header[c].clone(),
                        })
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(mismatch("file has no data rows".into()));
    }
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut parts: [Vec<&Vec<f64>>; 3] = Default::default();
    match split_col {
        Some(c) => {
            for row in &rows {
                let s = row[c];
                if s != 0.0 && s != 1.0 && s != 2.0 {
                    return Err(mismatch(format!("split value {s} is not 0, 1 or 2")));
                }
                parts[s as usize].push(row);
            }
        }
        None => {
            let n = rows.len();
            let (fv, ft) = (schema.val_fraction, schema.test_fraction);
            if !(fv >= 0.0 && ft >= 0.0 && fv + ft < 1.0) {
                return Err(mismatch("split fractions must be non-negative and sum below 1".into()));
            }
            let n_test = (n as f64 * ft).round() as usize;
            let n_val = (n as f64 * fv).round() as usize;
            let n_train = n.saturating_sub(n_test + n_val);
            for (i, row) in rows.iter().enumerate() {
                let p = if i < n_train {
                    0
                } else if i < n_train + n_val {
                    1
                } else {
                    2
                };
                parts[p].push(row);
            }
        }
    }
    if parts.iter().any(Vec::is_empty) {
        return Err(mismatch("train, validation and test pools must all be non-empty".into()));
    }

    let make_pool = |rows: &[&Vec<f64>]| -> Result<Pool, CliError> {
        let n = rows.len();
        let x = rows.iter().flat_map(|r| input_cols.iter().map(|&c| r[c])).collect();
        let x = Tensor::new(vec![n, input_cols.len()], x).map_err(TaskError::from)?;
        let targets = infos
            .iter()
            .zip(&target_cols)
            .map(|(info, cols)| {
                let data = rows.iter().flat_map(|r| cols.iter().map(|&c| r[c])).collect();
                let shape = match info.loss {
                    LossKind::Mse => vec![n, cols.len()],
                    LossKind::SoftmaxCe => vec![n],
                };
                Tensor::new(shape, data).map_err(TaskError::from)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Pool {
            inputs: Inputs::Shared(x),
            targets,
        })
    };
    let [train, val, test] = &parts;
    let pools = (make_pool(train)?, make_pool(val)?, make_pool(test)?);
    let family = TaskFamily::from_pools(
        infos,
        input_cols.len(),
        pools.0,
        pools.1,
        pools.2,
    )
    .map_err(|e| match e {
        TaskError::InvalidFamily(m) => mismatch(m),
        other => CliError::Task(other),
    })?;
    Ok(family)
}

/// Writes every pool of a single-domain family to one CSV file with a split
/// column, and returns the schema that reads it back.
pub fn export_family_csv(family: &TaskFamily, path: &Path) -> Result<CsvSchema, CliError> {
    if !family.is_single_domain() {
        return Err(CliError::Config("only single-domain families can be exported".into()));
    }
    let inputs: Vec<String> = (0..family.input_dim()).map(|i| format!("x{i}")).collect();
    let tasks: Vec<CsvTask> = family
        .tasks()
        .iter()
        .map(|t| CsvTask {
            name: t.name.clone(),
            targets: match t.loss {
                LossKind::SoftmaxCe => vec![t.name.clone()],
                LossKind::Mse if t.output_dim == 1 => vec![t.name.clone()],
                LossKind::Mse => (0..t.output_dim).map(|j| format!("{}_{j}", t.name)).collect(),
            },
            loss: t.loss,
            classes: (t.loss == LossKind::SoftmaxCe).then_some(t.output_dim),
            noise: t.role == TaskRole::Noise,
        })
        .collect();
    let mut header = inputs.clone();
    header.extend(tasks.iter().flat_map(|t| t.targets.iter().cloned()));
    header.push(SPLIT_COLUMN.to_string());

    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (s, kind) in [PoolKind::Train, PoolKind::Val, PoolKind::Test].into_iter().enumerate() {
        let pool = family.pool(kind);
        let x = pool.inputs_for(0);
        for r in 0..x.rows() {
            let mut cells: Vec<String> = x.row(r).iter().map(|v| v.to_string()).collect();
            for t in &pool.targets {
                let width = t.len() / t.shape()[0];
                cells.extend(t.data()[r * width..(r + 1) * width].iter().map(|v| v.to_string()));
            }
            cells.push(s.to_string());
            w.write_record(&cells).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(CsvSchema {
        inputs,
        tasks,
        split_column: Some(SPLIT_COLUMN.to_string()),
        val_fraction: 0.0,
        test_fraction: 0.0,
    })
}
