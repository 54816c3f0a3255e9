//! Named configurations, each a single command that finishes in a few minutes
//! on one core.

use autolambda_core::tasks::RelatednessPlan;
use autolambda_core::train::StrategyConfig;
use autolambda_core::weighting::{AutoLambdaConfig, MetaGradMode};

use crate::config::{FamilyConfig, RunConfig, TeacherFamily};
use crate::error::CliError;

pub const PRESETS: [&str; 5] = [
    "noise-sanity",
    "planted-relatedness",
    "grouping-search",
    "fd-vs-exact",
    "ablation-grid",
];

/// Feature sets of a primary task and auxiliaries that share 7, 5, 3 and 1 of
/// its 8 features.
pub fn ranked_feature_sets() -> Vec<Vec<usize>> {
    let m = 8;
    let mut sets = vec![(0..m).collect::<Vec<_>>()];
    let mut next = m;
    for shared in [7, 5, 3, 1] {
        let mut s: Vec<usize> = (0..shared).collect();
        s.extend(next..next + (m - shared));
        next += m - shared;
        sets.push(s);
    }
    sets
}

pub fn ranked_family(seed: u64) -> TeacherFamily {
    let sets = ranked_feature_sets();
    let dim = sets.iter().flatten().max().map_or(1, |&f| f + 1);
    TeacherFamily {
        input_dim: dim,
        num_tasks: sets.len(),
        plan: Some(RelatednessPlan::from_feature_sets(sets, seed)),
        noise_task: false,
        seed,
        ..TeacherFamily::default()
    }
}

/// The verb a preset is meant for.
pub fn preset_verb(name: &str) -> Option<&'static str> {
    Some(match name {
        "noise-sanity" | "fd-vs-exact" => "compare",
        "planted-relatedness" => "relmatrix",
        "grouping-search" => "grouping",
        "ablation-grid" => "ablate",
        _ => return None,
    })
}

pub fn preset(name: &str) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    match name {
        "noise-sanity" => {
            cfg.strategies = vec![
                StrategyConfig::Equal,
                StrategyConfig::Uncertainty,
                StrategyConfig::AutoLambda(AutoLambdaConfig::default()),
            ];
        }
        "planted-relatedness" => {
            cfg.family = FamilyConfig::Teacher(ranked_family(0));
            cfg.trainer.steps = 3000;
        }
        "grouping-search" => {
            cfg.family = FamilyConfig::Teacher(TeacherFamily {
                noise_task: false,
                ..TeacherFamily::default()
            });
            cfg.trainer.steps = 3000;
        }
        "fd-vs-exact" => {
            cfg.strategies = [MetaGradMode::Fd, MetaGradMode::Exact]
                .into_iter()
                .map(|mode| StrategyConfig::AutoLambda(AutoLambdaConfig { mode, ..AutoLambdaConfig::default() }))
                .collect();
        }
        "ablation-grid" => {
            cfg.trainer.steps = 3000;
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown preset {other}; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(cfg)
}
