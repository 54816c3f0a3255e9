use std::path::PathBuf;
use std::process::ExitCode;

use autolambda::commands;
use autolambda::config::{Overrides, RunConfig};
use autolambda::presets::{preset, preset_verb};
use autolambda::CliError;
use clap::{Args, Parser, Subcommand};
use log::{error, info, warn, LevelFilter};

const LOG_ENV: &str = "AUTOLAMBDA_LOG_LEVEL";

#[derive(Parser)]
#[command(name = "autolambda", version, about = "Multi-task loss weighting experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train one network with the configured strategy.
    Run(Common),
    /// Train several strategies and report the change over single-task runs.
    Compare(Common),
    /// Train every equal-weight task grouping.
    Grouping(Common),
    /// Auxiliary-mode runs with each task as the only primary task.
    Relmatrix(Common),
    /// Weight initialisation, weight learning rate and batch pairing ablation.
    Ablate(Common),
    /// Check reverse-mode gradients against central differences.
    Gradcheck(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data, network and batches; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum concurrent trainings.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Start from a named preset instead of the defaults.
    #[arg(long)]
    preset: Option<String>,
}

fn log_level() -> Result<LevelFilter, CliError> {
    match std::env::var(LOG_ENV) {
        Err(_) => Ok(LevelFilter::Info),
        Ok(v) => match v.to_ascii_lowercase().as_str() {
            "error" => Ok(LevelFilter::Error),
            "info" => Ok(LevelFilter::Info),
            "debug" => Ok(LevelFilter::Debug),
            _ => Err(CliError::Config(format!("{LOG_ENV} must be error, info or debug, got {v:?}"))),
        },
    }
}

fn load(common: &Common, verb: &str) -> Result<RunConfig, CliError> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(_), Some(_)) => return Err(CliError::Config("use either --config or --preset".into())),
        (Some(path), None) => RunConfig::load(path)?,
        (None, Some(name)) => {
            let cfg = preset(name)?;
            if preset_verb(name) != Some(verb) {
                warn!("preset {name} is meant for `{}`", preset_verb(name).unwrap_or("?"));
            }
            cfg
        }
        (None, None) => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        jobs: common.jobs,
        out: common.out.clone(),
    });
    cfg.resolve_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn execute(verb: Verb) -> Result<(), CliError> {
    match verb {
        Verb::Run(c) => {
            let s = commands::run(&load(&c, "run")?)?;
            println!("strategy {}  steps {}  {:.1}s", s.strategy, s.steps_completed, s.wall_clock_secs);
            for (i, name) in s.task_names.iter().enumerate() {
                println!(
                    "{name:>12}  lambda {:>10.4}  val {:>10.5}  test {:>10.5}",
                    s.final_weights[i], s.val_losses[i], s.test_losses[i]
                );
            }
        }
        Verb::Compare(c) => {
            for r in commands::compare(&load(&c, "compare")?)? {
                let noise = r.lambda_noise.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                println!("{:>3} {:<12} delta_mtl {:>+8.2}%  lambda_noise {noise}", r.run, r.strategy, r.delta_mtl);
            }
        }
        Verb::Grouping(c) => {
            for r in commands::grouping(&load(&c, "grouping")?)? {
                let d: Vec<String> = r.delta_pct.iter().map(|d| format!("{d:+.2}")).collect();
                println!("subset {:#08b}  members {:?}  delta_pct [{}]", r.subset, r.members, d.join(", "));
            }
        }
        Verb::Relmatrix(c) => {
            let m = commands::relmatrix(&load(&c, "relmatrix")?)?;
            println!("{:>12} {}", "primary", m.names.iter().map(|n| format!("{n:>9}")).collect::<String>());
            for (i, row) in m.values.iter().enumerate() {
                println!("{:>12} {}", m.names[i], row.iter().map(|v| format!("{v:>9.4}")).collect::<String>());
            }
        }
        Verb::Ablate(c) => {
            for r in commands::ablate(&load(&c, "ablate")?)? {
                println!(
                    "cell {:>2} init {:<5} beta {:<6} {:<8} seed {}  delta_mtl {:>+8.2}%  noise ratio {}",
                    r.cell.cell,
                    r.cell.init,
                    r.cell.beta,
                    commands::pair_mode_name(r.cell.pair_mode),
                    r.seed,
                    r.delta_mtl,
                    r.noise_ratio().map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
                );
            }
        }
        Verb::Gradcheck(c) => {
            let r = commands::gradcheck(&load(&c, "gradcheck")?)?;
            println!(
                "{} graphs, {} failed, worst relative error {:.2e}, ops {}",
                r.graphs,
                r.failed_graphs.len(),
                r.worst_relative_error,
                r.ops_covered.join(" ")
            );
            println!("partition: {} nets, {} violations", r.partition_nets, r.partition_violations);
            if !r.passed() {
                return Err(CliError::Check("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let level = match log_level() {
        Ok(l) => l,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    env_logger::Builder::new().filter_level(level).format_timestamp_millis().init();
    let cli = Cli::parse();
    match execute(cli.verb) {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
