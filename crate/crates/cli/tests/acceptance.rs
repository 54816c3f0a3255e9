//! End-to-end acceptance checks. Prints one PASS or FAIL line per criterion
//! and exits non-zero when any criterion fails.
//!
//! `ACCEPTANCE_ONLY=2,8` restricts the run to the listed criteria.

use std::process::ExitCode;
use std::time::Instant;

use autolambda::commands;
use autolambda::config::{AblationDesign, FamilyConfig, RunConfig, TeacherFamily};
use autolambda::presets::{ranked_family, ranked_feature_sets};
use autolambda::CliError;
use autolambda_core::gradcheck::{dense_meta_grad_oracle, random_problem};
use autolambda_core::grouping::{best_val_losses, train_grouping, CONVERGED_FRACTION};
use autolambda_core::metrics::{delta_mtl, kendall_tau, MetricTable};
use autolambda_core::tasks::{jaccard, PairMode, RelatednessPlan};
use autolambda_core::train::{converged_weights, train, StrategyConfig, TrainOutcome};
use autolambda_core::weighting::{
    autolambda_meta_grad_exact, autolambda_meta_grad_fd, cosine, AutoLambdaConfig, LambdaState, MetaGradMode,
    DEFAULT_BETA,
};
use autolambda_core::Tensor;

const SEEDS: u64 = 5;
const SHORT_STEPS: usize = 3000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict, CliError> {
    Ok(Verdict { pass, detail })
}

fn base_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed: Some(seed),
        ..RunConfig::default()
    };
    cfg.trainer.check_finite = false;
    cfg.resolve_seed();
    cfg
}

fn no_noise(cfg: &mut RunConfig) {
    if let FamilyConfig::Teacher(t) = &mut cfg.family {
        t.noise_task = false;
    }
}

fn auto_lambda(mode: MetaGradMode) -> StrategyConfig {
    StrategyConfig::AutoLambda(AutoLambdaConfig {
        mode,
        ..AutoLambdaConfig::default()
    })
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_1() -> Result<Verdict, CliError> {
    let table = |v: [f64; 3]| {
        MetricTable::new(
            vec!["segmentation".into(), "depth".into(), "normal".into()],
            v.to_vec(),
            vec![false, true, true],
        )
    };
    let single = table([43.37, 52.24, 22.40]);
    let rows = [
        ("auto_lambda", [47.17, 40.97, 23.68], 8.21),
        ("uncertainty", [45.98, 41.26, 24.09], 6.50),
        ("equal", [44.64, 43.32, 24.48], 3.57),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, values, expected) in rows {
        let d = delta_mtl(&table(values), &single)?;
        pass &= (d - expected).abs() <= 0.01;
        parts.push(format!("{name} {d:+.3} (want {expected:+.2})"));
    }
    verdict(pass, parts.join(", "))
}

fn criterion_2() -> Result<Verdict, CliError> {
    let start = Instant::now();
    let alpha = 0.1;
    let mut worst_cos: f64 = 1.0;
    let mut worst_rel: f64 = 0.0;
    let nets = 50;
    for seed in 0..nets {
        let pr = random_problem(seed, 6, false);
        let k = pr.net.num_tasks();
        let primary: Vec<usize> = (0..k).filter(|t| t % 2 == 0).collect();
        let mut st = LambdaState::new(k, &primary, &AutoLambdaConfig::default()).map_err(|e| CliError::Train(e.into()))?;
        for (i, l) in st.lambda.iter_mut().enumerate() {
            *l = 0.2 + 0.3 * ((i as u64 + seed) % 4) as f64;
        }
        let all: Vec<usize> = (0..k).collect();
        let exact = autolambda_meta_grad_exact(&pr.net, &pr.train, &pr.val, &st, alpha, &all)
            .map_err(|e| CliError::Train(e.into()))?;
        let fd = autolambda_meta_grad_fd(&pr.net, &pr.train, &pr.val, &st, alpha, &all)
            .map_err(|e| CliError::Train(e.into()))?;
        worst_cos = worst_cos.min(cosine(&fd, &exact).unwrap_or(0.0));
        worst_rel = worst_rel.max(rel_l2(&fd, &exact));
    }
    let mut oracle_nets = 0;
    let mut oracle_rel: f64 = 0.0;
    for seed in 1000..1200 {
        if oracle_nets == 20 {
            break;
        }
        let pr = random_problem(seed, 5, true);
        let n: usize = pr.net.params().values().iter().map(Tensor::len).sum();
        if n > 200 {
            continue;
        }
        oracle_nets += 1;
        let k = pr.net.num_tasks();
        let mut st = LambdaState::new(k, &[0], &AutoLambdaConfig::default()).map_err(|e| CliError::Train(e.into()))?;
        for (i, l) in st.lambda.iter_mut().enumerate() {
            *l = 0.3 + 0.2 * i as f64;
        }
        let all: Vec<usize> = (0..k).collect();
        let exact = autolambda_meta_grad_exact(&pr.net, &pr.train, &pr.val, &st, alpha, &all)
            .map_err(|e| CliError::Train(e.into()))?;
        let oracle = dense_meta_grad_oracle(&pr.net, &pr.train, &pr.val, &st.lambda, &[0], alpha)
            .map_err(|e| CliError::Train(e.into()))?;
        oracle_rel = oracle_rel.max(rel_l2(&exact, &oracle));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_cos >= 0.999 && worst_rel <= 1e-2 && oracle_nets >= 20 && oracle_rel <= 1e-6 && secs < 60.0;
    verdict(
        pass,
        format!(
            "{nets} nets: min cosine {worst_cos:.6}, max rel {worst_rel:.2e}; oracle on {oracle_nets} nets max rel {oracle_rel:.2e}; {secs:.1}s"
        ),
    )
}

/// Criteria 3 and 4 share the default finite-difference run.
struct NoiseRuns {
    fd: TrainOutcome,
    fd_secs: f64,
    noise: usize,
    real: Vec<usize>,
}

fn noise_runs() -> Result<NoiseRuns, CliError> {
    let cfg = base_config(0);
    let family = cfg.family.build()?;
    let start = Instant::now();
    let fd = train(&family, &cfg.network, &cfg.trainer, &auto_lambda(MetaGradMode::Fd))?;
    let fd_secs = start.elapsed().as_secs_f64();
    let real = family.real_tasks();
    let noise = (0..family.num_tasks())
        .find(|t| !real.contains(t))
        .ok_or_else(|| CliError::Config("default family has no noise task".into()))?;
    Ok(NoiseRuns { fd, fd_secs, noise, real })
}

fn criterion_3(runs: &NoiseRuns) -> Result<Verdict, CliError> {
    let cfg = base_config(0);
    let family = cfg.family.build()?;
    let exact = train(&family, &cfg.network, &cfg.trainer, &auto_lambda(MetaGradMode::Exact))?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in runs.fd.records.iter().zip(&exact.records) {
        for (x, y) in a.lambda.iter().zip(&b.lambda) {
            total += (x - y).abs();
            count += 1;
        }
    }
    let mad = total / count.max(1) as f64;
    let steps = exact.records.len();
    verdict(
        steps >= 5000 && mad < 0.05,
        format!("{steps} steps, mean |lambda_fd - lambda_exact| {mad:.2e}"),
    )
}

fn criterion_4(runs: &NoiseRuns) -> Result<Verdict, CliError> {
    let cfg = base_config(0);
    let family = cfg.family.build()?;
    let w = &runs.fd.final_weights;
    let ratio = w[runs.noise] / mean(&runs.real.iter().map(|&t| w[t]).collect::<Vec<_>>());
    let start = Instant::now();
    let unc = train(&family, &cfg.network, &cfg.trainer, &StrategyConfig::Uncertainty)?;
    let secs = runs.fd_secs + start.elapsed().as_secs_f64();
    let initial = unc.records[0].lambda[runs.noise];
    let lowest = unc
        .records
        .iter()
        .map(|r| r.lambda[runs.noise])
        .fold(f64::INFINITY, f64::min);
    verdict(
        ratio < 0.25 && lowest >= 0.5 * initial && secs < 180.0,
        format!(
            "auto-lambda noise ratio {ratio:.3}; uncertainty exp(-s_noise) min {lowest:.3} vs initial {initial:.3}; {secs:.1}s"
        ),
    )
}

fn criterion_5() -> Result<Verdict, CliError> {
    let sets = ranked_feature_sets();
    let rho: Vec<f64> = sets[1..].iter().map(|s| jaccard(&sets[0], s)).collect();
    let mut taus = Vec::new();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..SEEDS {
        let mut cfg = base_config(seed);
        cfg.family = FamilyConfig::Teacher(ranked_family(seed));
        cfg.trainer.steps = SHORT_STEPS;
        let family = cfg.family.build()?;
        let mut tr = cfg.trainer.clone();
        tr.primary = Some(vec![0]);
        let out = train(&family, &cfg.network, &tr, &auto_lambda(MetaGradMode::Fd))?;
        let w = converged_weights(&out.records, CONVERGED_FRACTION);
        taus.push(kendall_tau(&w[1..], &rho));

        // Task 1 sees a superset of task 0's features.
        let mut pair = cfg.clone();
        pair.family = FamilyConfig::Teacher(TeacherFamily {
            input_dim: 8,
            num_tasks: 2,
            plan: Some(RelatednessPlan::from_feature_sets(vec![(0..4).collect(), (0..8).collect()], seed)),
            noise_task: false,
            seed,
            ..TeacherFamily::default()
        });
        let family = pair.family.build()?;
        let lam = |primary: usize, other: usize| -> Result<f64, CliError> {
            let mut tr = pair.trainer.clone();
            tr.primary = Some(vec![primary]);
            let out = train(&family, &pair.network, &tr, &auto_lambda(MetaGradMode::Fd))?;
            Ok(converged_weights(&out.records, CONVERGED_FRACTION)[other])
        };
        let a_to_b = lam(0, 1)?;
        let b_to_a = lam(1, 0)?;
        if b_to_a > a_to_b {
            wins += 1;
        }
        pairs.push(format!("{b_to_a:.3}/{a_to_b:.3}"));
    }
    let pass = taus.iter().all(|&t| t >= 0.8) && wins >= 4;
    verdict(
        pass,
        format!(
            "kendall tau per seed {:?} (mean {:.3}); lambda B->A / A->B {} ({wins}/{SEEDS} seeds B->A larger)",
            taus.iter().map(|t| (t * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            mean(&taus),
            pairs.join(" ")
        ),
    )
}

fn criterion_6() -> Result<Verdict, CliError> {
    let mut cfg = base_config(0);
    no_noise(&mut cfg);
    cfg.trainer.steps = SHORT_STEPS;
    let family = cfg.family.build()?;
    let k = family.num_tasks();
    let groupings = (1..(1u64 << k))
        .map(|s| train_grouping(&family, &cfg.network, &cfg.trainer, s, 1))
        .collect::<Result<Vec<_>, _>>()?;
    let best = best_val_losses(&groupings, k);
    let mut ratios = Vec::new();
    for t in 0..k {
        let mut tr = cfg.trainer.clone();
        tr.primary = Some(vec![t]);
        let out = train(&family, &cfg.network, &tr, &auto_lambda(MetaGradMode::Fd))?;
        ratios.push(out.val_losses[t] / best[t]);
    }
    verdict(
        ratios.iter().all(|&r| r <= 1.02),
        format!(
            "{} groupings; auto-lambda val loss / best grouping per task {:?}",
            groupings.len(),
            ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn criterion_7(out: &tempfile::TempDir) -> Result<Verdict, CliError> {
    let mut al = Vec::new();
    let mut eq = Vec::new();
    for seed in 0..SEEDS {
        let mut cfg = base_config(seed);
        no_noise(&mut cfg);
        cfg.trainer.steps = SHORT_STEPS;
        cfg.strategies = vec![StrategyConfig::Equal, auto_lambda(MetaGradMode::Fd)];
        cfg.out = Some(out.path().join(format!("c7_{seed}")).to_string_lossy().into_owned());
        let rows = commands::compare(&cfg)?;
        eq.push(rows[0].delta_mtl);
        al.push(rows[1].delta_mtl);
    }
    let (a, e) = (mean(&al), mean(&eq));
    verdict(
        a >= e,
        format!("mean delta_mtl over {SEEDS} seeds: auto-lambda {a:+.2}%, equal {e:+.2}%"),
    )
}

fn criterion_8(out: &tempfile::TempDir) -> Result<Verdict, CliError> {
    let mut cfg = base_config(0);
    cfg.out = Some(out.path().join("c8").to_string_lossy().into_owned());
    let r = commands::gradcheck(&cfg)?;
    let all_ops = [
        "Add",
        "Exp",
        "MatMul",
        "MseLoss",
        "Mul",
        "Relu",
        "Scale",
        "SoftmaxCrossEntropy",
        "Sum",
        "Tanh",
    ];
    let missing: Vec<&str> = all_ops
        .iter()
        .copied()
        .filter(|op| !r.ops_covered.iter().any(|c| c == op))
        .collect();
    verdict(
        r.graphs >= 100 && r.passed() && missing.is_empty(),
        format!(
            "{} graphs, {} failed, worst rel {:.2e}, ops not covered {:?}; partition {} nets, {} violations",
            r.graphs,
            r.failed_graphs.len(),
            r.worst_relative_error,
            missing,
            r.partition_nets,
            r.partition_violations
        ),
    )
}

fn criterion_9(out: &tempfile::TempDir) -> Result<Verdict, CliError> {
    let mut cfg = base_config(0);
    cfg.trainer.steps = SHORT_STEPS;
    cfg.ablation.inits = vec![0.1, 1.0];
    cfg.ablation.betas = vec![DEFAULT_BETA, 10.0 * DEFAULT_BETA];
    cfg.ablation.pair_modes = vec![PairMode::Swap, PairMode::NoSwap];
    cfg.ablation.seeds = SEEDS as usize;
    cfg.ablation.design = AblationDesign::OneAtATime;
    cfg.out = Some(out.path().join("c9").to_string_lossy().into_owned());
    let rows = commands::ablate(&cfg)?;
    let cell = |c: usize| rows.iter().filter(move |r| r.cell.cell == c);
    let ratio = |c: usize| mean(&cell(c).filter_map(|r| r.noise_ratio()).collect::<Vec<_>>());
    let lam = |c: usize| mean(&cell(c).map(|r| r.mean_real_lambda).collect::<Vec<_>>());
    let (r_small, r_large) = (ratio(0), ratio(1));
    let (l_small, l_large) = (lam(0), lam(2));
    let no_swap_not_better = cell(0)
        .zip(cell(3))
        .filter(|(swap, no_swap)| no_swap.delta_mtl <= swap.delta_mtl)
        .count();
    let pass = r_large > r_small && l_large > l_small && no_swap_not_better >= 3;
    verdict(
        pass,
        format!(
            "noise ratio init 1.0 {r_large:.3} vs 0.1 {r_small:.3}; mean real lambda beta {} {l_large:.3} vs {} {l_small:.3}; no_swap no better on {no_swap_not_better}/{SEEDS} seeds",
            10.0 * DEFAULT_BETA,
            DEFAULT_BETA
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let out = tempfile::tempdir().expect("temporary directory");
    let mut failures = 0;
    let mut report = |n: usize, name: &str, start: Instant, res: Result<Verdict, CliError>| {
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(v) => {
                if !v.pass {
                    failures += 1;
                }
                println!(
                    "criterion {n} {}: {name}: {} [{secs:.1}s]",
                    if v.pass { "PASS" } else { "FAIL" },
                    v.detail
                );
            }
            Err(e) => {
                failures += 1;
                println!("criterion {n} FAIL: {name}: error {e} [{secs:.1}s]");
            }
        }
    };

    if wanted(1) {
        report(1, "delta_mtl arithmetic", Instant::now(), criterion_1());
    }
    if wanted(2) {
        report(2, "fd vs exact meta-gradient", Instant::now(), criterion_2());
    }
    if wanted(3) || wanted(4) {
        let start = Instant::now();
        match noise_runs() {
            Ok(runs) => {
                if wanted(3) {
                    report(3, "fd and exact trajectories agree", start, criterion_3(&runs));
                }
                if wanted(4) {
                    report(4, "noise task suppression", Instant::now(), criterion_4(&runs));
                }
            }
            Err(e) => {
                let msg = e.to_string();
                for n in [3, 4].into_iter().filter(|&n| wanted(n)) {
                    report(n, "noise family runs", start, Err(CliError::Check(msg.clone())));
                }
            }
        }
    }
    if wanted(5) {
        report(5, "relatedness recovery", Instant::now(), criterion_5());
    }
    if wanted(6) {
        report(6, "matches the best fixed grouping", Instant::now(), criterion_6());
    }
    if wanted(7) {
        report(7, "multi-task improvement over equal", Instant::now(), criterion_7(&out));
    }
    if wanted(8) {
        report(8, "autodiff soundness", Instant::now(), criterion_8(&out));
    }
    if wanted(9) {
        report(9, "ablation directions", Instant::now(), criterion_9(&out));
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
