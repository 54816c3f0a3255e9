use autolambda_core::grouping::{
    best_groupings, grouping_search, relationship_matrix, relationship_row, train_grouping, GroupingOptions,
};
use autolambda_core::metrics::kendall_tau;
use autolambda_core::tasks::{gen_teacher_family, PoolSizes, RelatednessPlan, TaskFamily, TeacherConfig};
use autolambda_core::train::{train, NetworkShape, StrategyConfig, TrainerConfig};
use autolambda_core::weighting::AutoLambdaConfig;

fn family(overlap: Vec<Vec<f64>>, input_dim: usize, seed: u64) -> TaskFamily {
    gen_teacher_family(&TeacherConfig {
        input_dim,
        plan: RelatednessPlan {
            overlap,
            teacher_seed: seed,
            feature_sets: None,
        },
        noise_std: 0.1,
        seed,
        sizes: PoolSizes {
            train: 1024,
            val: 256,
            test: 512,
        },
        multi_domain: false,
        names: Vec::new(),
    })
    .unwrap()
}

fn planted(seed: u64) -> TaskFamily {
    family(
        vec![vec![1.0, 0.8, 0.2], vec![0.8, 1.0, 0.2], vec![0.2, 0.2, 1.0]],
        24,
        seed,
    )
}

fn shape(seed: u64) -> NetworkShape {
    NetworkShape {
        trunk_layers: vec![16, 16],
        seed,
        ..NetworkShape::default()
    }
}

fn trainer(steps: usize, seed: u64) -> TrainerConfig {
    TrainerConfig {
        steps,
        batch_size: 64,
        seed,
        check_finite: false,
        ..TrainerConfig::default()
    }
}

#[test]
fn search_sizes_and_singleton_equivalence() {
    let fam = planted(0);
    let results = grouping_search(&fam, &shape(0), &trainer(50, 0), &GroupingOptions::default()).unwrap();
    assert_eq!(results.len(), 7);
    assert!(results.iter().all(|r| !r.members.is_empty()));

    let one = fam.select_tasks(&[1]).unwrap();
    let only = grouping_search(&one, &shape(0), &trainer(50, 0), &GroupingOptions::default()).unwrap();
    assert_eq!(only.len(), 1);
    let direct = train(&one, &shape(0), &trainer(50, 0), &StrategyConfig::Equal).unwrap();
    assert_eq!(only[0].val_losses, direct.val_losses);
    assert_eq!(only[0].delta_pct, vec![0.0]);
}

#[test]
fn search_is_deterministic() {
    let fam = planted(1);
    let run = || grouping_search(&fam, &shape(1), &trainer(40, 1), &GroupingOptions::default()).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn budget_cap_is_enforced() {
    let fam = planted(0);
    let opts = GroupingOptions { cap: 6, seeds: 1 };
    assert!(grouping_search(&fam, &shape(0), &trainer(10, 0), &opts).is_err());
}

#[test]
fn best_group_of_a_task_includes_its_close_relative() {
    let mut hits = 0;
    for seed in 0..3 {
        let fam = planted(seed);
        let cfg = trainer(1500, seed);
        let results = grouping_search(&fam, &shape(seed), &cfg, &GroupingOptions::default()).unwrap();
        let best = &best_groupings(&results, 3)[0];
        if best.subset & 0b010 != 0 && best.subset & 0b100 == 0 {
            hits += 1;
        }
    }
    assert!(hits >= 2, "best group of task 0 held task 1 without task 2 on {hits}/3 seeds");
}

#[test]
fn identical_tasks_weight_each_other_alike() {
    let base = planted(2);
    let fam = base.select_tasks(&[0, 0]).unwrap();
    let m = relationship_matrix(&fam, &shape(2), &trainer(1500, 2), &AutoLambdaConfig::default()).unwrap();
    let diff = (m.get(0, 1) - m.get(1, 0)).abs();
    assert!(diff < 0.1, "{:?}", m.values);
}

/// Task 0 reads features 0..8; auxiliary j shares 7, 5, 3 or 1 of them.
fn ranked(seed: u64) -> TaskFamily {
    let mut sets = vec![(0..8).collect::<Vec<usize>>()];
    let mut next = 8;
    for shared in [7, 5, 3, 1] {
        let mut s: Vec<usize> = (0..shared).collect();
        s.extend(next..next + 8 - shared);
        next += 8 - shared;
        sets.push(s);
    }
    gen_teacher_family(&TeacherConfig {
        input_dim: next,
        plan: RelatednessPlan::from_feature_sets(sets, seed),
        noise_std: 0.1,
        seed,
        sizes: PoolSizes {
            train: 1024,
            val: 256,
            test: 512,
        },
        multi_domain: false,
        names: Vec::new(),
    })
    .unwrap()
}

#[test]
fn converged_weights_track_grouping_gains() {
    // Converged weights of the auxiliaries of task 0 against the validation
    // gain each brings as task 0's pair partner under equal weighting.
    let mut taus = Vec::new();
    for seed in 0..3 {
        let fam = ranked(seed);
        let cfg = trainer(1500, seed);
        let w = relationship_row(&fam, &shape(seed), &cfg, &AutoLambdaConfig::default(), 0).unwrap();
        let val0 = |subset: u64| train_grouping(&fam, &shape(seed), &cfg, subset, 1).unwrap().val_losses[0];
        let single = val0(0b1);
        let gains: Vec<f64> = (1..5).map(|j| single - val0(1 | 1 << j)).collect();
        println!("seed {seed}: weights {:?}, gains {gains:?}", &w[1..]);
        taus.push(kendall_tau(&w[1..], &gains));
    }
    let mean = taus.iter().sum::<f64>() / taus.len() as f64;
    assert!(mean > 0.0, "tau per seed {taus:?}");
}

#[test]
fn closer_auxiliary_receives_larger_weight() {
    let mut hits = 0;
    for seed in 0..3 {
        let fam = planted(seed);
        let w = relationship_row(&fam, &shape(seed), &trainer(1500, seed), &AutoLambdaConfig::default(), 0).unwrap();
        if w[1] > w[2] {
            hits += 1;
        }
    }
    assert!(hits >= 2, "rho 0.8 auxiliary outweighed the rho 0.2 one on {hits}/3 seeds");
}
