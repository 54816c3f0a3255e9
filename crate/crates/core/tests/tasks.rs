use autolambda_core::tasks::{
    add_noise_task, gen_teacher_family, sample_batch_pair, transfer_probe_error, PairMode, PoolKind, PoolSizes,
    RelatednessPlan, TeacherConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn family(plan: RelatednessPlan, input_dim: usize, train: usize, seed: u64) -> autolambda_core::tasks::TaskFamily {
    gen_teacher_family(&TeacherConfig {
        input_dim,
        plan,
        noise_std: 0.1,
        seed,
        sizes: PoolSizes {
            train,
            val: 64,
            test: 256,
        },
        multi_domain: false,
        names: Vec::new(),
    })
    .unwrap()
}

#[test]
fn noise_targets_average_one_half() {
    let base = family(RelatednessPlan::uniform(2, 0.5, 3), 8, 2500, 3);
    let fam = add_noise_task(&base, 17);
    let noise = &fam.pool(PoolKind::Train).targets[2];
    assert!(noise.len() >= 10_000);
    let mean = noise.data().iter().sum::<f64>() / noise.len() as f64;
    assert!((mean - 0.5).abs() <= 0.02, "mean {mean}");
}

#[test]
fn ridge_probe_error_falls_with_shared_features() {
    // Task 0 reads features 0..8; task j shares 7, 5, 3 or 1 of them.
    let mut sets = vec![(0..8).collect::<Vec<usize>>()];
    let mut next = 8;
    for shared in [7, 5, 3, 1] {
        let mut s: Vec<usize> = (0..shared).collect();
        s.extend(next..next + 8 - shared);
        next += 8 - shared;
        sets.push(s);
    }
    for seed in 0..3 {
        let fam = family(RelatednessPlan::from_feature_sets(sets.clone(), seed), next, 2048, seed);
        let errs: Vec<f64> = (1..sets.len())
            .map(|j| transfer_probe_error(&fam, j, 0, 1e-3).unwrap())
            .collect();
        assert!(errs.windows(2).all(|w| w[0] < w[1]), "seed {seed}: {errs:?}");
    }
}

#[test]
fn identical_seeds_give_identical_batch_sequences() {
    let fam = family(RelatednessPlan::uniform(3, 0.5, 1), 12, 128, 1);
    let draw = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..5)
            .map(|_| sample_batch_pair(&fam, 16, PairMode::Swap, &[0, 2], &mut rng).unwrap().train_rows)
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(), draw());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn swap_batches_are_disjoint_and_no_swap_identical(seed in 0u64..1000, batch in 1usize..32) {
        let fam = family(RelatednessPlan::uniform(2, 0.5, 2), 8, 64, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let swap = sample_batch_pair(&fam, batch, PairMode::Swap, &[0, 1], &mut rng).unwrap();
        for t in 0..2 {
            let val = swap.val_rows[t].as_ref().unwrap();
            prop_assert!(swap.train_rows[t].iter().all(|r| !val.contains(r)));
        }
        let same = sample_batch_pair(&fam, batch, PairMode::NoSwap, &[1], &mut rng).unwrap();
        prop_assert_eq!(Some(&same.train_rows[1]), same.val_rows[1].as_ref());
    }
}
