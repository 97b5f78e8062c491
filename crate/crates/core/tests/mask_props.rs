//! Property tests for factorization orders, target selection, and the
//! visibility-mask invariants.

use proptest::prelude::*;

use permlm_core::mask::{
    build_attention_masks, sample_factorization_order, select_prediction_targets, Permutation,
};
use permlm_core::rng::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_orders_are_bijections(t in 1usize..40, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let perm = sample_factorization_order(t, &mut rng).unwrap();
        let mut seen = vec![false; t];
        for &p in perm.order() {
            prop_assert!((1..=t).contains(&p));
            prop_assert!(!seen[p - 1]);
            seen[p - 1] = true;
        }
        for (pos0, _) in seen.iter().enumerate() {
            prop_assert_eq!(perm.order()[perm.rank0(pos0)], pos0 + 1);
        }
    }

    #[test]
    fn mask_invariants_hold_for_random_orders(
        t in 1usize..24,
        mem in 0usize..8,
        k in 1.0f64..8.0,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let perm = sample_factorization_order(t, &mut rng).unwrap();
        let sel = select_prediction_targets(&perm, k).unwrap();
        let masks = build_attention_masks(&perm, &sel, mem).unwrap();
        masks.check_invariants().unwrap();

        // antisymmetry on the current segment: exactly one direction visible
        for i in 0..t {
            for j in 0..t {
                if i != j {
                    prop_assert!(
                        masks.content.get(i, mem + j) != masks.content.get(j, mem + i),
                        "positions {i} and {j} must see each other in exactly one direction"
                    );
                }
            }
        }

        // union property: rank r sees exactly r+1 current positions plus memory
        for i in 0..t {
            let visible = masks.content.row_count_true(i);
            prop_assert_eq!(visible, mem + perm.rank0(i) + 1);
            let q_visible = masks.query.row_count_true(i);
            prop_assert_eq!(q_visible, mem + perm.rank0(i));
        }
    }

    #[test]
    fn masks_are_pure_functions_of_their_inputs(
        t in 1usize..16,
        mem in 0usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let perm = sample_factorization_order(t, &mut rng).unwrap();
        let sel = select_prediction_targets(&perm, 3.0).unwrap();
        let a = build_attention_masks(&perm, &sel, mem).unwrap();
        let b = build_attention_masks(&perm, &sel, mem).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn target_fraction_stays_within_one_over_t_of_one_over_k(
        t in 1usize..128,
        k in 1.0f64..12.0,
    ) {
        let perm = Permutation::identity(t).unwrap();
        let sel = select_prediction_targets(&perm, k).unwrap();
        let fraction = sel.targets.len() as f64 / t as f64;
        prop_assert!(
            fraction >= 1.0 / k - 1.0 / t as f64 - 1e-12
                && fraction <= 1.0 / k + 1.0 / t as f64 + 1e-12,
            "fraction {fraction} outside 1/{k} +- 1/{t}"
        );
    }

    #[test]
    fn targets_are_always_the_order_tail(t in 1usize..32, k in 1.0f64..8.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let perm = sample_factorization_order(t, &mut rng).unwrap();
        let sel = select_prediction_targets(&perm, k).unwrap();
        prop_assert_eq!(&sel.targets[..], &perm.order()[sel.cut..]);
        prop_assert!(!sel.targets.is_empty());
    }
}
