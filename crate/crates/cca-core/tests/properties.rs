//! Property tests over op invariants, sampling invariants, and hinge
//! semantics.

use proptest::prelude::*;

use cca_core::config::ConditionId;
use cca_core::eval::average_precision;
use cca_core::tape::Tape;
use cca_core::tensor::{l2_norm, Precision, Tensor};
use cca_core::triplet::{triplet_loss, ItemId, LabelTable, TripletSampler};
use cca_core::rng::{sub_rng, Domain};

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-50.0f64..50.0, len..=len)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        data in finite_vec(12),
        shift in -100.0f64..100.0,
    ) {
        let mut tape = Tape::new(Precision::F64);
        let a = tape.constant(vec![3, 4], data.clone()).unwrap();
        let s = tape.softmax(a, 1).unwrap();
        for row in tape.data(s).chunks_exact(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let shifted: Vec<f64> = data.iter().map(|&x| x + shift).collect();
        let b = tape.constant(vec![3, 4], shifted).unwrap();
        let s2 = tape.softmax(b, 1).unwrap();
        let lhs = tape.data(s).to_vec();
        for (x, y) in lhs.iter().zip(tape.data(s2)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_produces_unit_rows(data in finite_vec(8)) {
        prop_assume!(l2_norm(&data) > 1e-6);
        let mut tape = Tape::new(Precision::F64);
        let a = tape.constant(vec![1, 8], data).unwrap();
        let n = tape.l2_normalize(a, 1e-9).unwrap();
        prop_assert!((l2_norm(tape.data(n)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hinge_matches_closed_form_on_distance_pairs(
        d_pos in 0.0f64..2.0,
        d_neg in 0.0f64..2.0,
        margin in 0.01f64..1.0,
    ) {
        // unit vectors realizing the requested cosine distances exactly
        let cos_p = 1.0 - d_pos;
        let cos_n = 1.0 - d_neg;
        let a = vec![1.0, 0.0, 0.0];
        let p = vec![cos_p, (1.0 - cos_p * cos_p).max(0.0).sqrt(), 0.0];
        let n = vec![cos_n, 0.0, (1.0 - cos_n * cos_n).max(0.0).sqrt()];
        let mut tape = Tape::new(Precision::F64);
        let ai = tape.constant(vec![1, 3], a).unwrap();
        let pi = tape.constant(vec![1, 3], p).unwrap();
        let ni = tape.constant(vec![1, 3], n).unwrap();
        let loss = triplet_loss(&mut tape, ai, pi, ni, margin).unwrap();
        let expected = (cos_n - cos_p + margin).max(0.0);
        prop_assert!((tape.data(loss)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn average_precision_stays_in_unit_interval(rel in proptest::collection::vec(any::<bool>(), 1..30)) {
        prop_assume!(rel.iter().any(|&r| r));
        let ap = average_precision(&rel).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn average_precision_ignores_items_below_last_relevant(
        rel in proptest::collection::vec(any::<bool>(), 1..20),
        tail in proptest::collection::vec(Just(false), 0..10),
    ) {
        prop_assume!(rel.iter().any(|&r| r));
        let mut extended = rel.clone();
        extended.extend(tail);
        prop_assert_eq!(average_precision(&rel).unwrap(), average_precision(&extended).unwrap());
    }

    #[test]
    fn sampled_triplets_always_satisfy_the_label_invariants(
        seed in 0u64..500,
        num_items in 6usize..40,
        classes in 2u32..4,
        conditions in 1usize..4,
    ) {
        let mut table = LabelTable::new(conditions);
        let mut label_rng = sub_rng(seed, Domain::Aux, 200);
        for i in 0..num_items {
            use rand::Rng;
            let labels: Vec<u32> = (0..conditions)
                .map(|_| label_rng.gen_range(0..classes))
                .collect();
            table.insert(ItemId(i as u32), labels).unwrap();
        }
        let Ok(sampler) = TripletSampler::new(&table) else {
            // degenerate label draw; the precondition correctly rejects it
            return Ok(());
        };
        let mut rng = sub_rng(seed, Domain::Sampling, 9);
        for (i, t) in sampler.sample_triplets(60, &mut rng).into_iter().enumerate() {
            prop_assert!(table.satisfies(&t), "triplet {i} violates labels: {t:?}");
            prop_assert!(t.anchor != t.positive);
            prop_assert_eq!(t.condition, ConditionId((i % conditions) as u32));
        }
    }

    #[test]
    fn tensor_shape_contract(shape in proptest::collection::vec(1usize..6, 1..3)) {
        let numel: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.5; numel]).is_ok());
        prop_assert!(Tensor::new(shape, vec![0.5; numel + 1]).is_err());
    }
}
