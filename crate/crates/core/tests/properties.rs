use ndarray::Array2;
use proptest::prelude::*;
use reiil_core::data::{decode_dataset, merge_by_partition, split_by_partition, write_dataset};
use reiil_core::datagen::{gen_sem, random_orthogonal, SemGroundTruth};
use reiil_core::envinfer::{ei_objective, exhaustive_ei, hard_ei_objective, sign_partition};
use reiil_core::metrics::{causal_errors, conjecture_gap, mutual_info_discrete};
use reiil_core::models::LinearModel;
use reiil_core::objectives::{irm_penalty, PerSampleStats, RiskNormalization};
use reiil_core::{Dataset, EnvPartition, Labels, Meta, RngSeed, Task};

fn class_dataset(rows: &[(f32, f32, u32, i32, bool)]) -> Dataset {
    let n = rows.len();
    let x = Array2::from_shape_fn((n, 2), |(i, j)| f64::from(if j == 0 { rows[i].0 } else { rows[i].1 }));
    let labels = rows.iter().map(|r| r.2).collect();
    let meta = Meta {
        env_id: Some((0..n as i32).collect()),
        spurious_id: Some(rows.iter().map(|r| r.3).collect()),
        causal_id: Some(rows.iter().map(|r| r.2 as i32).collect()),
        is_shuffled: Some(rows.iter().map(|r| r.4).collect()),
    };
    Dataset::new(x, Labels::Class(labels), Task::Multiclass(4), meta).unwrap()
}

fn rows(max: usize) -> impl Strategy<Value = Vec<(f32, f32, u32, i32, bool)>> {
    prop::collection::vec((-1e3f32..1e3, -1e3f32..1e3, 0u32..4, 0i32..4, any::<bool>()), 2..max)
}

fn stats(g: Vec<f64>) -> PerSampleStats {
    PerSampleStats {
        losses: vec![0.0; g.len()],
        w_grads: g,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mutual_information_is_symmetric(pairs in prop::collection::vec((0i32..5, 0i32..5), 1..200)) {
        let (a, b): (Vec<i32>, Vec<i32>) = pairs.into_iter().unzip();
        let ab = mutual_info_discrete(&a, &b);
        prop_assert!((ab - mutual_info_discrete(&b, &a)).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(mutual_info_discrete(&a, &vec![3; a.len()]), 0.0);
    }

    #[test]
    fn split_then_merge_restores_rows(data in rows(60), bits in prop::collection::vec(any::<bool>(), 60)) {
        let d = class_dataset(&data);
        let p = EnvPartition::from_hard(bits[..d.len()].iter().map(|&b| u8::from(b)).collect()).unwrap();
        let split = split_by_partition(&d, &p).unwrap();
        let (n0, n1) = split.sizes();
        prop_assert_eq!(n0 + n1, d.len());
        prop_assert_eq!(merge_by_partition(&split, &p).unwrap(), d);
    }

    #[test]
    fn serialization_round_trips(data in rows(40)) {
        let d = class_dataset(&data);
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        prop_assert_eq!(decode_dataset(&buf).unwrap(), d);
    }

    #[test]
    fn conjecture_gap_ignores_row_order(data in rows(50), seed in any::<u64>()) {
        let d = class_dataset(&data);
        let half: Vec<usize> = (0..d.len()).step_by(2).collect();
        let mut shuffled = half.clone();
        let mut s = seed | 1;
        for i in (1..shuffled.len()).rev() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            shuffled.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let a = conjecture_gap(&d, &d.select(&half).unwrap()).unwrap();
        let b = conjecture_gap(&d, &d.select(&shuffled).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(conjecture_gap(&d, &d).unwrap().abs() < 1e-12);
    }

    #[test]
    fn causal_errors_agree_across_scrambling(w in prop::collection::vec(-2.0f64..2.0, 6), seed in any::<u64>()) {
        let d = 3;
        let (_, mut truth) = gen_sem("FOU".parse().unwrap(), d, 1, &[1.0], RngSeed(seed)).unwrap();
        let plain = causal_errors(&LinearModel::from_weights(w.clone(), None), &truth).unwrap();
        truth.scramble = random_orthogonal(2 * d, &mut RngSeed(seed).derive("mix").rng());
        let mixed_w = truth.scramble.dot(&ndarray::Array1::from(w)).to_vec();
        let mixed = causal_errors(&LinearModel::from_weights(mixed_w, None), &truth).unwrap();
        prop_assert!((plain.ce - mixed.ce).abs() < 1e-8);
        prop_assert!((plain.nce.unwrap() - mixed.nce.unwrap()).abs() < 1e-8);
    }

    #[test]
    fn penalty_is_nonnegative(g in prop::collection::vec(-5.0f64..5.0, 1..50), q in prop::collection::vec(0.0f64..1.0, 50)) {
        let s = stats(g);
        let p = irm_penalty(&s, &q[..s.len()]).unwrap();
        prop_assert!(p >= 0.0 && p.is_finite());
    }

    #[test]
    fn ei_objective_is_symmetric_in_environments(g in prop::collection::vec(-5.0f64..5.0, 2..40), q in prop::collection::vec(0.0f64..1.0, 40)) {
        let q = &q[..g.len()];
        let flipped: Vec<f64> = q.iter().map(|v| 1.0 - v).collect();
        for norm in [RiskNormalization::SampleCount, RiskNormalization::SoftCount] {
            let a = ei_objective(&g, q, norm);
            prop_assert!((a - ei_objective(&g, &flipped, norm)).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_partition_is_optimal(g in prop::collection::vec(-5.0f64..5.0, 2..12)) {
        let s = stats(g);
        let (_, best) = exhaustive_ei(&s).unwrap();
        let p = sign_partition(&s);
        let c = hard_ei_objective(&s.w_grads, p.hard(), RiskNormalization::SampleCount);
        prop_assert!((c - best).abs() <= 1e-12 * best.max(1.0));
    }

    #[test]
    fn soft_objective_never_beats_best_hard_split(g in prop::collection::vec(-5.0f64..5.0, 2..12), q in prop::collection::vec(0.0f64..1.0, 12)) {
        let s = stats(g);
        let (_, best) = exhaustive_ei(&s).unwrap();
        let c = ei_objective(&s.w_grads, &q[..s.len()], RiskNormalization::SampleCount);
        prop_assert!(c <= best + 1e-12);
    }
}

#[test]
fn unscrambled_truth_constructor_is_identity() {
    let t = SemGroundTruth::unscrambled(vec![1.0, 2.0], vec![0.5, 0.0]);
    assert_eq!(t.scramble, Array2::<f64>::eye(4));
    let r = causal_errors(&LinearModel::from_weights(vec![1.0, 2.0, 0.0, 0.0], None), &t).unwrap();
    assert_eq!(r.ce, 0.0);
    assert_eq!(r.nce, Some(0.0));
}
