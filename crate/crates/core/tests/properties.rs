use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use proptest::prelude::*;
use transagent::cache::{encode_cache, CacheReader, KnowledgeCacheRecord, PayloadKind, RecordKey};
use transagent::eval::{base_novel_split, harmonic_mean};
use transagent::gating::{fuse_average, moa_gate, GateNetwork};
use transagent::losses::{mac_loss, total_loss, LossWeights, MacLossType};
use transagent::model::{ScoreKind, ScoreMatrix};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn scores(m: Array2<f64>) -> ScoreMatrix {
    ScoreMatrix { values: m, kind: ScoreKind::Clip }
}

proptest! {
    #[test]
    fn gate_weights_lie_on_the_simplex(
        inputs in prop::collection::vec(matrix(3, 4), 1..5),
        seed in any::<u64>(),
    ) {
        let gate = GateNetwork::randomized(4 * inputs.len(), 6, inputs.len(), seed).unwrap();
        let out = moa_gate(&inputs, &gate).unwrap();
        for row in out.weights.outer_iter() {
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        for (idx, &f) in out.fused.indexed_iter() {
            let vals = inputs.iter().map(|m| m[idx]);
            let lo = vals.clone().fold(f64::INFINITY, f64::min);
            let hi = vals.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f >= lo - 1e-12 && f <= hi + 1e-12);
        }
    }

    #[test]
    fn fresh_gate_equals_average_and_is_permutation_invariant(
        inputs in prop::collection::vec(matrix(2, 3), 2..5),
        seed in any::<u64>(),
        rot in 0usize..4,
    ) {
        let gate = GateNetwork::new(3 * inputs.len(), 5, inputs.len(), seed).unwrap();
        let out = moa_gate(&inputs, &gate).unwrap();
        let avg = fuse_average(&inputs).unwrap();
        prop_assert!((&out.fused - &avg).mapv(f64::abs).sum() < 1e-12);
        let mut rotated = inputs.clone();
        rotated.rotate_left(rot % inputs.len());
        let avg2 = fuse_average(&rotated).unwrap();
        prop_assert!((&avg - &avg2).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn mac_losses_are_nonnegative_and_vanish_at_identity(
        a in matrix(3, 5),
        b in matrix(3, 5),
        t in 0.05f64..4.0,
        shift in -3.0f64..3.0,
    ) {
        for ty in [MacLossType::Kl, MacLossType::L1, MacLossType::Mse] {
            let l = mac_loss(&scores(a.clone()), &scores(b.clone()), ty, t).unwrap();
            prop_assert!(l >= -1e-12);
            let same = mac_loss(&scores(a.clone()), &scores(a.clone()), ty, t).unwrap();
            prop_assert!(same.abs() < 1e-12);
            let shifted = mac_loss(&scores(a.clone()), &scores(a.mapv(|v| v + shift)), ty, t).unwrap();
            prop_assert!(shifted.abs() < 1e-10);
        }
    }

    #[test]
    fn total_loss_is_affine_in_each_term(
        ce in 0.0f64..10.0, vac in 0.0f64..10.0, lac in 0.0f64..10.0, mac in 0.0f64..10.0,
        l1 in 0.0f64..30.0, l2 in 0.0f64..30.0, l3 in 0.0f64..30.0, d in 0.0f64..5.0,
    ) {
        let w = LossWeights { lambda1: l1, lambda2: l2, lambda3: l3, temperature: 1.0 };
        let base = total_loss(ce, vac, lac, mac, &w).unwrap();
        prop_assert!(base >= ce - 1e-12);
        let eps = 1e-9 * (1.0 + base.abs());
        prop_assert!((total_loss(ce + d, vac, lac, mac, &w).unwrap() - base - d).abs() < eps);
        prop_assert!((total_loss(ce, vac + d, lac, mac, &w).unwrap() - base - l1 * d).abs() < eps);
        prop_assert!((total_loss(ce, vac, lac + d, mac, &w).unwrap() - base - l2 * d).abs() < eps);
        prop_assert!((total_loss(ce, vac, lac, mac + d, &w).unwrap() - base - l3 * d).abs() < eps);
    }

    #[test]
    fn harmonic_mean_bounds(a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let hm = harmonic_mean(a, b).unwrap();
        prop_assert!(hm <= (a + b) / 2.0 + 1e-12);
        prop_assert!(a.min(b) <= hm + 1e-12 && hm <= a.max(b) + 1e-12);
        prop_assert!(a.min(b) >= hm / 2.0 - 1e-12);
        prop_assert!((hm - harmonic_mean(b, a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn split_is_deterministic_disjoint_and_complete(
        ids in prop::collection::btree_set(0usize..200, 2..40),
        seed in any::<u64>(),
    ) {
        let ids: Vec<usize> = ids.into_iter().collect();
        let s = base_novel_split("d", &ids, seed, 16).unwrap();
        prop_assert_eq!(&s, &base_novel_split("d", &ids, seed, 16).unwrap());
        let base: BTreeSet<_> = s.base.iter().copied().collect();
        let novel: BTreeSet<_> = s.novel.iter().copied().collect();
        prop_assert!(base.is_disjoint(&novel));
        prop_assert_eq!(base.len() + novel.len(), ids.len());
        prop_assert_eq!(s.base.len(), ids.len().div_ceil(2));
        let mut reversed = ids.clone();
        reversed.reverse();
        prop_assert_eq!(&s, &base_novel_split("d", &reversed, seed, 16).unwrap());
    }

    #[test]
    fn cache_round_trips_arbitrary_records(
        recs in prop::collection::btree_map(
            (0u8..4, any::<u64>()),
            (1usize..4, 1usize..5, any::<u64>()),
            1..12,
        ),
        fp in any::<u64>(),
    ) {
        let kinds = [PayloadKind::FeatureStack, PayloadKind::ClassFeatures, PayloadKind::ScoreVector, PayloadKind::AttentionMap];
        let records: Vec<KnowledgeCacheRecord> = recs
            .iter()
            .map(|(&(a, key), &(r, c, seed))| {
                let mut rng = transagent::seed::rng(seed, "prop/cache");
                let m = transagent::seed::normal_matrix(&mut rng, r, c, 1.0);
                KnowledgeCacheRecord::from_matrix(RecordKey::new(&format!("agent{a}"), "ds", "train", key), kinds[a as usize], &m, seed)
            })
            .collect();
        let bytes = encode_cache(&records, fp, BTreeMap::new()).unwrap();
        let reader = CacheReader::from_bytes(bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(reader.len(), records.len());
        prop_assert_eq!(reader.manifest().seed_fingerprint, fp);
        for rec in &records {
            prop_assert_eq!(&reader.get(&rec.key).unwrap(), rec);
        }
    }
}
