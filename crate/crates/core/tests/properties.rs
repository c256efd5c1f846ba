use proptest::prelude::*;

use prvr_core::analysis::average_ranks;
use prvr_core::data::{decode_features, encode_features, round_f32};
use prvr_core::merging::{
    bipartite_merge, clip_schedule, next_level, op_tome, select_merge_depth, DepthMode, SizedTokenSeq,
};
use prvr_core::numeric::{Graph, Tensor};
use prvr_core::retrieval::recall_at;

fn frames(len: usize, dim: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, len * dim).prop_map(move |d| Tensor::matrix(len, dim, d).unwrap())
}

fn sized_frames() -> impl Strategy<Value = Tensor> {
    (33usize..=256, 1usize..=6).prop_flat_map(|(l, d)| frames(l, d))
}

/// Checks spans partition `0..n` in order and that every token is the plain
/// mean of the original rows it covers.
fn assert_partition(seq: &SizedTokenSeq, original: &Tensor) -> Result<(), TestCaseError> {
    let mut next = 0;
    for (k, p) in seq.provenance.iter().enumerate() {
        prop_assert_eq!(p[0], next);
        prop_assert!(p.windows(2).all(|w| w[1] == w[0] + 1));
        prop_assert_eq!(seq.sizes[k], p.len());
        next = p[p.len() - 1] + 1;
        for c in 0..original.cols() {
            let mean = p.iter().map(|&i| original.get(i, c)).sum::<f64>() / p.len() as f64;
            prop_assert!((seq.tokens.get(k, c) - mean).abs() < 1e-9);
        }
    }
    prop_assert_eq!(next, original.rows());
    prop_assert_eq!(seq.sizes.iter().sum::<usize>(), original.rows());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn op_tome_partitions_in_order(f in sized_frames(), rate in 10.0f64..=100.0) {
        let out = op_tome(&f, rate, 32).unwrap();
        prop_assert_eq!(out.clips.len(), 32);
        prop_assert_eq!(*out.lengths.first().unwrap(), f.rows());
        prop_assert_eq!(*out.lengths.last().unwrap(), 32);
        prop_assert!(out.lengths.windows(2).all(|w| w[1] < w[0]));
        assert_partition(&out.clips, &f)?;
    }

    #[test]
    fn schedule_is_strictly_decreasing_to_floor(initial in 2usize..400, rate in 1.0f64..=100.0, c_min in 1usize..10) {
        prop_assume!(initial >= c_min);
        let s = clip_schedule(initial, rate, c_min).unwrap();
        prop_assert_eq!(s.levels[0], initial);
        prop_assert!(s.levels.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.levels.iter().all(|&l| l >= c_min));
        for w in s.levels.windows(2) {
            prop_assert_eq!(w[1], next_level(w[0], rate, c_min));
        }
    }

    #[test]
    fn bipartite_merge_conserves_frames(f in frames(20, 3), r in 1usize..10) {
        let seq = SizedTokenSeq::unit(f.clone());
        let out = bipartite_merge(&seq, r).unwrap();
        prop_assert_eq!(out.len(), 20 - r);
        prop_assert_eq!(out.total_size(), 20);
        let mut all: Vec<usize> = out.provenance.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..20).collect::<Vec<_>>());
        for (k, p) in out.provenance.iter().enumerate() {
            for c in 0..3 {
                let mean = p.iter().map(|&i| f.get(i, c)).sum::<f64>() / p.len() as f64;
                prop_assert!((out.tokens.get(k, c) - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn monotone_depth_is_nondecreasing(levels in 1usize..12, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let d_lo = select_merge_depth(lo, levels, DepthMode::Monotone).unwrap();
        let d_hi = select_merge_depth(hi, levels, DepthMode::Monotone).unwrap();
        prop_assert!(d_lo <= d_hi);
        prop_assert!((1..=levels).contains(&d_hi));
        let lit = select_merge_depth(hi, levels, DepthMode::Literal).unwrap();
        prop_assert!(lit == 1 || lit == 2.min(levels));
    }

    #[test]
    fn softmax_rows_sum_to_one(x in frames(4, 7), bias in prop::collection::vec(0.0f64..3.0, 7)) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.softmax_rows(v, Some(&bias)).unwrap();
        let y = g.value(y);
        for row in y.row_iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn average_ranks_sum_is_triangular(v in prop::collection::vec(0i32..5, 1..30)) {
        let vals: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let n = vals.len() as f64;
        let r = average_ranks(&vals);
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn recall_is_monotone_in_q(ranks in prop::collection::vec(1usize..=50, 1..40)) {
        let rep = recall_at(&ranks, 50, &[1, 5, 10, 50]).unwrap();
        let vals: Vec<f64> = rep.recalls.iter().map(|r| r.value).collect();
        prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(vals[3], 100.0);
    }

    #[test]
    fn feature_container_roundtrips_at_f32(f in frames(5, 4)) {
        let back = decode_features(&encode_features(&f).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), f.shape());
        for (a, b) in back.data().iter().zip(f.data()) {
            prop_assert_eq!(*a, round_f32(*b));
        }
    }
}
