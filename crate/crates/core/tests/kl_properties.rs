//! Property checks for the divergence, grouping and normalization code.

use kdiag::diagnose::{
    classify, kl_divergence, normalize, softmax, GroupTable, DEFAULT_CLAMP_FLOOR,
};
use kdiag::scorer::OptionScores;
use proptest::prelude::*;

const CASES: u32 = 10_000;

/// Reference: textbook `Σ p log(p/q)`, written out with explicit clamping.
fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let a = if p[i] < DEFAULT_CLAMP_FLOOR { DEFAULT_CLAMP_FLOOR } else { p[i] };
        let b = if q[i] < DEFAULT_CLAMP_FLOOR { DEFAULT_CLAMP_FLOOR } else { q[i] };
        total += a * (a / b).ln();
    }
    total
}

fn to_dist(weights: Vec<f64>) -> Vec<f64> {
    let s: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / s).collect()
}

/// A pair of distributions over the same 2..=8 options, plus a permutation.
fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>)> {
    (2usize..=8).prop_flat_map(|n| {
        (
            prop::collection::vec(1e-4f64..1.0, n).prop_map(to_dist),
            prop::collection::vec(1e-4f64..1.0, n).prop_map(to_dist),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn kl_nonnegative((p, q, _) in pair()) {
        let d = kl_divergence(&p, &q, DEFAULT_CLAMP_FLOOR).unwrap();
        prop_assert!(d >= -1e-9, "kl = {d}");
    }

    #[test]
    fn kl_zero_on_identical((p, _, _) in pair()) {
        let d = kl_divergence(&p, &p, DEFAULT_CLAMP_FLOOR).unwrap();
        prop_assert!(d.abs() <= 1e-12, "kl = {d}");
    }

    #[test]
    fn kl_invariant_under_joint_permutation((p, q, perm) in pair()) {
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let qq: Vec<f64> = perm.iter().map(|&i| q[i]).collect();
        let a = kl_divergence(&p, &q, DEFAULT_CLAMP_FLOOR).unwrap();
        let b = kl_divergence(&pp, &qq, DEFAULT_CLAMP_FLOOR).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn kl_matches_direct_sum((p, q, _) in pair()) {
        let a = kl_divergence(&p, &q, DEFAULT_CLAMP_FLOOR).unwrap();
        let b = oracle_kl(&p, &q);
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..9)) {
        let p = softmax(&logits);
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn lower_nll_means_higher_probability(nll in prop::collection::vec(0.0f64..30.0, 2..9)) {
        let scores = OptionScores {
            query_id: "q".into(),
            knowledge_id: None,
            token_counts: vec![1; nll.len()],
            nll: nll.clone(),
        };
        let d = normalize(&scores, false).unwrap();
        for i in 0..nll.len() {
            for j in 0..nll.len() {
                if nll[i] < nll[j] {
                    prop_assert!(d.probs[i] >= d.probs[j]);
                }
            }
        }
    }

    #[test]
    fn classification_is_monotone(a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let table = GroupTable::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        match (classify(lo, &table), classify(hi, &table)) {
            (Some((g1, b1)), Some((g2, b2))) => {
                prop_assert!(g1 <= g2);
                prop_assert!(b1 <= b2);
            }
            (Some(_), None) => prop_assert!(false, "{hi} unflagged but {lo} flagged"),
            _ => {}
        }
    }
}
