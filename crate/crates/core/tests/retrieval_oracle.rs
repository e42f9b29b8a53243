//! top_m against an exhaustive sort.

use kdiag::retrieval::{top_m, EmbeddingIndex, EmbeddingVector};
use proptest::prelude::*;

/// Full sort by (similarity desc, id asc), then truncate.
fn brute_force(query: &EmbeddingVector, index: &[EmbeddingVector], m: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = index
        .iter()
        .map(|e| {
            let mut s = 0.0;
            for i in 0..e.values.len() {
                s += query.values[i] * e.values[i];
            }
            (e.owner_id.clone(), s)
        })
        .collect();
    all.sort_by(|a, b| {
        if a.1 > b.1 {
            std::cmp::Ordering::Less
        } else if a.1 < b.1 {
            std::cmp::Ordering::Greater
        } else {
            a.0.cmp(&b.0)
        }
    });
    all.truncate(m);
    all
}

/// Small integer components make exact ties common.
fn raw_vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2i32..=2, dim)
        .prop_filter("nonzero", |v| v.iter().any(|&x| x != 0))
        .prop_map(|v| v.into_iter().map(f64::from).collect())
}

fn case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, usize)> {
    (1usize..=4).prop_flat_map(|dim| {
        (
            prop::collection::vec(raw_vector(dim), 1..40),
            raw_vector(dim),
            1usize..50,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn top_m_equals_exhaustive_sort((rows, q, m) in case()) {
        // ids are shuffled relative to insertion so id order is not index order
        let entries: Vec<EmbeddingVector> = rows
            .into_iter()
            .enumerate()
            .map(|(i, v)| EmbeddingVector::normalized(format!("f{:03}", (i * 37) % 101), v).unwrap())
            .collect();
        let query = EmbeddingVector::normalized("q", q).unwrap();
        let expected = brute_force(&query, &entries, m);
        let index = EmbeddingIndex::build(entries).unwrap();
        let got: Vec<(String, f64)> = top_m(&query, &index, m)
            .unwrap()
            .hits
            .into_iter()
            .map(|h| (h.fact_id, h.similarity))
            .collect();
        prop_assert_eq!(got, expected);
    }
}

#[test]
fn ties_break_by_ascending_id() {
    let v = vec![1.0, 0.0];
    let entries = vec![
        EmbeddingVector::normalized("c", v.clone()).unwrap(),
        EmbeddingVector::normalized("a", v.clone()).unwrap(),
        EmbeddingVector::normalized("b", v.clone()).unwrap(),
    ];
    let index = EmbeddingIndex::build(entries).unwrap();
    let q = EmbeddingVector::normalized("q", v).unwrap();
    let ids: Vec<String> = top_m(&q, &index, 2).unwrap().hits.into_iter().map(|h| h.fact_id).collect();
    assert_eq!(ids, ["a", "b"]);
}
