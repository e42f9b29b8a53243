//! Relative-entropy detection must not depend on gold labels.

use std::collections::BTreeMap;
use std::sync::Arc;

use kdiag::corpus::Query;
use kdiag::diagnose::{diagnose_all, DiagnoseOptions};
use kdiag::evalkit::re_detect;
use kdiag::fixture::{generate, FixtureSpec};
use kdiag::scorer::{KnowledgeRef, MockBackend, Scorer};

fn knowledge_for(queries: &[Query]) -> BTreeMap<String, Vec<KnowledgeRef>> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let refs = (0..3)
                .map(|k| KnowledgeRef {
                    id: format!("k{}", (i + k) % 17),
                    text: format!("background fact number {}", (i + k) % 17),
                })
                .collect();
            (q.query_id.clone(), refs)
        })
        .collect()
}

#[test]
fn redacting_labels_leaves_re_detection_unchanged() {
    let queries = generate(&FixtureSpec::default()).queries;
    let redacted: Vec<Query> = queries.iter().map(Query::redacted).collect();
    assert!(redacted.iter().all(|q| q.gold_label.is_none()));
    let knowledge = knowledge_for(&queries);
    let scorer = Scorer::new(Arc::new(MockBackend::seeded(3)));
    let opts = DiagnoseOptions::default();

    let labeled = diagnose_all(&queries, &knowledge, &scorer, &opts);
    let blind = diagnose_all(&redacted, &knowledge, &scorer, &opts);
    assert!(!labeled.deficiencies.is_empty());
    assert_eq!(labeled.pairs, blind.pairs);

    let ids: Vec<String> = queries.iter().map(|q| q.query_id.clone()).collect();
    let a = re_detect(&ids, &labeled.deficiencies, 0.1);
    let b = re_detect(&ids, &blind.deficiencies, 0.1);
    assert_eq!(a, b);

    // only the direction tag needs the gold option
    for (x, y) in labeled.deficiencies.iter().zip(&blind.deficiencies) {
        assert_eq!((x.re, x.group, x.budget), (y.re, y.group, y.budget));
        assert!(y.direction.is_none());
        assert!(x.direction.is_some());
    }
}
