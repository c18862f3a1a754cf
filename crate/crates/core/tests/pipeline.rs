mod common;

use std::collections::{HashMap, HashSet};

use common::Fixture;
use prodmatch::domain::{ingest_offers, OfferFormat};
use prodmatch::pipeline::{run_pipeline, RunReport, REPORT_FILE, RUNS_DIR};
use prodmatch::retrieval::MatchPrediction;
use prodmatch::Error;

fn read_predictions(path: &std::path::Path) -> Vec<MatchPrediction> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn report_carries_metrics_artifacts_and_enqueue_counts() {
    let fx = Fixture::new(150, 3);
    let report = run_pipeline(&fx.config, &fx.job("e2e")).unwrap();

    let m = report.metrics.as_ref().expect("labelled corpus gives metrics");
    assert!(m.matched_queries > 0);
    assert_eq!(m.recall_at_k.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
    assert!(m.recall_at_k[&1] <= m.recall_at_k[&3]);
    assert!((0.0..=1.0).contains(&m.aucpr));
    assert!(!m.categories.is_empty());

    let c = &report.counts;
    assert_eq!(c.query_offers, fx.splits.test_in_query.len());
    assert_eq!(c.index_offers, fx.splits.test_index.len());
    assert_eq!(c.predictions + c.failed_queries, c.query_offers);

    let e = report.enqueue.as_ref().unwrap();
    assert_eq!(e.duplicates, 0);
    assert_eq!(e.rows_created + e.auto_accepted + e.auto_rejected, c.predictions);

    for rel in report.artifacts.values() {
        assert!(fx.data().join(rel).is_file(), "{rel}");
    }
    let on_disk = std::fs::read_to_string(fx.data().join(RUNS_DIR).join("e2e").join(REPORT_FILE)).unwrap();
    let parsed: RunReport = serde_json::from_str(&on_disk).unwrap();
    assert_eq!(parsed, report);
    assert!(!on_disk.contains(&*fx.data().to_string_lossy()));
}

/// Recall@1 recounted from product ids in the offer files.
#[test]
fn recall_at_one_matches_recount_from_product_ids() {
    let fx = Fixture::new(150, 4);
    let report = run_pipeline(&fx.config, &fx.job("recount")).unwrap();
    let preds = read_predictions(&fx.data().join(&report.artifacts["predictions"]));

    let index = ingest_offers(&fx.split("test_index"), &OfferFormat::Jsonl).unwrap();
    let queries = ingest_offers(&fx.split("test_in_query"), &OfferFormat::Jsonl).unwrap();
    let product_of: HashMap<&str, &str> = index
        .offers()
        .iter()
        .chain(queries.offers())
        .filter_map(|o| Some((o.offer_id.as_str(), o.product_id.as_ref()?.0.as_str())))
        .collect();
    let index_products: HashSet<&str> = index
        .offers()
        .iter()
        .filter_map(|o| Some(o.product_id.as_ref()?.0.as_str()))
        .collect();
    let matched = queries
        .offers()
        .iter()
        .filter(|q| q.product_id.as_ref().is_some_and(|p| index_products.contains(p.0.as_str())))
        .count();
    let hits = preds
        .iter()
        .filter(|p| {
            p.top()
                .is_some_and(|c| product_of.get(c.index_offer_id.as_str()) == product_of.get(p.query_offer_id.as_str()))
        })
        .count();
    let m = report.metrics.unwrap();
    assert_eq!(m.matched_queries, matched);
    assert_eq!(m.recall_at_k[&1], hits as f64 / matched as f64);
}

#[test]
fn missing_head_fails_in_encoding_stage() {
    let fx = Fixture::new(40, 0);
    let mut job = fx.job("nohead");
    job.head = fx.data().join("absent.bin");
    match run_pipeline(&fx.config, &job) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "encoding"),
        other => panic!("expected encoding stage error, got {other:?}"),
    }
}

#[test]
fn missing_corpus_fails_in_ingest_stage() {
    let fx = Fixture::new(40, 0);
    let mut job = fx.job("nocorpus");
    job.query_corpus = fx.data().join("absent.jsonl");
    match run_pipeline(&fx.config, &job) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "ingest"),
        other => panic!("expected ingest stage error, got {other:?}"),
    }
}

#[test]
fn rerun_enqueues_only_duplicates() {
    let fx = Fixture::new(80, 5);
    let first = run_pipeline(&fx.config, &fx.job("once")).unwrap().enqueue.unwrap();
    let second = run_pipeline(&fx.config, &fx.job("twice")).unwrap().enqueue.unwrap();
    assert!(first.rows_created > 0);
    assert_eq!(second.rows_created, 0);
    assert_eq!(second.duplicates, first.rows_created);
}

#[test]
fn no_enqueue_leaves_queue_untouched() {
    let fx = Fixture::new(40, 6);
    let mut job = fx.job("dry");
    job.enqueue = false;
    let report = run_pipeline(&fx.config, &job).unwrap();
    assert!(report.enqueue.is_none());
    assert!(!fx.data().join("hitl").join("events.jsonl").exists());
}

#[test]
fn run_names_cannot_leave_the_runs_directory() {
    let fx = Fixture::new(40, 0);
    for name in ["", "../x", "a/b", ".hidden", "a\\b"] {
        assert!(matches!(run_pipeline(&fx.config, &fx.job(name)), Err(Error::Config(_))), "{name:?}");
    }
}

#[test]
fn fresh_directories_give_identical_reports() {
    let reports: Vec<String> = (0..2)
        .map(|_| {
            let fx = Fixture::new(120, 9);
            run_pipeline(&fx.config, &fx.job("same")).unwrap();
            std::fs::read_to_string(fx.data().join(RUNS_DIR).join("same").join(REPORT_FILE)).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
}
