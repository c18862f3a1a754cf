//! End-to-end run: embed, index, match, evaluate, enqueue.
//!
//! Artifacts go to `<data_dir>/runs/<name>/`; rows go to the validation event
//! log in `<data_dir>/hitl/`. The report holds no timestamps or absolute
//! paths, so identical inputs give a byte-identical `report.json`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::domain::{ingest_offers, Corpus, CorpusRole, OfferFormat};
use crate::encoder::{embed_corpus, read_head, write_embeddings};
use crate::error::{Error, Result};
use crate::eval::{evaluate, per_category_report, pr_curve_svg, GroundTruth, PrPoint};
use crate::hitl::{snapshot_catalog, Catalog, DurableStore, EnqueueReport, RoutingPolicy};
use crate::retrieval::{
    match_domains, write_index, MatchIndex, MatchParams, MatchPrediction, QueryFailure,
};

pub const REPORT_FILE: &str = "report.json";
pub const HITL_DIR: &str = "hitl";
pub const RUNS_DIR: &str = "runs";

/// Categories with fewer matched queries are pooled in the per-category report.
const MIN_CATEGORY_MATCHED: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineJob {
    pub name: String,
    pub index_corpus: PathBuf,
    pub query_corpus: PathBuf,
    pub head: PathBuf,
    /// Route predictions into the validation queue.
    #[serde(default = "yes")]
    pub enqueue: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCounts {
    pub index_offers: usize,
    pub query_offers: usize,
    pub predictions: usize,
    pub failed_queries: usize,
    pub accepted_top1: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub query_count: usize,
    pub matched_queries: usize,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub aucpr: f64,
    pub operating_point: PrPoint,
    pub categories: BTreeMap<String, CategoryMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub matched_queries: usize,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub aucpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub name: String,
    pub seed: u64,
    pub retrieval: MatchParams,
    pub routing: RoutingPolicy,
    /// Inputs, relative to the data directory when inside it.
    pub inputs: BTreeMap<String, String>,
    pub counts: RunCounts,
    /// Absent when no query has a labelled match in the index.
    pub metrics: Option<RunMetrics>,
    pub enqueue: Option<EnqueueSummary>,
    /// Relative to the data directory.
    pub artifacts: BTreeMap<String, String>,
    pub failures: Vec<QueryFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnqueueSummary {
    pub rows_created: usize,
    pub duplicates: usize,
    pub auto_accepted: usize,
    pub auto_rejected: usize,
}

impl From<&EnqueueReport> for EnqueueSummary {
    fn from(r: &EnqueueReport) -> Self {
        EnqueueSummary {
            rows_created: r.created.len(),
            duplicates: r.duplicates,
            auto_accepted: r.auto_accepted,
            auto_rejected: r.auto_rejected,
        }
    }
}

fn display(data_dir: &Path, p: &Path) -> String {
    p.strip_prefix(data_dir)
        .unwrap_or(p)
        .to_string_lossy()
        .replace('\\', "/")
}

pub const EVAL_KS: [usize; 2] = [1, 3];

/// Runs `job`, enqueueing into the event log under the data directory.
pub fn run_pipeline(config: &AppConfig, job: &PipelineJob) -> Result<RunReport> {
    run_pipeline_with(config, job, |predictions, catalog, truth| {
        let mut store = DurableStore::open(
            &config.data_dir.join(HITL_DIR),
            config.judgments,
            config.aggregation,
        )?;
        let r = store.enqueue_predictions(predictions, &config.routing, catalog, truth)?;
        store.flush()?;
        Ok(r)
    })
}

/// As [`run_pipeline`], handing the enqueue step to `enqueue` (a service that
/// already owns the store).
pub fn run_pipeline_with<F>(config: &AppConfig, job: &PipelineJob, enqueue: F) -> Result<RunReport>
where
    F: FnOnce(&[MatchPrediction], &Catalog, Option<&GroundTruth>) -> Result<EnqueueReport>,
{
    config.validate()?;
    if job.name.is_empty() || job.name.contains(['/', '\\']) || job.name.starts_with('.') {
        return Err(Error::Config(format!("invalid run name {:?}", job.name)));
    }
    let data = &config.data_dir;
    let run_dir = data.join(RUNS_DIR).join(&job.name);
    std::fs::create_dir_all(&run_dir)?;
    let mut artifacts = BTreeMap::new();
    let mut artifact = |key: &str, file: &str| -> PathBuf {
        let p = run_dir.join(file);
        artifacts.insert(key.to_string(), display(data, &p));
        p
    };

    let (index_corpus, queries) = (|| -> Result<(Corpus, Corpus)> {
        let index = ingest_offers(&job.index_corpus, &OfferFormat::Jsonl)?;
        let queries = ingest_offers(&job.query_corpus, &OfferFormat::Jsonl)?;
        Ok((
            index.with_role(CorpusRole::TestInDomain),
            queries.with_role(CorpusRole::TestInDomain),
        ))
    })()
    .map_err(|e| e.in_stage("ingest"))?;

    let (index_emb, query_emb) = (|| {
        let head = read_head(&job.head)?;
        let ie = embed_corpus(&index_corpus, &head)?;
        let qe = embed_corpus(&queries, &head)?;
        Ok::<_, Error>((ie, qe))
    })()
    .map_err(|e| e.in_stage("encoding"))?;
    write_embeddings(&artifact("index_embeddings", "index_embeddings.jsonl"), &index_emb)?;
    write_embeddings(&artifact("query_embeddings", "query_embeddings.jsonl"), &query_emb)?;

    let index = MatchIndex::build(&index_emb, &index_corpus).map_err(|e| e.in_stage("indexing"))?;
    write_index(&artifact("index", "index.jsonl"), &index)?;

    let outcome = match_domains(&queries, &query_emb, &index, &config.retrieval)
        .map_err(|e| e.in_stage("matching"))?;
    {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(artifact("predictions", "predictions.jsonl"))?);
        for p in &outcome.predictions {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }

    let truth = GroundTruth::from_corpora(&queries, &index_corpus);
    let metrics = if truth.matched_queries() == 0 {
        None
    } else {
        let categories: HashMap<String, String> = queries
            .offers()
            .iter()
            .map(|o| (o.offer_id.clone(), o.category.clone()))
            .collect();
        let (report, per_cat) = (|| {
            let r = evaluate(&outcome.predictions, &truth, &EVAL_KS)?;
            let c = per_category_report(
                &outcome.predictions,
                &truth,
                &categories,
                &EVAL_KS,
                MIN_CATEGORY_MATCHED,
            )?;
            Ok::<_, Error>((r, c))
        })()
        .map_err(|e| e.in_stage("evaluation"))?;
        std::fs::write(
            artifact("pr_curve", "pr_curve.svg"),
            pr_curve_svg(&[(job.name.as_str(), &report)]),
        )?;
        Some(RunMetrics {
            query_count: report.query_count,
            matched_queries: report.matched_queries,
            recall_at_k: report.recall_at_k.clone(),
            aucpr: report.aucpr,
            operating_point: report.operating_point,
            categories: per_cat
                .into_iter()
                .map(|(k, r)| {
                    (
                        k,
                        CategoryMetrics {
                            matched_queries: r.matched_queries,
                            recall_at_k: r.recall_at_k,
                            aucpr: r.aucpr,
                        },
                    )
                })
                .collect(),
        })
    };

    let enqueue = if job.enqueue {
        let catalog = snapshot_catalog(&[&index_corpus, &queries]);
        let labelled = (truth.matched_queries() > 0).then_some(&truth);
        let summary = enqueue(&outcome.predictions, &catalog, labelled)
            .map(|r| EnqueueSummary::from(&r))
            .map_err(|e| e.in_stage("enqueue"))?;
        Some(summary)
    } else {
        None
    };

    let inputs = BTreeMap::from([
        ("index_corpus".to_string(), display(data, &job.index_corpus)),
        ("query_corpus".to_string(), display(data, &job.query_corpus)),
        ("head".to_string(), display(data, &job.head)),
    ]);
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        name: job.name.clone(),
        seed: config.seed,
        retrieval: config.retrieval,
        routing: config.routing,
        inputs,
        counts: RunCounts {
            index_offers: index_corpus.len(),
            query_offers: queries.len(),
            predictions: outcome.predictions.len(),
            failed_queries: outcome.failures.len(),
            accepted_top1: outcome
                .predictions
                .iter()
                .filter(|p| p.top().is_some_and(|c| c.accepted))
                .count(),
        },
        metrics,
        enqueue,
        artifacts,
        failures: outcome.failures,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(run_dir.join(REPORT_FILE), text)?;
    Ok(report)
}
