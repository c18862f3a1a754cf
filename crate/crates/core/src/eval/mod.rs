//! Retrieval metrics: recall at k, the k=1 precision-recall curve under a
//! distance-threshold sweep, and its area (average-precision convention).

mod plot;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::domain::Corpus;
use crate::encoder::Embeddings;
use crate::error::{Error, Result};
use crate::retrieval::{match_domains, MatchIndex, MatchParams, MatchPrediction};

pub use plot::pr_curve_svg;

pub const OTHER_CATEGORY: &str = "other";
/// Similarity 0.80 operating point.
pub const OPERATING_DISTANCE: f64 = 0.20;
/// Threshold recorded for the zero-accepted endpoint of every curve.
pub const DEGENERATE_THRESHOLD: f64 = -1.0;

/// For every query offer with at least one true match in the index, the set of
/// matching index offer ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    matches: HashMap<String, BTreeSet<String>>,
}

impl GroundTruth {
    /// Cross-domain product-id matches between query and index offers.
    pub fn from_corpora(queries: &Corpus, index: &Corpus) -> Self {
        let mut by_product: HashMap<&str, Vec<&crate::domain::Offer>> = HashMap::new();
        for o in index.offers() {
            if let Some(p) = &o.product_id {
                by_product.entry(p.0.as_str()).or_default().push(o);
            }
        }
        let mut matches: HashMap<String, BTreeSet<String>> = HashMap::new();
        for q in queries.offers() {
            let Some(p) = &q.product_id else { continue };
            for i in by_product.get(p.0.as_str()).into_iter().flatten() {
                if i.domain != q.domain {
                    matches
                        .entry(q.offer_id.clone())
                        .or_default()
                        .insert(i.offer_id.clone());
                }
            }
        }
        GroundTruth { matches }
    }

    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut matches: HashMap<String, BTreeSet<String>> = HashMap::new();
        for (q, i) in pairs {
            matches.entry(q.into()).or_default().insert(i.into());
        }
        GroundTruth { matches }
    }

    pub fn is_match(&self, query: &str, index: &str) -> bool {
        self.matches.get(query).is_some_and(|s| s.contains(index))
    }

    pub fn has_match(&self, query: &str) -> bool {
        self.matches.contains_key(query)
    }

    pub fn matched_queries(&self) -> usize {
        self.matches.len()
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.matches.keys().map(String::as_str)
    }

    pub fn extend(&mut self, other: GroundTruth) {
        for (q, s) in other.matches {
            self.matches.entry(q).or_default().extend(s);
        }
    }

    /// Ground truth restricted to the given queries.
    pub fn restrict<'a>(&self, queries: impl IntoIterator<Item = &'a str>) -> GroundTruth {
        let matches = queries
            .into_iter()
            .filter_map(|q| self.matches.get(q).map(|s| (q.to_string(), s.clone())))
            .collect();
        GroundTruth { matches }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub accepted_count: usize,
    pub true_accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub query_count: usize,
    pub matched_queries: usize,
    /// Keyed by k.
    pub recall_at_k: BTreeMap<usize, f64>,
    pub aucpr: f64,
    pub curve: Vec<PrPoint>,
    /// Precision and recall when accepting `d <= 0.20`.
    pub operating_point: PrPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<BTreeMap<String, EvalReport>>,
}

fn undefined() -> Error {
    Error::UndefinedMetric("no query has a ground-truth match".into())
}

/// Share of matched queries whose top-k candidates contain a true match. No
/// distance threshold is applied; queries absent from `predictions` count as misses.
pub fn recall_at_k(predictions: &[MatchPrediction], truth: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let denom = truth.matched_queries();
    if denom == 0 {
        return Err(undefined());
    }
    let hits = predictions
        .iter()
        .filter(|p| {
            p.candidates
                .iter()
                .take(k)
                .any(|c| truth.is_match(&p.query_offer_id, &c.index_offer_id))
        })
        .count();
    Ok(hits as f64 / denom as f64)
}

/// Top-1 `(distance, correct)` per query.
fn top1(predictions: &[MatchPrediction], truth: &GroundTruth) -> Vec<(f64, bool)> {
    predictions
        .iter()
        .filter_map(|p| {
            p.top().map(|c| {
                (
                    c.distance,
                    truth.is_match(&p.query_offer_id, &c.index_offer_id),
                )
            })
        })
        .collect()
}

/// Precision-recall points at every distinct top-1 distance, ascending, starting
/// with the zero-accepted endpoint (precision 1, recall 0).
pub fn pr_curve(predictions: &[MatchPrediction], truth: &GroundTruth) -> Result<Vec<PrPoint>> {
    let denom = truth.matched_queries();
    if denom == 0 {
        return Err(undefined());
    }
    let mut scored = top1(predictions, truth);
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut curve = vec![PrPoint {
        threshold: DEGENERATE_THRESHOLD,
        precision: 1.0,
        recall: 0.0,
        accepted_count: 0,
        true_accepted: 0,
    }];
    let (mut accepted, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            accepted += 1;
            tp += usize::from(scored[i].1);
            i += 1;
        }
        curve.push(PrPoint {
            threshold: t,
            precision: tp as f64 / accepted as f64,
            recall: tp as f64 / denom as f64,
            accepted_count: accepted,
            true_accepted: tp,
        });
    }
    Ok(curve)
}

/// Step-wise area: `sum (R_i - R_{i-1}) * P_i` over consecutive curve points.
pub fn aucpr(curve: &[PrPoint]) -> Result<f64> {
    let first = curve
        .first()
        .ok_or_else(|| Error::UndefinedMetric("empty precision-recall curve".into()))?;
    let mut area = 0.0;
    let mut prev = first.recall;
    for p in &curve[1..] {
        area += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    Ok(area)
}

/// The curve point for accepting every top-1 candidate with `d <= threshold`.
pub fn point_at(curve: &[PrPoint], threshold: f64) -> PrPoint {
    let mut best = curve[0];
    for p in curve {
        if p.threshold <= threshold {
            best = *p;
        }
    }
    PrPoint { threshold, ..best }
}

/// Largest distance threshold whose precision is at least `target`, if any
/// non-degenerate point reaches it.
pub fn threshold_for_precision(curve: &[PrPoint], target: f64) -> Option<f64> {
    curve
        .iter()
        .filter(|p| p.accepted_count > 0 && p.precision >= target)
        .map(|p| p.threshold)
        .next_back()
}

pub fn evaluate(
    predictions: &[MatchPrediction],
    truth: &GroundTruth,
    ks: &[usize],
) -> Result<EvalReport> {
    let mut recall = BTreeMap::new();
    for &k in ks {
        recall.insert(k, recall_at_k(predictions, truth, k)?);
    }
    let curve = pr_curve(predictions, truth)?;
    Ok(EvalReport {
        query_count: predictions.len(),
        matched_queries: truth.matched_queries(),
        recall_at_k: recall,
        aucpr: aucpr(&curve)?,
        operating_point: point_at(&curve, OPERATING_DISTANCE),
        curve,
        categories: None,
    })
}

/// Every domain of `corpus` in turn queries an index built from all other
/// domains; predictions and ground truth are pooled before scoring.
pub fn cross_domain_eval(
    corpus: &Corpus,
    embeddings: &Embeddings,
    params: &MatchParams,
    ks: &[usize],
) -> Result<EvalReport> {
    let (predictions, truth) = cross_domain_predictions(corpus, embeddings, params)?;
    evaluate(&predictions, &truth, ks)
}

pub fn cross_domain_predictions(
    corpus: &Corpus,
    embeddings: &Embeddings,
    params: &MatchParams,
) -> Result<(Vec<MatchPrediction>, GroundTruth)> {
    let mut predictions = Vec::new();
    let mut truth = GroundTruth::default();
    for domain in corpus.domains() {
        let queries = corpus.restrict_to_domain(domain);
        let others: Vec<usize> = (0..corpus.len())
            .filter(|&i| &corpus.offers()[i].domain != domain)
            .collect();
        if others.is_empty() {
            continue;
        }
        let index_corpus = corpus.subset(others);
        let index = MatchIndex::build(embeddings, &index_corpus)?;
        let outcome = match_domains(&queries, embeddings, &index, params)?;
        if let Some(f) = outcome.failures.first() {
            return Err(Error::Offer {
                offer_id: f.query_id.clone(),
                source: Box::new(Error::Format(f.error.clone())),
            });
        }
        predictions.extend(outcome.predictions);
        truth.extend(GroundTruth::from_corpora(&queries, &index_corpus));
    }
    Ok((predictions, truth))
}

/// Full report per query category; categories with fewer than `min_matched`
/// matched queries are pooled into `"other"`.
pub fn per_category_report(
    predictions: &[MatchPrediction],
    truth: &GroundTruth,
    categories: &HashMap<String, String>,
    ks: &[usize],
    min_matched: usize,
) -> Result<BTreeMap<String, EvalReport>> {
    let category_of = |q: &str| {
        categories
            .get(q)
            .map(String::as_str)
            .unwrap_or(crate::domain::UNKNOWN_CATEGORY)
    };
    let mut matched: BTreeMap<&str, usize> = BTreeMap::new();
    for q in truth.queries() {
        *matched.entry(category_of(q)).or_default() += 1;
    }
    let bucket = |q: &str| -> String {
        let c = category_of(q);
        if matched.get(c).copied().unwrap_or(0) >= min_matched.max(1) {
            c.to_string()
        } else {
            OTHER_CATEGORY.to_string()
        }
    };
    let mut parts: BTreeMap<String, Vec<MatchPrediction>> = BTreeMap::new();
    for p in predictions {
        parts
            .entry(bucket(&p.query_offer_id))
            .or_default()
            .push(p.clone());
    }
    let mut out = BTreeMap::new();
    for (cat, preds) in parts {
        let sub_truth = truth.restrict(preds.iter().map(|p| p.query_offer_id.as_str()));
        if sub_truth.matched_queries() == 0 {
            continue;
        }
        out.insert(cat, evaluate(&preds, &sub_truth, ks)?);
    }
    Ok(out)
}
