//! Two-stage retrieval: fuzzy brand blocking, then exact cosine kNN inside the
//! block, then a distance-threshold discriminator.
//!
//! Distance is `d = 1 - v_q . v_i` on unit vectors, similarity `s = 1 - d`.
//! Candidates are ordered by ascending distance, ties by ascending offer id.

mod jaro;
mod persist;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{normalize_segment, Corpus, DomainId};
use crate::encoder::Embeddings;
use crate::error::{Error, Result};

pub use jaro::{jaro, jaro_winkler};
pub use persist::{read_index, write_index};

pub const DEFAULT_BRAND_SIMILARITY: f64 = 0.85;
pub const DEFAULT_K: usize = 3;
/// Similarity 0.80.
pub const DEFAULT_DISTANCE_THRESHOLD: f64 = 0.20;

const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offer_id: String,
    pub brand: String,
    pub domain: DomainId,
    pub category: String,
}

/// Immutable brand-partitioned store of unit embeddings.
#[derive(Debug, Clone)]
pub struct MatchIndex {
    entries: Vec<IndexEntry>,
    vectors: Array2<f64>,
    brand_groups: BTreeMap<String, Vec<usize>>,
    domains: BTreeSet<DomainId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(rename = "index_id")]
    pub index_offer_id: String,
    pub distance: f64,
    pub similarity: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPrediction {
    #[serde(rename = "query_id")]
    pub query_offer_id: String,
    pub candidates: Vec<Candidate>,
    pub threshold: f64,
}

impl MatchPrediction {
    pub fn top(&self) -> Option<&Candidate> {
        self.candidates.first()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchParams {
    pub k: usize,
    pub brand_threshold: f64,
    pub distance_threshold: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            k: DEFAULT_K,
            brand_threshold: DEFAULT_BRAND_SIMILARITY,
            distance_threshold: DEFAULT_DISTANCE_THRESHOLD,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.brand_threshold) {
            return Err(Error::Config(format!(
                "brand similarity threshold must be in [0, 1], got {}",
                self.brand_threshold
            )));
        }
        if !(0.0..=2.0).contains(&self.distance_threshold) {
            return Err(Error::Config(format!(
                "distance threshold must be in [0, 2], got {}",
                self.distance_threshold
            )));
        }
        Ok(())
    }
}

/// `1 - a . b`, clamped to the `[0, 2]` range of unit vectors.
pub fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    (1.0 - a.dot(&b)).clamp(0.0, 2.0)
}

impl MatchIndex {
    /// Builds the index over every offer of `corpus`, looking embeddings up by offer id.
    pub fn build(embeddings: &Embeddings, corpus: &Corpus) -> Result<Self> {
        let lookup = embeddings.lookup();
        let mut seen = HashSet::new();
        let mut missing = Vec::new();
        let mut rows = Vec::with_capacity(corpus.len());
        for offer in corpus.offers() {
            if !seen.insert(offer.offer_id.as_str()) {
                return Err(Error::DuplicateOffer {
                    domain: offer.domain.to_string(),
                    offer_id: offer.offer_id.clone(),
                });
            }
            match lookup.get(offer.offer_id.as_str()) {
                Some(&r) => rows.push(r),
                None => missing.push(offer.offer_id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingEmbedding(missing));
        }
        let vectors = if rows.is_empty() {
            Array2::zeros((0, embeddings.dim()))
        } else {
            embeddings.vectors.select(Axis(0), &rows)
        };
        let entries: Vec<IndexEntry> = corpus
            .offers()
            .iter()
            .map(|o| IndexEntry {
                offer_id: o.offer_id.clone(),
                brand: o.brand_key(),
                domain: o.domain.clone(),
                category: o.category.clone(),
            })
            .collect();
        Self::from_parts(entries, vectors)
    }

    /// Index over prepared entries and their unit embeddings, row for row.
    pub fn from_parts(entries: Vec<IndexEntry>, vectors: Array2<f64>) -> Result<Self> {
        if entries.len() != vectors.nrows() {
            return Err(Error::dimension("index rows", entries.len(), vectors.nrows()));
        }
        for (row, e) in vectors.axis_iter(Axis(0)).zip(&entries) {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::domain(
                    "embedding",
                    format!("embedding of {} has norm {norm}, expected 1", e.offer_id),
                ));
            }
        }
        let mut brand_groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            brand_groups.entry(e.brand.clone()).or_default().push(i);
        }
        let domains = entries.iter().map(|e| e.domain.clone()).collect();
        Ok(MatchIndex {
            entries,
            vectors,
            brand_groups,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn vector(&self, pos: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(pos)
    }

    pub fn brand_groups(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.brand_groups
    }

    pub fn domains(&self) -> &BTreeSet<DomainId> {
        &self.domains
    }

    pub fn all_positions(&self) -> Vec<usize> {
        (0..self.entries.len()).collect()
    }
}

/// Positions of all entries whose normalized brand has Jaro-Winkler
/// similarity `>= sim_threshold` with the normalized query brand, ascending.
pub fn brand_block(query_brand: &str, index: &MatchIndex, sim_threshold: f64) -> Vec<usize> {
    if sim_threshold <= 0.0 {
        return index.all_positions();
    }
    let query = normalize_segment(query_brand);
    let mut block: Vec<usize> = index
        .brand_groups
        .iter()
        .filter(|(brand, _)| jaro_winkler(&query, brand) >= sim_threshold)
        .flat_map(|(_, members)| members.iter().copied())
        .collect();
    block.sort_unstable();
    block
}

/// Exact k nearest neighbours of `query` among `block`.
pub fn knn(query: ArrayView1<f64>, index: &MatchIndex, block: &[usize], k: usize) -> Vec<Candidate> {
    if k == 0 || block.is_empty() {
        return Vec::new();
    }
    let mut scored: Vec<(f64, usize)> = block
        .iter()
        .map(|&p| (cosine_distance(query, index.vector(p)), p))
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
        a.0.total_cmp(&b.0)
            .then_with(|| index.entries[a.1].offer_id.cmp(&index.entries[b.1].offer_id))
    };
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(order);
    scored
        .into_iter()
        .map(|(d, p)| Candidate {
            index_offer_id: index.entries[p].offer_id.clone(),
            distance: d,
            similarity: 1.0 - d,
            accepted: false,
        })
        .collect()
}

/// Accepts candidates with `distance <= threshold`.
pub fn discriminate(mut candidates: Vec<Candidate>, threshold: f64) -> Vec<Candidate> {
    for c in &mut candidates {
        c.accepted = c.distance <= threshold;
    }
    candidates
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub predictions: Vec<MatchPrediction>,
    pub failures: Vec<QueryFailure>,
}

/// Runs blocking, kNN and the discriminator for every query offer. Failing
/// queries are reported in [`MatchOutcome::failures`] and do not abort the run.
pub fn match_domains(
    queries: &Corpus,
    query_embeddings: &Embeddings,
    index: &MatchIndex,
    params: &MatchParams,
) -> Result<MatchOutcome> {
    params.validate()?;
    let lookup: HashMap<&str, usize> = query_embeddings.lookup();
    let results: Vec<std::result::Result<MatchPrediction, QueryFailure>> = queries
        .offers()
        .par_iter()
        .map(|q| {
            let fail = |error: String| QueryFailure {
                query_id: q.offer_id.clone(),
                error,
            };
            if index.domains.contains(&q.domain) {
                return Err(fail(format!(
                    "query domain {} is also an index domain",
                    q.domain
                )));
            }
            let row = *lookup
                .get(q.offer_id.as_str())
                .ok_or_else(|| fail("missing embedding".into()))?;
            let v = query_embeddings.row(row);
            if !index.is_empty() && v.len() != index.dim() {
                return Err(fail(format!(
                    "embedding dimension {} does not match index dimension {}",
                    v.len(),
                    index.dim()
                )));
            }
            let block = brand_block(&q.brand_raw, index, params.brand_threshold);
            let candidates = knn(v, index, &block, params.k);
            Ok(MatchPrediction {
                query_offer_id: q.offer_id.clone(),
                candidates: discriminate(candidates, params.distance_threshold),
                threshold: params.distance_threshold,
            })
        })
        .collect();
    let mut outcome = MatchOutcome::default();
    for r in results {
        match r {
            Ok(p) => outcome.predictions.push(p),
            Err(f) => outcome.failures.push(f),
        }
    }
    Ok(outcome)
}
