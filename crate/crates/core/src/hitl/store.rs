use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{
    aggregate, confusion, lr_plus, predict_hitl_precision, AggregationRule, Choice,
    ConfusionEstimate, LrPlus, RowStatus, RowTruth, ValidationRow, Vote, DEFAULT_BOOTSTRAP,
    MAX_CANDIDATES,
};
use crate::domain::Corpus;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::retrieval::MatchPrediction;

/// What a validator sees of one offer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferSnapshot {
    pub offer_id: String,
    pub title: String,
    pub brand: String,
    pub image_refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

impl OfferSnapshot {
    pub fn bare(offer_id: impl Into<String>) -> Self {
        OfferSnapshot {
            offer_id: offer_id.into(),
            title: String::new(),
            brand: String::new(),
            image_refs: Vec::new(),
            similarity: None,
        }
    }
}

pub type Catalog = HashMap<String, OfferSnapshot>;

/// Display snapshots of every offer; image refs are `<offer_id>#<n>`.
pub fn snapshot_catalog(corpora: &[&Corpus]) -> Catalog {
    corpora
        .iter()
        .flat_map(|c| c.offers())
        .map(|o| {
            (
                o.offer_id.clone(),
                OfferSnapshot {
                    offer_id: o.offer_id.clone(),
                    title: o.title_raw.clone(),
                    brand: o.brand_raw.clone(),
                    image_refs: (0..o.image_embeddings.len())
                        .map(|i| format!("{}#{i}", o.offer_id))
                        .collect(),
                    similarity: None,
                },
            )
        })
        .collect()
}

/// Which predictions go to humans, by top-1 cosine distance: below
/// `auto_accept_below` they are accepted without review; candidates beyond
/// `auto_reject_above` are never shown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingPolicy {
    pub auto_accept_below: f64,
    pub auto_reject_above: f64,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        RoutingPolicy {
            auto_accept_below: 0.0,
            auto_reject_above: crate::retrieval::DEFAULT_DISTANCE_THRESHOLD,
        }
    }
}

impl RoutingPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.auto_accept_below
            && self.auto_accept_below <= self.auto_reject_above
            && self.auto_reject_above <= 2.0;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(
                "routing_policy",
                format!(
                    "need 0 <= auto_accept_below ({}) <= auto_reject_above ({}) <= 2",
                    self.auto_accept_below, self.auto_reject_above
                ),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowDraft {
    pub query: OfferSnapshot,
    pub candidates: Vec<OfferSnapshot>,
    pub truth: Option<RowTruth>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnqueueReport {
    pub created: Vec<u64>,
    pub duplicates: usize,
    pub auto_accepted: usize,
    pub auto_rejected: usize,
}

/// Rows for the in-band predictions, each with its top accepted candidates
/// (at most three) within the reject bound.
pub fn plan_rows(
    predictions: &[MatchPrediction],
    policy: &RoutingPolicy,
    catalog: &Catalog,
    truth: Option<&GroundTruth>,
) -> Result<(Vec<RowDraft>, EnqueueReport)> {
    policy.validate()?;
    let snap = |id: &str| catalog.get(id).cloned().unwrap_or_else(|| OfferSnapshot::bare(id));
    let mut report = EnqueueReport::default();
    let mut drafts = Vec::new();
    for p in predictions {
        let shown: Vec<_> = p
            .candidates
            .iter()
            .filter(|c| c.accepted && c.distance <= policy.auto_reject_above)
            .take(MAX_CANDIDATES)
            .collect();
        let Some(top) = shown.first() else {
            report.auto_rejected += 1;
            continue;
        };
        if top.distance < policy.auto_accept_below {
            report.auto_accepted += 1;
            continue;
        }
        let candidates = shown
            .iter()
            .map(|c| OfferSnapshot {
                similarity: Some(c.similarity),
                ..snap(&c.index_offer_id)
            })
            .collect();
        let truth = truth.map(|t| RowTruth {
            matching_candidates: shown
                .iter()
                .enumerate()
                .filter(|(_, c)| t.is_match(&p.query_offer_id, &c.index_offer_id))
                .map(|(i, _)| i + 1)
                .collect(),
        });
        drafts.push(RowDraft {
            query: snap(&p.query_offer_id),
            candidates,
            truth,
        });
    }
    Ok((drafts, report))
}

/// State changes of the store, as written to the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Event {
    RowCreated { row: ValidationRow },
    Vote { row_id: u64, validator: String, choice: Choice },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub rows_total: usize,
    pub rows_pending: usize,
    pub rows_complete: usize,
    pub votes: usize,
    /// Share of complete rows whose votes are all identical.
    pub agreement_rate: Option<f64>,
    pub labelled_complete: usize,
    pub confusion: Option<ConfusionEstimate>,
    pub lr_plus: Option<LrPlus>,
    pub p_model: Option<f64>,
    pub predicted_p_hitl: Option<f64>,
    pub empirical_output_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreState {
    judgments: usize,
    rule: AggregationRule,
    next_row_id: u64,
    rows: Vec<ValidationRow>,
}

/// In-memory row queue. Every mutation goes through [`ValidationStore::apply`]
/// so that replaying the same events rebuilds the same state.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationStore {
    judgments: usize,
    rule: AggregationRule,
    rows: BTreeMap<u64, ValidationRow>,
    keys: HashMap<String, u64>,
    next_row_id: u64,
}

fn row_key(query: &str, candidates: &[OfferSnapshot]) -> String {
    let mut k = query.to_string();
    for c in candidates {
        k.push('\u{1f}');
        k.push_str(&c.offer_id);
    }
    k
}

impl ValidationStore {
    pub fn new(judgments: usize, rule: AggregationRule) -> Result<Self> {
        if judgments == 0 {
            return Err(Error::domain("judgments_per_row", "must be at least 1"));
        }
        Ok(ValidationStore {
            judgments,
            rule,
            rows: BTreeMap::new(),
            keys: HashMap::new(),
            next_row_id: 1,
        })
    }

    pub fn judgments(&self) -> usize {
        self.judgments
    }

    pub fn rule(&self) -> AggregationRule {
        self.rule
    }

    pub fn row(&self, id: u64) -> Option<&ValidationRow> {
        self.rows.get(&id)
    }

    pub fn rows(&self) -> impl Iterator<Item = &ValidationRow> {
        self.rows.values()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Event creating a row for `draft`, or `None` when the same query and
    /// candidate list is already queued.
    pub fn prepare_row(&self, draft: RowDraft) -> Result<Option<Event>> {
        if draft.candidates.is_empty() || draft.candidates.len() > MAX_CANDIDATES {
            return Err(Error::domain(
                "candidates",
                format!("a row shows 1 to 3 candidates, got {}", draft.candidates.len()),
            ));
        }
        if self.keys.contains_key(&row_key(&draft.query.offer_id, &draft.candidates)) {
            return Ok(None);
        }
        Ok(Some(Event::RowCreated {
            row: ValidationRow {
                row_id: self.next_row_id,
                query: draft.query,
                candidates: draft.candidates,
                votes: Vec::new(),
                status: RowStatus::Pending,
                verdict: None,
                ground_truth: draft.truth,
            },
        }))
    }

    /// Event recording a vote, after checking it against the current row.
    pub fn prepare_vote(&self, row_id: u64, validator: &str, choice: Choice) -> Result<Event> {
        let row = self
            .rows
            .get(&row_id)
            .ok_or_else(|| Error::NotFound(format!("row {row_id}")))?;
        if validator.trim().is_empty() {
            return Err(Error::domain("validator", "validator id must be non-empty"));
        }
        if row.status == RowStatus::Complete {
            return Err(Error::Conflict(format!("row {row_id} is already complete")));
        }
        if row.has_voted(validator) {
            return Err(Error::Conflict(format!(
                "validator {validator} already voted on row {row_id}"
            )));
        }
        if let Some(c) = choice.candidate() {
            if c > row.candidates.len() {
                return Err(Error::domain(
                    "choice",
                    format!("row {row_id} shows {} candidates, got {choice}", row.candidates.len()),
                ));
            }
        }
        Ok(Event::Vote {
            row_id,
            validator: validator.to_string(),
            choice,
        })
    }

    pub fn apply(&mut self, event: &Event) -> Result<()> {
        match event {
            Event::RowCreated { row } => {
                if self.rows.contains_key(&row.row_id) {
                    return Err(Error::Conflict(format!("row {} already exists", row.row_id)));
                }
                self.keys
                    .insert(row_key(&row.query.offer_id, &row.candidates), row.row_id);
                self.next_row_id = self.next_row_id.max(row.row_id + 1);
                self.rows.insert(row.row_id, row.clone());
            }
            Event::Vote {
                row_id,
                validator,
                choice,
            } => {
                self.prepare_vote(*row_id, validator, *choice)?;
                let (judgments, rule) = (self.judgments, self.rule);
                let row = self.rows.get_mut(row_id).expect("checked");
                row.votes.push(Vote {
                    validator: validator.clone(),
                    choice: *choice,
                });
                if row.votes.len() == judgments {
                    let choices: Vec<Choice> = row.votes.iter().map(|v| v.choice).collect();
                    row.verdict = Some(aggregate(rule, &choices, judgments)?);
                    row.status = RowStatus::Complete;
                }
            }
        }
        Ok(())
    }

    /// Returns the new row id, or `None` for a duplicate.
    pub fn create_row(&mut self, draft: RowDraft) -> Result<Option<u64>> {
        match self.prepare_row(draft)? {
            Some(e) => {
                let id = match &e {
                    Event::RowCreated { row } => row.row_id,
                    Event::Vote { .. } => unreachable!(),
                };
                self.apply(&e)?;
                Ok(Some(id))
            }
            None => Ok(None),
        }
    }

    pub fn record_vote(&mut self, row_id: u64, validator: &str, choice: Choice) -> Result<&ValidationRow> {
        let e = self.prepare_vote(row_id, validator, choice)?;
        self.apply(&e)?;
        Ok(&self.rows[&row_id])
    }

    /// Lowest-id pending row this validator has not voted on.
    pub fn next_for(&self, validator: &str) -> Option<&ValidationRow> {
        self.rows
            .values()
            .find(|r| r.status == RowStatus::Pending && !r.has_voted(validator))
    }

    /// Queue counters plus, over labelled complete rows, the confusion
    /// estimate and the predicted output precision for `p_model` (the
    /// empirical input precision when `None`).
    pub fn stats(&self, p_model: Option<f64>, seed: u64) -> StoreStats {
        let complete: Vec<&ValidationRow> = self
            .rows
            .values()
            .filter(|r| r.status == RowStatus::Complete)
            .collect();
        let agreeing = complete
            .iter()
            .filter(|r| r.votes.windows(2).all(|w| w[0].choice == w[1].choice))
            .count();
        let labelled: Vec<&ValidationRow> = complete
            .iter()
            .copied()
            .filter(|r| r.ground_truth.is_some())
            .collect();
        let confusion = confusion(labelled.iter().copied(), DEFAULT_BOOTSTRAP, seed).ok();
        let lr = confusion.as_ref().and_then(|c| lr_plus(&c.rates).ok());
        let p_model = p_model.or_else(|| confusion.as_ref().map(|c| c.counts.input_precision()));
        let predicted = match (p_model, lr) {
            (Some(p), Some(l)) => predict_hitl_precision(p, l).ok(),
            _ => None,
        };
        StoreStats {
            rows_total: self.rows.len(),
            rows_pending: self.rows.len() - complete.len(),
            rows_complete: complete.len(),
            votes: self.rows.values().map(|r| r.votes.len()).sum(),
            agreement_rate: (!complete.is_empty()).then(|| agreeing as f64 / complete.len() as f64),
            labelled_complete: labelled.len(),
            empirical_output_precision: confusion.as_ref().and_then(|c| c.counts.output_precision()),
            confusion,
            lr_plus: lr,
            p_model,
            predicted_p_hitl: predicted,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(StoreState {
            judgments: self.judgments,
            rule: self.rule,
            next_row_id: self.next_row_id,
            rows: self.rows.values().cloned().collect(),
        })
        .expect("store state serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let state: StoreState = serde_json::from_value(value)?;
        let mut store = ValidationStore::new(state.judgments, state.rule)?;
        for row in state.rows {
            store
                .keys
                .insert(row_key(&row.query.offer_id, &row.candidates), row.row_id);
            store.rows.insert(row.row_id, row);
        }
        store.next_row_id = state.next_row_id;
        Ok(store)
    }
}

/// Routes `predictions` and creates one row per new in-band query.
pub fn enqueue_predictions(
    store: &mut ValidationStore,
    predictions: &[MatchPrediction],
    policy: &RoutingPolicy,
    catalog: &Catalog,
    truth: Option<&GroundTruth>,
) -> Result<EnqueueReport> {
    let (drafts, mut report) = plan_rows(predictions, policy, catalog, truth)?;
    for d in drafts {
        match store.create_row(d)? {
            Some(id) => report.created.push(id),
            None => report.duplicates += 1,
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Candidate;
    use proptest::prelude::*;

    fn pred(q: &str, cands: &[(&str, f64)]) -> MatchPrediction {
        MatchPrediction {
            query_offer_id: q.into(),
            candidates: cands
                .iter()
                .map(|(id, d)| Candidate {
                    index_offer_id: (*id).into(),
                    distance: *d,
                    similarity: 1.0 - d,
                    accepted: *d <= 0.2,
                })
                .collect(),
            threshold: 0.2,
        }
    }

    fn draft(q: &str, n: usize) -> RowDraft {
        RowDraft {
            query: OfferSnapshot::bare(q),
            candidates: (0..n).map(|i| OfferSnapshot::bare(format!("{q}c{i}"))).collect(),
            truth: None,
        }
    }

    #[test]
    fn vote_lifecycle() {
        let mut s = ValidationStore::new(3, AggregationRule::Majority).unwrap();
        let id = s.create_row(draft("q", 3)).unwrap().unwrap();
        s.record_vote(id, "a", Choice::Candidate(2)).unwrap();
        assert!(matches!(s.record_vote(id, "a", Choice::NoMatch), Err(Error::Conflict(_))));
        assert_eq!(s.row(id).unwrap().votes.len(), 1);
        s.record_vote(id, "b", Choice::NoMatch).unwrap();
        let row = s.record_vote(id, "c", Choice::Candidate(2)).unwrap();
        assert_eq!(row.status, RowStatus::Complete);
        assert_eq!(row.verdict, Some(Choice::Candidate(2)));
        assert!(matches!(s.record_vote(id, "d", Choice::NoMatch), Err(Error::Conflict(_))));
        assert!(matches!(s.record_vote(99, "d", Choice::NoMatch), Err(Error::NotFound(_))));
    }

    #[test]
    fn choice_beyond_shown_candidates_rejected() {
        let mut s = ValidationStore::new(3, AggregationRule::Majority).unwrap();
        let id = s.create_row(draft("q", 2)).unwrap().unwrap();
        assert!(matches!(s.record_vote(id, "a", Choice::Candidate(3)), Err(Error::Domain { .. })));
        assert!(s.record_vote(id, " ", Choice::NoMatch).is_err());
    }

    #[test]
    fn next_skips_own_votes() {
        let mut s = ValidationStore::new(3, AggregationRule::Majority).unwrap();
        let a = s.create_row(draft("q1", 1)).unwrap().unwrap();
        let b = s.create_row(draft("q2", 1)).unwrap().unwrap();
        assert_eq!(s.next_for("v").unwrap().row_id, a);
        s.record_vote(a, "v", Choice::NoMatch).unwrap();
        assert_eq!(s.next_for("v").unwrap().row_id, b);
        s.record_vote(b, "v", Choice::NoMatch).unwrap();
        assert!(s.next_for("v").is_none());
        assert_eq!(s.next_for("w").unwrap().row_id, a);
    }

    #[test]
    fn enqueue_routes_and_is_idempotent() {
        let mut s = ValidationStore::new(3, AggregationRule::Majority).unwrap();
        let preds = vec![
            pred("q1", &[("a", 0.01), ("b", 0.1)]),
            pred("q2", &[("c", 0.1), ("d", 0.15), ("e", 0.18), ("f", 0.19)]),
            pred("q3", &[("g", 0.5)]),
            pred("q4", &[]),
        ];
        let policy = RoutingPolicy { auto_accept_below: 0.05, auto_reject_above: 0.2 };
        let truth = GroundTruth::from_pairs([("q2", "d")]);
        let r = enqueue_predictions(&mut s, &preds, &policy, &Catalog::new(), Some(&truth)).unwrap();
        assert_eq!(r.created.len(), 1);
        assert_eq!((r.auto_accepted, r.auto_rejected), (1, 2));
        let row = s.row(r.created[0]).unwrap();
        assert_eq!(row.candidates.len(), 3);
        assert_eq!(row.ground_truth.as_ref().unwrap().matching_candidates, vec![2]);
        let again = enqueue_predictions(&mut s, &preds, &policy, &Catalog::new(), None).unwrap();
        assert!(again.created.is_empty());
        assert_eq!(again.duplicates, 1);
        assert_eq!(s.len(), 1);

        let all_auto = RoutingPolicy { auto_accept_below: 0.2, auto_reject_above: 0.2 };
        let mut fresh = ValidationStore::new(3, AggregationRule::Majority).unwrap();
        let r = enqueue_predictions(&mut fresh, &preds[..2], &all_auto, &Catalog::new(), None).unwrap();
        assert!(r.created.is_empty());
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut s = ValidationStore::new(3, AggregationRule::Unanimous).unwrap();
        let id = s.create_row(draft("q", 2)).unwrap().unwrap();
        s.record_vote(id, "a", Choice::Candidate(1)).unwrap();
        let back = ValidationStore::from_json(s.to_json()).unwrap();
        assert_eq!(back, s);
        let mut s2 = back;
        assert_eq!(s2.create_row(draft("q", 2)).unwrap(), None);
        assert_eq!(s2.create_row(draft("r", 2)).unwrap(), Some(id + 1));
    }

    #[test]
    fn fresh_stats_are_empty() {
        let s = ValidationStore::new(3, AggregationRule::Majority).unwrap();
        let st = s.stats(Some(0.3), 0);
        assert_eq!((st.rows_total, st.votes), (0, 0));
        assert!(st.confusion.is_none() && st.predicted_p_hitl.is_none());
    }

    proptest! {
        /// Row count equals a direct recount of in-band predictions.
        #[test]
        fn enqueue_recount(tops in proptest::collection::vec(proptest::option::of(0u8..40), 0..40), lo in 0u8..10, hi in 10u8..30) {
            let preds: Vec<MatchPrediction> = tops.iter().enumerate().map(|(i, t)| match t {
                Some(d) => pred(&format!("q{i}"), &[(&format!("c{i}"), f64::from(*d) / 100.0)]),
                None => pred(&format!("q{i}"), &[]),
            }).collect();
            let policy = RoutingPolicy { auto_accept_below: f64::from(lo) / 100.0, auto_reject_above: f64::from(hi) / 100.0 };
            let in_band = tops.iter().flatten().filter(|&&d| {
                let d = f64::from(d) / 100.0;
                d <= 0.2 && d <= policy.auto_reject_above && d >= policy.auto_accept_below
            }).count();
            let mut s = ValidationStore::new(3, AggregationRule::Majority).unwrap();
            let r = enqueue_predictions(&mut s, &preds, &policy, &Catalog::new(), None).unwrap();
            prop_assert_eq!(r.created.len(), in_band);
            prop_assert_eq!(r.created.len() + r.auto_accepted + r.auto_rejected, preds.len());
        }
    }
}
