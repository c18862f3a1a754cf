//! Human validation of match predictions: a queue of rows showing a query offer
//! with up to three candidates, vote aggregation, validator confusion
//! estimates and the likelihood-ratio prediction of post-validation precision.

mod log;
mod sim;
mod store;

use std::fmt;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use log::{DurableStore, EventLog, LoggedEvent, Snapshot};
pub use sim::{
    calibrate_accuracy, majority_fpr, majority_tpr, simulate_table4_run, simulate_validators,
    SimulatedRun, VoteAccuracy,
};
pub use store::{
    enqueue_predictions, plan_rows, snapshot_catalog, Catalog, EnqueueReport, Event,
    OfferSnapshot, RoutingPolicy, RowDraft, StoreStats, ValidationStore,
};

pub const MAX_CANDIDATES: usize = 3;
pub const DEFAULT_JUDGMENTS: usize = 3;
pub const DEFAULT_BOOTSTRAP: usize = 1000;

/// A validator's pick for one row, also used as the row verdict.
/// Serialized as `"candidate-1"`..`"candidate-3"` or `"no-match"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Choice {
    /// 1-based position among the shown candidates.
    Candidate(u8),
    NoMatch,
}

impl Choice {
    pub fn candidate(self) -> Option<usize> {
        match self {
            Choice::Candidate(c) => Some(usize::from(c)),
            Choice::NoMatch => None,
        }
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::Candidate(c) => write!(f, "candidate-{c}"),
            Choice::NoMatch => f.write_str("no-match"),
        }
    }
}

impl std::str::FromStr for Choice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "no-match" {
            return Ok(Choice::NoMatch);
        }
        match s.strip_prefix("candidate-").and_then(|n| n.parse::<u8>().ok()) {
            Some(n) if (1..=MAX_CANDIDATES as u8).contains(&n) => Ok(Choice::Candidate(n)),
            _ => Err(Error::domain(
                "choice",
                format!("expected candidate-1..3 or no-match, got {s:?}"),
            )),
        }
    }
}

impl TryFrom<String> for Choice {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Choice> for String {
    fn from(c: Choice) -> Self {
        c.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub validator: String,
    pub choice: Choice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowStatus {
    Pending,
    Complete,
}

/// Experiment-mode labels: 1-based positions of shown candidates that are true matches.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RowTruth {
    pub matching_candidates: Vec<usize>,
}

impl RowTruth {
    pub fn is_positive(&self) -> bool {
        !self.matching_candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub row_id: u64,
    pub query: OfferSnapshot,
    pub candidates: Vec<OfferSnapshot>,
    pub votes: Vec<Vote>,
    pub status: RowStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Choice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<RowTruth>,
}

impl ValidationRow {
    pub fn has_voted(&self, validator: &str) -> bool {
        self.votes.iter().any(|v| v.validator == validator)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationRule {
    /// A candidate is confirmed by a strict majority of the judgments.
    #[default]
    Majority,
    /// Every judgment names the same candidate.
    Unanimous,
    /// Any candidate vote confirms; the most voted candidate wins, ties to the
    /// earlier position.
    AnyPositive,
}

/// Verdict of a complete row of exactly `judgments` votes.
pub fn aggregate(rule: AggregationRule, votes: &[Choice], judgments: usize) -> Result<Choice> {
    if votes.len() != judgments || judgments == 0 {
        return Err(Error::Conflict(format!(
            "row has {} of {judgments} votes",
            votes.len()
        )));
    }
    let mut counts = [0usize; MAX_CANDIDATES + 1];
    for v in votes {
        if let Some(c) = v.candidate() {
            counts[c] += 1;
        }
    }
    let (best, &n) = counts
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .max_by_key(|(_, &n)| n)
        .expect("non-empty");
    let confirmed = match rule {
        AggregationRule::Majority => 2 * n > judgments,
        AggregationRule::Unanimous => n == judgments,
        AggregationRule::AnyPositive => n > 0,
    };
    Ok(if confirmed {
        Choice::Candidate(best as u8)
    } else {
        Choice::NoMatch
    })
}

/// Majority of three, the default rule.
pub fn aggregate_majority(votes: &[Choice]) -> Result<Choice> {
    aggregate(AggregationRule::Majority, votes, DEFAULT_JUDGMENTS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    /// Positive rows whose verdict is a true candidate.
    pub tp: usize,
    /// Positive rows without a true-candidate verdict.
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// Negative rows with a candidate verdict.
    pub fp: usize,
    /// Positive rows whose verdict is a wrong candidate (also counted in `fn_`).
    pub wrong_candidate: usize,
}

impl ConfusionCounts {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn rows(&self) -> usize {
        self.positives() + self.negatives()
    }

    /// Share of rows with a true match among the shown candidates.
    pub fn input_precision(&self) -> f64 {
        self.positives() as f64 / self.rows() as f64
    }

    /// True verdicts over all confirmed verdicts.
    pub fn output_precision(&self) -> Option<f64> {
        let confirmed = self.tp + self.fp + self.wrong_candidate;
        (confirmed > 0).then(|| self.tp as f64 / confirmed as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub tpr: f64,
    pub fnr: f64,
    pub tnr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionEstimate {
    pub rates: Rates,
    pub stderr: Rates,
    pub counts: ConfusionCounts,
    pub n_rows: usize,
}

/// Positive class of a labelled complete row, and whether its verdict is correct.
fn classify(row: &ValidationRow) -> Result<(bool, Choice, &RowTruth)> {
    let truth = row.ground_truth.as_ref().ok_or_else(|| {
        Error::domain("ground_truth", format!("row {} is unlabeled", row.row_id))
    })?;
    let verdict = match (row.status, row.verdict) {
        (RowStatus::Complete, Some(v)) => v,
        _ => {
            return Err(Error::domain(
                "status",
                format!("row {} is not complete", row.row_id),
            ))
        }
    };
    Ok((truth.is_positive(), verdict, truth))
}

pub fn confusion_counts<'a>(rows: impl IntoIterator<Item = &'a ValidationRow>) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for row in rows {
        let (positive, verdict, truth) = classify(row)?;
        match (positive, verdict.candidate()) {
            (true, Some(k)) if truth.matching_candidates.contains(&k) => c.tp += 1,
            (true, Some(_)) => {
                c.fn_ += 1;
                c.wrong_candidate += 1;
            }
            (true, None) => c.fn_ += 1,
            (false, Some(_)) => c.fp += 1,
            (false, None) => c.tn += 1,
        }
    }
    Ok(c)
}

fn rates(c: &ConfusionCounts) -> Result<Rates> {
    if c.positives() == 0 || c.negatives() == 0 {
        return Err(Error::UndefinedMetric(format!(
            "confusion needs rows of both classes, got {} positive and {} negative",
            c.positives(),
            c.negatives()
        )));
    }
    let tpr = c.tp as f64 / c.positives() as f64;
    let fpr = c.fp as f64 / c.negatives() as f64;
    Ok(Rates {
        tpr,
        fnr: c.fn_ as f64 / c.positives() as f64,
        tnr: c.tn as f64 / c.negatives() as f64,
        fpr,
    })
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Rates with bootstrap standard errors over rows (`resamples` draws with
/// replacement, seeded). Resamples lacking either class are skipped.
pub fn confusion<'a>(
    rows: impl IntoIterator<Item = &'a ValidationRow>,
    resamples: usize,
    seed: u64,
) -> Result<ConfusionEstimate> {
    let rows: Vec<&ValidationRow> = rows.into_iter().collect();
    let counts = confusion_counts(rows.iter().copied())?;
    let point = rates(&counts)?;
    // 0 = TP, 1 = FN, 2 = TN, 3 = FP per row.
    let kinds: Vec<u8> = rows
        .iter()
        .map(|r| {
            let (positive, verdict, truth) = classify(r).expect("classified above");
            let correct_pick = verdict
                .candidate()
                .is_some_and(|k| truth.matching_candidates.contains(&k));
            match (positive, verdict.candidate().is_some()) {
                (true, _) if correct_pick => 0,
                (true, _) => 1,
                (false, false) => 2,
                (false, true) => 3,
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tprs, mut fprs) = (Vec::with_capacity(resamples), Vec::with_capacity(resamples));
    let n = kinds.len();
    for _ in 0..resamples {
        let mut k = [0usize; 4];
        for _ in 0..n {
            k[usize::from(kinds[rng.random_range(0..n)])] += 1;
        }
        let (pos, neg) = (k[0] + k[1], k[2] + k[3]);
        if pos > 0 && neg > 0 {
            tprs.push(k[0] as f64 / pos as f64);
            fprs.push(k[3] as f64 / neg as f64);
        }
    }
    let (st, sf) = (sample_std(&tprs), sample_std(&fprs));
    Ok(ConfusionEstimate {
        rates: point,
        stderr: Rates {
            tpr: st,
            fnr: st,
            tnr: sf,
            fpr: sf,
        },
        counts,
        n_rows: n,
    })
}

/// Positive likelihood ratio; validators that never confirm a false match give
/// the distinct `Infinite` signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrPlus {
    Finite(f64),
    Infinite,
}

impl LrPlus {
    pub fn value(self) -> f64 {
        match self {
            LrPlus::Finite(v) => v,
            LrPlus::Infinite => f64::INFINITY,
        }
    }
}

pub fn lr_plus(rates: &Rates) -> Result<LrPlus> {
    lr_plus_from(rates.tpr, rates.fpr)
}

pub fn lr_plus_from(tpr: f64, fpr: f64) -> Result<LrPlus> {
    if !(0.0..=1.0).contains(&tpr) || !(0.0..=1.0).contains(&fpr) {
        return Err(Error::domain("rates", format!("TPR {tpr} / FPR {fpr} outside [0, 1]")));
    }
    match (tpr, fpr) {
        (t, f) if f > 0.0 => Ok(LrPlus::Finite(t / f)),
        (t, _) if t > 0.0 => Ok(LrPlus::Infinite),
        _ => Err(Error::UndefinedMetric("TPR and FPR are both zero".into())),
    }
}

/// `1 / (1 + (1/p_model - 1) / LR+)`.
pub fn predict_hitl_precision(p_model: f64, lr: LrPlus) -> Result<f64> {
    if !(p_model > 0.0 && p_model <= 1.0) {
        return Err(Error::domain("p_model", format!("must lie in (0, 1], got {p_model}")));
    }
    match lr {
        LrPlus::Infinite => Ok(1.0),
        LrPlus::Finite(l) if l > 0.0 && l.is_finite() => Ok(1.0 / (1.0 + (1.0 / p_model - 1.0) / l)),
        LrPlus::Finite(l) => Err(Error::domain("lr_plus", format!("must be positive, got {l}"))),
    }
}
