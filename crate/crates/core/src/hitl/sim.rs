//! Simulated validators with per-class vote accuracy, for reproducing
//! validation-quality experiments without people.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::store::RowDraft;
use super::{
    confusion, lr_plus_from, predict_hitl_precision, AggregationRule, Choice, ConfusionEstimate,
    OfferSnapshot, RowTruth, ValidationRow, ValidationStore, Vote, DEFAULT_BOOTSTRAP,
    MAX_CANDIDATES,
};
use crate::error::{Error, Result};

/// Probability that a single vote is correct, per true class of the row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteAccuracy {
    /// On rows with a true match: picks that candidate, otherwise "no match".
    pub positive: f64,
    /// On rows without one: "no match", otherwise a uniformly random shown candidate.
    pub negative: f64,
}

/// Independent votes for every row carrying ground truth, from validators
/// `sim-1`..`sim-n`.
pub fn simulate_validators(
    rows: &[&ValidationRow],
    accuracy: VoteAccuracy,
    judgments: usize,
    seed: u64,
) -> Result<Vec<(u64, Vec<Vote>)>> {
    for (name, a) in [("positive", accuracy.positive), ("negative", accuracy.negative)] {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::domain("accuracy", format!("{name} accuracy {a} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let Some(truth) = &row.ground_truth else { continue };
        let votes = (1..=judgments)
            .map(|v| {
                let choice = match truth.matching_candidates.first() {
                    Some(&k) if rng.random_bool(accuracy.positive) => Choice::Candidate(k as u8),
                    Some(_) => Choice::NoMatch,
                    None if rng.random_bool(accuracy.negative) => Choice::NoMatch,
                    None => Choice::Candidate(rng.random_range(1..=row.candidates.len()) as u8),
                };
                Vote {
                    validator: format!("sim-{v}"),
                    choice,
                }
            })
            .collect();
        out.push((row.row_id, votes));
    }
    Ok(out)
}

fn binomial_tail_above_half(n: usize, p: f64) -> f64 {
    // P(X > n/2), X ~ Bin(n, p)
    let mut total = 0.0;
    let mut coef = 1.0;
    for k in 0..=n {
        if k > 0 {
            coef = coef * (n - k + 1) as f64 / k as f64;
        }
        if 2 * k > n {
            total += coef * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32);
        }
    }
    total
}

/// TPR of strict-majority aggregation over `judgments` votes of accuracy `a`.
pub fn majority_tpr(a: f64, judgments: usize) -> f64 {
    binomial_tail_above_half(judgments, a)
}

/// FPR of strict-majority aggregation on negative rows showing `shown`
/// candidates. At most one candidate can hold a strict majority, so the
/// per-candidate events are disjoint.
pub fn majority_fpr(a: f64, shown: usize, judgments: usize) -> f64 {
    shown as f64 * binomial_tail_above_half(judgments, (1.0 - a) / shown as f64)
}

/// Solves `f(a) = target` on `[0, 1]` by bisection for monotone `f`.
pub fn calibrate_accuracy(target: f64, f: impl Fn(f64) -> f64) -> Result<f64> {
    let (f0, f1) = (f(0.0), f(1.0));
    if !(f0.min(f1)..=f0.max(f1)).contains(&target) {
        return Err(Error::domain(
            "target",
            format!("{target} outside attainable range [{}, {}]", f0.min(f1), f0.max(f1)),
        ));
    }
    let increasing = f1 >= f0;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) < target) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulatedRun {
    pub accuracy: VoteAccuracy,
    pub estimate: ConfusionEstimate,
    pub input_precision: f64,
    pub output_precision: f64,
    /// The precision formula at the empirical input precision and LR+.
    pub predicted_output_precision: f64,
}

/// A full synthetic validation campaign: `rows` rows of three candidates,
/// `round(input_precision * rows)` of them holding one true match at a random
/// position, validated by three simulated validators whose accuracies are
/// calibrated so that majority voting has the target TPR and FPR.
pub fn simulate_table4_run(
    rows: usize,
    input_precision: f64,
    target_tpr: f64,
    target_fpr: f64,
    seed: u64,
) -> Result<SimulatedRun> {
    let judgments = 3;
    let accuracy = VoteAccuracy {
        positive: calibrate_accuracy(target_tpr, |a| majority_tpr(a, judgments))?,
        negative: calibrate_accuracy(target_fpr, |a| majority_fpr(a, MAX_CANDIDATES, judgments))?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives = (input_precision * rows as f64).round() as usize;
    let mut store = ValidationStore::new(judgments, AggregationRule::Majority)?;
    for i in 0..rows {
        let matching = if i < positives {
            vec![rng.random_range(1..=MAX_CANDIDATES)]
        } else {
            Vec::new()
        };
        store.create_row(RowDraft {
            query: OfferSnapshot::bare(format!("q{i}")),
            candidates: (1..=MAX_CANDIDATES)
                .map(|c| OfferSnapshot::bare(format!("q{i}-c{c}")))
                .collect(),
            truth: Some(RowTruth {
                matching_candidates: matching,
            }),
        })?;
    }
    let all: Vec<&ValidationRow> = store.rows().collect();
    let votes = simulate_validators(&all, accuracy, judgments, rng.random())?;
    for (row_id, vs) in votes {
        for v in vs {
            store.record_vote(row_id, &v.validator, v.choice)?;
        }
    }
    let estimate = confusion(store.rows(), DEFAULT_BOOTSTRAP, rng.random())?;
    let c = estimate.counts;
    let output_precision = c
        .output_precision()
        .ok_or_else(|| Error::UndefinedMetric("no row was confirmed".into()))?;
    let lr = lr_plus_from(estimate.rates.tpr, estimate.rates.fpr)?;
    Ok(SimulatedRun {
        accuracy,
        input_precision: c.input_precision(),
        output_precision,
        predicted_output_precision: predict_hitl_precision(c.input_precision(), lr)?,
        estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_formulas() {
        for a in [0.0, 0.3, 0.5, 0.8, 1.0] {
            assert!((majority_tpr(a, 3) - (3.0 * a * a - 2.0 * a * a * a)).abs() < 1e-15);
        }
        assert!((majority_tpr(0.5, 3) - 0.5).abs() < 1e-15);
        assert_eq!(majority_fpr(1.0, 3, 3), 0.0);
        let a = calibrate_accuracy(0.794, |a| majority_tpr(a, 3)).unwrap();
        assert!((majority_tpr(a, 3) - 0.794).abs() < 1e-12);
        let b = calibrate_accuracy(0.018, |a| majority_fpr(a, 3, 3)).unwrap();
        assert!((majority_fpr(b, 3, 3) - 0.018).abs() < 1e-12);
        assert!(calibrate_accuracy(1.5, |a| a).is_err());
    }

    /// Monte Carlo FPR of a single negative row against the closed form.
    #[test]
    fn fpr_formula_matches_direct_simulation() {
        let a = 0.6;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trials = 200_000;
        let mut hits = 0;
        for _ in 0..trials {
            let mut counts = [0; 4];
            for _ in 0..3 {
                if !rng.random_bool(a) {
                    counts[rng.random_range(1..=3)] += 1;
                }
            }
            if counts.iter().any(|&c| c >= 2) {
                hits += 1;
            }
        }
        let p = hits as f64 / trials as f64;
        assert!((p - majority_fpr(a, 3, 3)).abs() < 0.005, "{p}");
    }

    fn rows(n: usize, positive_every: usize) -> ValidationStore {
        let mut s = ValidationStore::new(3, AggregationRule::Majority).unwrap();
        for i in 0..n {
            s.create_row(RowDraft {
                query: OfferSnapshot::bare(format!("q{i}")),
                candidates: vec![OfferSnapshot::bare("a"), OfferSnapshot::bare("b")],
                truth: Some(RowTruth {
                    matching_candidates: if i % positive_every == 0 { vec![2] } else { vec![] },
                }),
            })
            .unwrap();
        }
        s
    }

    #[test]
    fn perfect_accuracy_is_identity() {
        let mut s = rows(30, 3);
        let all: Vec<&ValidationRow> = s.rows().collect();
        let votes = simulate_validators(&all, VoteAccuracy { positive: 1.0, negative: 1.0 }, 3, 4).unwrap();
        for (id, vs) in votes {
            for v in vs {
                s.record_vote(id, &v.validator, v.choice).unwrap();
            }
        }
        let est = confusion(s.rows(), 50, 0).unwrap();
        assert_eq!((est.rates.tpr, est.rates.fpr), (1.0, 0.0));
    }

    #[test]
    fn half_accuracy_gives_half_tpr() {
        let mut s = rows(20_000, 1);
        let all: Vec<&ValidationRow> = s.rows().collect();
        let votes = simulate_validators(&all, VoteAccuracy { positive: 0.5, negative: 0.5 }, 3, 7).unwrap();
        for (id, vs) in votes {
            for v in vs {
                s.record_vote(id, &v.validator, v.choice).unwrap();
            }
        }
        let c = super::super::confusion_counts(s.rows()).unwrap();
        let tpr = c.tp as f64 / c.positives() as f64;
        assert!((tpr - 0.5).abs() < 0.015, "{tpr}");
    }

    #[test]
    fn small_run_identity_holds_exactly() {
        let run = simulate_table4_run(2000, 0.3, 0.8, 0.05, 11).unwrap();
        assert!((run.output_precision - run.predicted_output_precision).abs() < 1e-12);
        assert!((run.input_precision - 0.3).abs() < 1e-12);
    }
}
