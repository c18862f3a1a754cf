use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::Corpus;
use crate::error::{Error, Result};

/// Corpus positions of the members of one mini-batch, with the product label
/// of each. Members sharing a label are each other's positives; `None` marks a
/// lone offer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub members: Vec<usize>,
    pub labels: Vec<Option<u32>>,
}

impl Batch {
    /// In-batch positives of member `i`.
    pub fn positives(&self, i: usize) -> Vec<usize> {
        match self.labels[i] {
            None => Vec::new(),
            Some(l) => (0..self.members.len())
                .filter(|&j| j != i && self.labels[j] == Some(l))
                .collect(),
        }
    }

    pub fn anchor_count(&self) -> usize {
        (0..self.members.len())
            .filter(|&i| !self.positives(i).is_empty())
            .count()
    }

    pub fn has_positive_pair(&self) -> bool {
        self.labels.iter().enumerate().any(|(i, l)| {
            l.is_some() && self.labels[i + 1..].contains(l)
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Keeps every offer of a product group and a seeded uniform subsample of
/// `round(share * lone_count)` lone offers. Input order is preserved.
pub fn filter_lone_negatives(corpus: &Corpus, share: f64, seed: u64) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&share) {
        return Err(Error::domain(
            "lone_negative_share",
            format!("must lie in [0, 1], got {share}"),
        ));
    }
    let mut lone: Vec<usize> = corpus.lone_positions().into_iter().collect();
    let take = (share * lone.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lone.shuffle(&mut rng);
    let dropped: std::collections::BTreeSet<usize> = lone[take..].iter().copied().collect();
    Ok(corpus.subset((0..corpus.len()).filter(|i| !dropped.contains(i))))
}

/// Product groups with at least two offers, then every remaining offer as a
/// singleton. Deterministic order.
fn groups(corpus: &Corpus) -> Vec<(Option<u32>, Vec<usize>)> {
    let mut out = Vec::new();
    let mut grouped = vec![false; corpus.len()];
    let mut label = 0u32;
    for members in corpus.product_groups().into_values() {
        if members.len() >= 2 {
            for &m in &members {
                grouped[m] = true;
            }
            out.push((Some(label), members));
            label += 1;
        }
    }
    for (i, g) in grouped.iter().enumerate() {
        if !g {
            out.push((None, vec![i]));
        }
    }
    out
}

/// One epoch of batches: a seeded permutation of product groups packed in order,
/// starting a new batch whenever the next group does not fit. Batches without
/// a positive pair are dropped, so grouped offers appear exactly once and lone
/// offers at most once.
pub fn sample_batches(corpus: &Corpus, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be at least 2, got {batch_size}"
        )));
    }
    let mut groups = groups(corpus);
    if let Some((_, g)) = groups.iter().find(|(_, g)| g.len() > batch_size) {
        return Err(Error::Config(format!(
            "product group of {} offers exceeds batch_size {batch_size}",
            g.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let mut batches = Vec::new();
    let mut cur = Batch {
        members: Vec::new(),
        labels: Vec::new(),
    };
    for (label, members) in groups {
        if cur.len() + members.len() > batch_size {
            batches.push(std::mem::replace(
                &mut cur,
                Batch {
                    members: Vec::new(),
                    labels: Vec::new(),
                },
            ));
        }
        cur.labels.extend(std::iter::repeat_n(label, members.len()));
        cur.members.extend(members);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.retain(Batch::has_positive_pair);
    Ok(batches)
}
