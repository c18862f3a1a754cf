//! Supervised contrastive training of the projection head over precomputed
//! fused inputs.

mod batch;
mod loss;

use std::io::Write;
use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Corpus;
use crate::encoder::{
    embed_corpus, fuse_corpus, FeatureStats, HeadGradient, ModalityMask, ProjectionHead,
    DEFAULT_OUTPUT_DIM,
};
use crate::error::{Error, Result};
use crate::eval::cross_domain_eval;
use crate::retrieval::MatchParams;

pub use batch::{filter_lone_negatives, sample_batches, Batch};
pub use loss::{supcon_gradient, supcon_loss, supcon_loss_grad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub lone_negative_share: f64,
    pub output_dim: usize,
    /// Adds a 256-wide ReLU layer in front of the output projection.
    pub hidden_layer: bool,
    pub modalities: ModalityMask,
    /// Share of product ids held out for validation by [`train`].
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.06,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 16384,
            weight_decay: 0.01,
            seed: 0,
            lone_negative_share: 0.0,
            output_dim: DEFAULT_OUTPUT_DIM,
            hidden_layer: false,
            modalities: ModalityMask::ALL,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(Error::domain(field, reason));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", format!("must be positive, got {}", self.temperature));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be non-negative, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size", format!("must be at least 2, got {}", self.batch_size));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.lone_negative_share) {
            return bad(
                "lone_negative_share",
                format!("must lie in [0, 1], got {}", self.lone_negative_share),
            );
        }
        if self.output_dim == 0 {
            return bad("output_dim", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(
                "validation_fraction",
                format!("must lie in [0, 1), got {}", self.validation_fraction),
            );
        }
        Ok(())
    }
}

/// Decoupled weight decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: HeadGradient,
    v: HeadGradient,
}

impl AdamW {
    pub fn new(head: &ProjectionHead, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: head.zero_gradient(),
            v: head.zero_gradient(),
        }
    }

    pub fn step(&mut self, head: &mut ProjectionHead, grad: &HeadGradient) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (lr, wd, b1, b2, eps) = (self.lr, self.weight_decay, self.beta1, self.beta2, self.eps);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *p -= lr * wd * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((layer, g), m), v) in head
            .layers
            .iter_mut()
            .zip(&grad.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            ndarray::Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-anchor loss over the epoch.
    pub loss: f64,
    pub recall_at_1: Option<f64>,
    pub recall_at_3: Option<f64>,
    #[serde(default)]
    pub aucpr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: ProjectionHead,
    pub history: Vec<EpochRecord>,
    /// Offers actually trained on after lone-negative filtering.
    pub train_offers: usize,
}

/// Holds out the offers of `round(fraction * products)` seeded-random product
/// ids. Lone offers stay in the training part.
pub fn validation_split(corpus: &Corpus, fraction: f64, seed: u64) -> (Corpus, Corpus) {
    let mut products: Vec<Vec<usize>> = corpus
        .product_groups()
        .into_values()
        .filter(|g| g.len() >= 2)
        .collect();
    let take = (fraction * products.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    products.shuffle(&mut rng);
    let mut held = vec![false; corpus.len()];
    for g in &products[..take] {
        for &i in g {
            held[i] = true;
        }
    }
    let train = corpus.subset((0..corpus.len()).filter(|&i| !held[i]));
    let validation = corpus.subset((0..corpus.len()).filter(|&i| held[i]));
    (train, validation)
}

/// Splits off a validation part per `config.validation_fraction` and trains.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (tr, val) = validation_split(corpus, config.validation_fraction, config.seed);
    let val = (!val.is_empty()).then_some(val);
    train_with_validation(&tr, val.as_ref(), config)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Training loop. Fused inputs are computed once; each epoch draws fresh
/// batches and, when a validation corpus is given, records cross-domain R@1,
/// R@3 and AUCPR on it.
pub fn train_with_validation(
    corpus: &Corpus,
    validation: Option<&Corpus>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let corpus = filter_lone_negatives(corpus, config.lone_negative_share, config.seed)?;
    if corpus.matching_pairs().is_empty() {
        return Err(Error::NoPositivePairs);
    }
    let first = &corpus.offers()[0];
    let (d_img, d_txt) = (first.image_dim(), first.text_embedding.len());
    let stats = FeatureStats::fit(&corpus)?;
    let build = if config.hidden_layer {
        ProjectionHead::new_hidden
    } else {
        ProjectionHead::new_linear
    };
    let mut head = build(d_img, d_txt, config.modalities, config.output_dim, stats, config.seed)?;
    let x = fuse_corpus(&corpus, &head)?;
    let mut opt = AdamW::new(&head, config.learning_rate, config.weight_decay);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let batches = sample_batches(&corpus, config.batch_size, epoch_seed(config.seed, epoch))?;
        let (mut total, mut anchors) = (0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let xb = x.select(Axis(0), &batch.members);
            let (loss, grad) = supcon_gradient(&head, xb.view(), &batch.labels, config.temperature)?;
            if !loss.is_finite() || grad.flatten().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss} over {} members", batch.len()),
                });
            }
            opt.step(&mut head, &grad);
            total += loss;
            anchors += batch.anchor_count();
        }
        let mut record = EpochRecord {
            epoch,
            loss: total / anchors.max(1) as f64,
            recall_at_1: None,
            recall_at_3: None,
            aucpr: None,
        };
        if let Some(val) = validation {
            match validation_report(val, &head) {
                Ok(r) => {
                    record.recall_at_1 = r.recall_at_k.get(&1).copied();
                    record.recall_at_3 = r.recall_at_k.get(&3).copied();
                    record.aucpr = Some(r.aucpr);
                }
                Err(Error::UndefinedMetric(_)) => {}
                Err(e) => return Err(e),
            }
        }
        tracing::debug!(epoch, loss = record.loss, r1 = ?record.recall_at_1, "epoch done");
        history.push(record);
    }
    Ok(TrainOutcome {
        head,
        history,
        train_offers: corpus.len(),
    })
}

/// Cross-domain retrieval metrics of `head` on a held-out corpus.
pub fn validation_report(corpus: &Corpus, head: &ProjectionHead) -> Result<crate::eval::EvalReport> {
    let emb = embed_corpus(corpus, head)?;
    cross_domain_eval(corpus, &emb, &MatchParams::default(), &[1, 3])
}

/// `epoch,loss,r_at_1,r_at_3`, empty cells where validation was unavailable.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,loss,r_at_1,r_at_3")?;
    let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in history {
        writeln!(
            w,
            "{},{},{},{}",
            r.epoch,
            r.loss,
            cell(r.recall_at_1),
            cell(r.recall_at_3)
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CorpusRole, DomainId, Offer};
    use rand::RngExt;

    /// Two domains, `n` products each offered in both; offers are noisy copies
    /// of a per-product latent vector.
    pub(crate) fn toy_corpus(n: usize, noise: f64, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offers = Vec::new();
        for p in 0..n {
            let latent: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let text: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            for d in ["a", "b"] {
                let jitter = |v: &Vec<f64>, rng: &mut ChaCha8Rng| -> Vec<f64> {
                    v.iter().map(|x| x + noise * rng.random_range(-1.0..1.0)).collect()
                };
                let img = jitter(&latent, &mut rng);
                let txt = jitter(&text, &mut rng);
                offers.push(
                    Offer::new(format!("{d}{p}"), DomainId::new(d).unwrap(), "brand", "t", 10.0 + p as f64, 1, vec![img], txt)
                        .with_product(format!("p{p}")),
                );
            }
        }
        Corpus::new(offers, CorpusRole::Train).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            output_dim: 8,
            temperature: 0.1,
            learning_rate: 1e-2,
            validation_fraction: 0.2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases() {
        let c = toy_corpus(60, 0.3, 1);
        let out = train(&c, &small_config()).unwrap();
        let h = &out.history;
        assert_eq!(h.len(), 20);
        assert!(h.last().unwrap().loss < h[0].loss, "{h:?}");
        assert!(h[0].recall_at_1.is_some());
    }

    #[test]
    fn same_seed_same_history() {
        let c = toy_corpus(40, 0.3, 2);
        let cfg = TrainConfig { epochs: 3, ..small_config() };
        let a = train(&c, &cfg).unwrap();
        let b = train(&c, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.head, b.head);
    }

    #[test]
    fn zero_learning_rate_leaves_head_untouched() {
        let c = toy_corpus(20, 0.3, 3);
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            validation_fraction: 0.0,
            ..small_config()
        };
        let out = train(&c, &cfg).unwrap();
        let stats = FeatureStats::fit(&c).unwrap();
        let init = ProjectionHead::new_linear(6, 4, ModalityMask::ALL, 8, stats, cfg.seed).unwrap();
        assert_eq!(out.head, init);
        let cfg = TrainConfig { weight_decay: 0.0, ..cfg };
        assert_eq!(train(&c, &cfg).unwrap().head, init);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) up to eps.
        let mut head = ProjectionHead::identity(2, 0, ModalityMask::IMAGE_ONLY);
        let before = head.clone();
        let mut grad = head.zero_gradient();
        grad.layers[0].weight[[0, 1]] = 3.0;
        grad.layers[0].bias[1] = -0.5;
        let mut opt = AdamW::new(&head, 0.01, 0.0);
        opt.step(&mut head, &grad);
        assert!((head.layers[0].weight[[0, 1]] - (before.layers[0].weight[[0, 1]] - 0.01)).abs() < 1e-9);
        assert!((head.layers[0].bias[1] - 0.01).abs() < 1e-9);
        assert_eq!(head.layers[0].weight[[0, 0]], 1.0);

        // Decoupled decay shrinks parameters with zero gradient.
        let mut head = before.clone();
        let mut opt = AdamW::new(&head, 0.1, 0.5);
        let zero = head.zero_gradient();
        opt.step(&mut head, &zero);
        assert!((head.layers[0].weight[[0, 0]] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { temperature: 0.0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { lone_negative_share: 1.5, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Domain { .. })), "{bad:?}");
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"batch_size": 64, "seed": 9}"#).unwrap();
        assert_eq!(parsed.batch_size, 64);
        assert_eq!(parsed.temperature, 0.06);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"batchsize": 64}"#).is_err());
    }

    #[test]
    fn no_pairs_is_an_error() {
        let c = toy_corpus(5, 0.1, 4).restrict_to_domain(&DomainId::new("a").unwrap());
        let cfg = TrainConfig { validation_fraction: 0.0, ..small_config() };
        assert!(matches!(train(&c, &cfg), Err(Error::NoPositivePairs)));
    }

    #[test]
    fn validation_split_is_by_product() {
        let c = toy_corpus(50, 0.1, 5);
        let (tr, val) = validation_split(&c, 0.1, 0);
        assert_eq!(val.len(), 10);
        assert_eq!(tr.len() + val.len(), c.len());
        let tp: std::collections::BTreeSet<_> = tr.offers().iter().map(|o| o.product_id.clone()).collect();
        assert!(val.offers().iter().all(|o| !tp.contains(&o.product_id)));
    }

    #[test]
    fn history_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let h = [
            EpochRecord { epoch: 1, loss: 2.5, recall_at_1: Some(0.5), recall_at_3: Some(0.75), aucpr: None },
            EpochRecord { epoch: 2, loss: 2.0, recall_at_1: None, recall_at_3: None, aucpr: None },
        ];
        write_history_csv(&p, &h).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "epoch,loss,r_at_1,r_at_3\n1,2.5,0.5,0.75\n2,2,,\n"
        );
    }
}
