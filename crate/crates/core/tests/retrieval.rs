use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prodmatch::domain::DomainId;
use prodmatch::retrieval::{
    brand_block, cosine_distance, discriminate, knn, IndexEntry, MatchIndex,
};

const BRANDS: [&str; 8] = ["Acme", "ACME", "Acme Sport", "Acne", "Borealis", "Boreal", "Zenith", "Zen"];

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut v: Array2<f64> = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    for mut r in v.axis_iter_mut(Axis(0)) {
        let norm: f64 = r.dot(&r).sqrt();
        r /= norm;
    }
    v
}

fn random_index(seed: u64, n: usize, d: usize) -> MatchIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|i| IndexEntry {
            offer_id: format!("o{i:04}"),
            brand: prodmatch::domain::normalize_segment(BRANDS[rng.random_range(0..BRANDS.len())]),
            domain: DomainId::new("A").unwrap(),
            category: "c".into(),
        })
        .collect();
    MatchIndex::from_parts(entries, unit_rows(&mut rng, n, d)).unwrap()
}

fn query(seed: u64, d: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    unit_rows(&mut rng, 1, d).row(0).to_owned()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn raising_the_brand_threshold_only_shrinks_the_block(
        seed in any::<u64>(),
        brand in 0usize..BRANDS.len(),
        lo in 0.0f64..1.0,
        hi in 0.0f64..1.0,
    ) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let index = random_index(seed, 60, 4);
        let wide: BTreeSet<usize> = brand_block(BRANDS[brand], &index, lo).into_iter().collect();
        let narrow: BTreeSet<usize> = brand_block(BRANDS[brand], &index, hi).into_iter().collect();
        prop_assert!(narrow.is_subset(&wide));
    }

    #[test]
    fn zero_threshold_blocks_nothing(seed in any::<u64>(), brand in 0usize..BRANDS.len()) {
        let index = random_index(seed, 40, 3);
        prop_assert_eq!(brand_block(BRANDS[brand], &index, 0.0), index.all_positions());
    }

    #[test]
    fn knn_returns_the_k_closest_in_order(seed in any::<u64>(), k in 1usize..12, t in 0.0f64..1.0) {
        let index = random_index(seed, 50, 5);
        let q = query(seed, 5);
        let block = brand_block("Acme", &index, t);
        let got = knn(q.view(), &index, &block, k);
        prop_assert_eq!(got.len(), k.min(block.len()));
        prop_assert!(got.windows(2).all(|w| w[0].distance <= w[1].distance));
        let chosen: BTreeSet<&str> = got.iter().map(|c| c.index_offer_id.as_str()).collect();
        if let Some(kth) = got.last() {
            for &p in &block {
                let e = &index.entries()[p];
                if !chosen.contains(e.offer_id.as_str()) {
                    prop_assert!(cosine_distance(q.view(), index.vector(p)) >= kth.distance);
                }
            }
        }
        for c in &got {
            prop_assert!((c.similarity - (1.0 - c.distance)).abs() < 1e-15);
        }
    }

    #[test]
    fn blocking_never_finds_a_closer_top1(seed in any::<u64>(), t in 0.0f64..1.0) {
        let index = random_index(seed, 50, 5);
        let q = query(seed, 5);
        let all = knn(q.view(), &index, &index.all_positions(), 1);
        let blocked = knn(q.view(), &index, &brand_block("Borealis", &index, t), 1);
        if let Some(b) = blocked.first() {
            prop_assert!(b.distance >= all[0].distance);
        }
    }

    #[test]
    fn cosine_distance_is_symmetric_and_bounded(seed in any::<u64>(), d in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = unit_rows(&mut rng, 2, d);
        let ab = cosine_distance(v.row(0), v.row(1));
        prop_assert_eq!(ab, cosine_distance(v.row(1), v.row(0)));
        prop_assert!((0.0..=2.0).contains(&ab));
        prop_assert!(cosine_distance(v.row(0), v.row(0)) < 1e-12);
    }

    #[test]
    fn discriminator_accepts_exactly_within_threshold(seed in any::<u64>(), t in 0.0f64..2.0) {
        let index = random_index(seed, 30, 3);
        let q = query(seed, 3);
        let got = discriminate(knn(q.view(), &index, &index.all_positions(), 5), t);
        for c in got {
            prop_assert_eq!(c.accepted, c.distance <= t);
        }
    }
}
