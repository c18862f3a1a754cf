//! Offers, products, corpora and the text/numerical preprocessing applied to
//! every offer before it reaches the encoder.
//!
//! A matching pair is defined purely through product ids: two offers match
//! iff they carry the same [`ProductId`] and live in different domains.

mod ingest;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use caseless::default_case_fold_str;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub use ingest::{
    ingest_offers, read_sidecar, write_offers_jsonl, write_sidecar, EmbeddingSidecar, OfferFormat,
    SIDECAR_MAGIC, SIDECAR_VERSION,
};

pub const UNKNOWN_CATEGORY: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DomainId(String);

impl DomainId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::domain("domain", "domain id must be non-empty"));
        }
        Ok(DomainId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for DomainId {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        DomainId::new(value)
    }
}

impl From<DomainId> for String {
    fn from(value: DomainId) -> Self {
        value.0
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ground-truth product label. Offers sharing a product id are the same product.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProductId(pub String);

impl fmt::Display for ProductId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offer {
    pub offer_id: String,
    pub domain: DomainId,
    pub brand_raw: String,
    pub title_raw: String,
    /// `normalize_text(brand_raw, title_raw)`.
    pub text_feature: String,
    pub price: f64,
    pub n_sizes: u32,
    pub image_embeddings: Vec<Vec<f64>>,
    pub text_embedding: Vec<f64>,
    pub product_id: Option<ProductId>,
    pub category: String,
}

impl Offer {
    /// Builds an offer and derives its text feature. Invariants are checked by
    /// [`Offer::validate`], which [`Corpus::new`] calls for every member.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        offer_id: impl Into<String>,
        domain: DomainId,
        brand_raw: impl Into<String>,
        title_raw: impl Into<String>,
        price: f64,
        n_sizes: u32,
        image_embeddings: Vec<Vec<f64>>,
        text_embedding: Vec<f64>,
    ) -> Self {
        let brand_raw = brand_raw.into();
        let title_raw = title_raw.into();
        let text_feature = normalize_text(&brand_raw, &title_raw);
        Offer {
            offer_id: offer_id.into(),
            domain,
            brand_raw,
            title_raw,
            text_feature,
            price,
            n_sizes,
            image_embeddings,
            text_embedding,
            product_id: None,
            category: UNKNOWN_CATEGORY.to_string(),
        }
    }

    pub fn with_product(mut self, product_id: impl Into<String>) -> Self {
        self.product_id = Some(ProductId(product_id.into()));
        self
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = category.into();
        self
    }

    /// Normalized brand used as the blocking key.
    pub fn brand_key(&self) -> String {
        normalize_segment(&self.brand_raw)
    }

    pub fn image_dim(&self) -> usize {
        self.image_embeddings.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| e.for_offer(&self.offer_id);
        if self.offer_id.is_empty() {
            return Err(Error::domain("offer_id", "offer id must be non-empty"));
        }
        let first = self
            .image_embeddings
            .first()
            .ok_or_else(|| Error::EmptyImages(self.offer_id.clone()))?;
        for (i, v) in self.image_embeddings.iter().enumerate().skip(1) {
            if v.len() != first.len() {
                return Err(wrap(Error::dimension(
                    format!("image embedding {i}"),
                    first.len(),
                    v.len(),
                )));
            }
        }
        if !(self.price > 0.0 && self.price.is_finite()) {
            return Err(wrap(Error::domain(
                "price",
                format!("must be positive, got {}", self.price),
            )));
        }
        if self.n_sizes == 0 {
            return Err(wrap(Error::domain("n_sizes", "must be at least 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusRole {
    Train,
    Validation,
    TestInDomain,
    TestOutDomain,
}

impl CorpusRole {
    pub fn is_test(self) -> bool {
        matches!(self, CorpusRole::TestInDomain | CorpusRole::TestOutDomain)
    }
}

/// An immutable, validated collection of offers.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    offers: Vec<Offer>,
    role: CorpusRole,
    index_domain: Option<DomainId>,
    query_domain: Option<DomainId>,
}

impl Corpus {
    /// Validates every offer, per-domain offer id uniqueness, and the absence
    /// of within-domain matches.
    pub fn new(offers: Vec<Offer>, role: CorpusRole) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut product_domains = HashSet::new();
        for offer in &offers {
            offer.validate()?;
            if !seen.insert((offer.domain.as_str(), offer.offer_id.as_str())) {
                return Err(Error::DuplicateOffer {
                    domain: offer.domain.to_string(),
                    offer_id: offer.offer_id.clone(),
                });
            }
            if let Some(pid) = &offer.product_id {
                if !product_domains.insert((offer.domain.as_str(), pid.0.as_str())) {
                    return Err(Error::domain(
                        "product_id",
                        format!(
                            "product {pid} appears twice in domain {}; within-domain matches are not allowed",
                            offer.domain
                        ),
                    ));
                }
            }
        }
        Ok(Corpus {
            offers,
            role,
            index_domain: None,
            query_domain: None,
        })
    }

    pub fn empty(role: CorpusRole) -> Self {
        Corpus {
            offers: Vec::new(),
            role,
            index_domain: None,
            query_domain: None,
        }
    }

    /// Designates the index and query domain of a test corpus.
    pub fn with_test_domains(mut self, index: DomainId, query: DomainId) -> Result<Self> {
        if !self.role.is_test() {
            return Err(Error::Config(format!(
                "only test corpora carry index/query domains, role is {:?}",
                self.role
            )));
        }
        if index == query {
            return Err(Error::Config(format!(
                "index and query domain must differ, both are {index}"
            )));
        }
        self.index_domain = Some(index);
        self.query_domain = Some(query);
        Ok(self)
    }

    pub fn with_role(mut self, role: CorpusRole) -> Self {
        self.role = role;
        if !role.is_test() {
            self.index_domain = None;
            self.query_domain = None;
        }
        self
    }

    pub fn offers(&self) -> &[Offer] {
        &self.offers
    }

    pub fn len(&self) -> usize {
        self.offers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offers.is_empty()
    }

    pub fn role(&self) -> CorpusRole {
        self.role
    }

    pub fn index_domain(&self) -> Option<&DomainId> {
        self.index_domain.as_ref()
    }

    pub fn query_domain(&self) -> Option<&DomainId> {
        self.query_domain.as_ref()
    }

    pub fn into_offers(self) -> Vec<Offer> {
        self.offers
    }

    pub fn domains(&self) -> BTreeSet<&DomainId> {
        self.offers.iter().map(|o| &o.domain).collect()
    }

    /// Offers of one domain, as a new corpus with the same role.
    pub fn restrict_to_domain(&self, domain: &DomainId) -> Corpus {
        Corpus {
            offers: self
                .offers
                .iter()
                .filter(|o| &o.domain == domain)
                .cloned()
                .collect(),
            role: self.role,
            index_domain: None,
            query_domain: None,
        }
    }

    /// Keeps the offers at the given positions, preserving corpus order.
    pub fn subset(&self, keep: impl IntoIterator<Item = usize>) -> Corpus {
        let keep: BTreeSet<usize> = keep.into_iter().collect();
        Corpus {
            offers: keep.into_iter().map(|i| self.offers[i].clone()).collect(),
            role: self.role,
            index_domain: self.index_domain.clone(),
            query_domain: self.query_domain.clone(),
        }
    }

    /// Offer positions grouped by product id. Unlabeled offers are omitted.
    pub fn product_groups(&self) -> BTreeMap<&ProductId, Vec<usize>> {
        let mut groups: BTreeMap<&ProductId, Vec<usize>> = BTreeMap::new();
        for (i, offer) in self.offers.iter().enumerate() {
            if let Some(pid) = &offer.product_id {
                groups.entry(pid).or_default().push(i);
            }
        }
        groups
    }

    /// Matching pairs as offer positions `(i, j)` with `i < j`.
    pub fn matching_pairs(&self) -> BTreeSet<(usize, usize)> {
        let mut pairs = BTreeSet::new();
        for members in self.product_groups().values() {
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    if self.offers[i].domain != self.offers[j].domain {
                        pairs.insert((i.min(j), i.max(j)));
                    }
                }
            }
        }
        pairs
    }

    /// Positions of offers that belong to no matching pair.
    pub fn lone_positions(&self) -> BTreeSet<usize> {
        let mut paired = vec![false; self.offers.len()];
        for (i, j) in self.matching_pairs() {
            paired[i] = true;
            paired[j] = true;
        }
        paired
            .iter()
            .enumerate()
            .filter(|(_, &p)| !p)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn position_of(&self) -> HashMap<(&str, &str), usize> {
        self.offers
            .iter()
            .enumerate()
            .map(|(i, o)| ((o.domain.as_str(), o.offer_id.as_str()), i))
            .collect()
    }
}

/// Matching pairs as unordered offer-id pairs, each stored lexicographically ordered.
pub fn matching_pairs(corpus: &Corpus) -> BTreeSet<(String, String)> {
    corpus
        .matching_pairs()
        .into_iter()
        .map(|(i, j)| {
            let a = corpus.offers[i].offer_id.clone();
            let b = corpus.offers[j].offer_id.clone();
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect()
}

/// Offer ids that appear in no matching pair.
pub fn lone_offers(corpus: &Corpus) -> BTreeSet<String> {
    corpus
        .lone_positions()
        .into_iter()
        .map(|i| corpus.offers[i].offer_id.clone())
        .collect()
}

fn nfkc_casefold(s: &str) -> String {
    // Compatibility caseless form: NFKC(fold(NFKD(fold(NFD(s))))).
    let first = default_case_fold_str(&s.nfd().collect::<String>());
    let second = default_case_fold_str(&first.nfkd().collect::<String>());
    second.nfkc().collect()
}

/// NFKC + case fold + whitespace collapse of a single text segment.
pub fn normalize_segment(s: &str) -> String {
    let folded = nfkc_casefold(s);
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Joins the normalized brand and title into the offer's text feature, brand first.
pub fn normalize_text(brand_raw: &str, title_raw: &str) -> String {
    let brand = normalize_segment(brand_raw);
    let title = normalize_segment(title_raw);
    match (brand.is_empty(), title.is_empty()) {
        (true, _) => title,
        (false, true) => brand,
        (false, false) => format!("{brand} {title}"),
    }
}

/// `[n_sizes, ln(n_sizes), ln(price)]`.
pub fn numerical_features(price: f64, n_sizes: u32) -> Result<[f64; 3]> {
    if !(price > 0.0 && price.is_finite()) {
        return Err(Error::domain(
            "price",
            format!("must be positive, got {price}"),
        ));
    }
    if n_sizes == 0 {
        return Err(Error::domain("n_sizes", "must be at least 1"));
    }
    let n = f64::from(n_sizes);
    Ok([n, n.ln(), price.ln()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dom(s: &str) -> DomainId {
        DomainId::new(s).unwrap()
    }

    fn offer(id: &str, domain: &str, product: Option<&str>) -> Offer {
        let o = Offer::new(
            id,
            dom(domain),
            "Vila",
            "Dress",
            10.0,
            2,
            vec![vec![1.0, 0.0]],
            vec![0.0, 1.0],
        );
        match product {
            Some(p) => o.with_product(p),
            None => o,
        }
    }

    #[test]
    fn normalize_text_examples() {
        assert_eq!(
            normalize_text("Vila", "LONG-SLEEVED Wrap Dress"),
            "vila long-sleeved wrap dress"
        );
        assert_eq!(normalize_text("", ""), "");
        // Oracle: Python `unicodedata.normalize("NFKC", s).casefold()`.
        assert_eq!(normalize_text("ＡＤＩＤＡＳ", "Ｔee"), "adidas tee");
        assert_eq!(normalize_text("  ADIDAS\tORIGINALS ", " Tee\n"), "adidas originals tee");
        assert_eq!(normalize_text("Weiß", ""), "weiss");
    }

    #[test]
    fn numerical_feature_examples() {
        let v = numerical_features(46.9, 6).unwrap();
        assert_eq!(v[0], 6.0);
        assert!((v[1] - 1.791_759).abs() < 1e-6);
        assert!((v[2] - 3.848_018).abs() < 1e-6);
        assert_eq!(numerical_features(1.0, 1).unwrap(), [1.0, 0.0, 0.0]);
        let e = numerical_features(std::f64::consts::E, 1).unwrap();
        assert_eq!(e[..2], [1.0, 0.0]);
        assert!((e[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn numerical_feature_errors_name_field() {
        match numerical_features(0.0, 3) {
            Err(Error::Domain { field, .. }) => assert_eq!(field, "price"),
            other => panic!("unexpected {other:?}"),
        }
        match numerical_features(3.0, 0) {
            Err(Error::Domain { field, .. }) => assert_eq!(field, "n_sizes"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(numerical_features(-1.0, 1).is_err());
    }

    #[test]
    fn empty_domain_rejected() {
        assert!(DomainId::new("").is_err());
    }

    #[test]
    fn pairs_two_offers_same_product() {
        let c = Corpus::new(
            vec![offer("a", "d1", Some("p1")), offer("b", "d2", Some("p1"))],
            CorpusRole::Train,
        )
        .unwrap();
        assert_eq!(
            matching_pairs(&c),
            [("a".to_string(), "b".to_string())].into_iter().collect()
        );
        assert!(lone_offers(&c).is_empty());
    }

    #[test]
    fn pairs_distinct_products_and_singletons() {
        let c = Corpus::new(
            vec![
                offer("a", "d1", Some("p1")),
                offer("b", "d2", Some("p2")),
                offer("c", "d2", None),
            ],
            CorpusRole::Train,
        )
        .unwrap();
        assert!(matching_pairs(&c).is_empty());
        assert_eq!(lone_offers(&c).len(), 3);
    }

    #[test]
    fn within_domain_match_rejected() {
        let err = Corpus::new(
            vec![offer("a", "d1", Some("p1")), offer("b", "d1", Some("p1"))],
            CorpusRole::Train,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Domain { field: "product_id", .. }));
    }

    #[test]
    fn duplicate_offer_rejected() {
        let err = Corpus::new(
            vec![offer("a", "d1", None), offer("a", "d1", None)],
            CorpusRole::Train,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateOffer { .. }));
        // Same id in another domain is fine.
        Corpus::new(
            vec![offer("a", "d1", None), offer("a", "d2", None)],
            CorpusRole::Train,
        )
        .unwrap();
    }

    #[test]
    fn image_dimension_mismatch_rejected() {
        let mut o = offer("a", "d1", None);
        o.image_embeddings = vec![vec![0.0; 8], vec![0.0; 16]];
        let err = Corpus::new(vec![o], CorpusRole::Train).unwrap_err();
        assert!(err.to_string().contains("expected 8, got 16"), "{err}");
    }

    #[test]
    fn test_domains_must_differ() {
        let c = Corpus::empty(CorpusRole::TestInDomain);
        assert!(c.clone().with_test_domains(dom("a"), dom("a")).is_err());
        assert!(c.with_test_domains(dom("a"), dom("b")).is_ok());
        assert!(Corpus::empty(CorpusRole::Train)
            .with_test_domains(dom("a"), dom("b"))
            .is_err());
    }

    fn random_corpus() -> impl Strategy<Value = Corpus> {
        // Up to 50 offers over 4 domains and 12 products; the product of an
        // offer is dropped when it would repeat within a domain.
        proptest::collection::vec((0u8..4, proptest::option::of(0u8..12)), 0..50).prop_map(
            |spec| {
                let mut used = HashSet::new();
                let offers = spec
                    .into_iter()
                    .enumerate()
                    .map(|(i, (d, p))| {
                        let domain = format!("d{d}");
                        let product = p
                            .filter(|p| used.insert((d, *p)))
                            .map(|p| format!("p{p}"));
                        offer(&format!("o{i}"), &domain, product.as_deref())
                    })
                    .collect();
                Corpus::new(offers, CorpusRole::Train).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn pairs_match_brute_force(corpus in random_corpus()) {
            let offers = corpus.offers();
            let mut expected = BTreeSet::new();
            for i in 0..offers.len() {
                for j in 0..offers.len() {
                    let (a, b) = (&offers[i], &offers[j]);
                    if i != j && a.domain != b.domain && a.product_id.is_some() && a.product_id == b.product_id {
                        let (x, y) = (a.offer_id.clone(), b.offer_id.clone());
                        expected.insert(if x <= y { (x, y) } else { (y, x) });
                    }
                }
            }
            let pairs = matching_pairs(&corpus);
            prop_assert_eq!(&pairs, &expected);

            let in_pairs: BTreeSet<String> = pairs.iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
            let lone = lone_offers(&corpus);
            let brute_lone: BTreeSet<String> = offers
                .iter()
                .filter(|o| !in_pairs.contains(&o.offer_id))
                .map(|o| o.offer_id.clone())
                .collect();
            prop_assert_eq!(&lone, &brute_lone);
            prop_assert_eq!(lone.len() + in_pairs.len(), offers.len());
            prop_assert!(pairs.iter().all(|(a, b)| a != b));
        }

        #[test]
        fn normalize_text_idempotent(brand in "\\PC{0,12}", title in "\\PC{0,24}") {
            let once = normalize_text(&brand, &title);
            let (b, t) = once.split_once(' ').unwrap_or((once.as_str(), ""));
            prop_assert_eq!(normalize_text(b, t), once.clone());
        }
    }
}
