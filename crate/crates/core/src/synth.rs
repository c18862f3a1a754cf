//! Seeded synthetic corpora with cross-domain product offers.
//!
//! Every product has a latent direction in the image space and another in the
//! text space. An offer's embeddings are that latent plus a per-domain offset,
//! an offer-level "style" component confined to a low-dimensional nuisance
//! subspace (photo setting, seller title template), and isotropic noise per
//! image. The last domain is held out for out-of-domain queries: its offset is
//! never seen in training and part of its style subspace is new.
//!
//! Products are generated in "date" order; those past `train_cutoff` form the
//! test splits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{write_offers_jsonl, Corpus, CorpusRole, DomainId, EmbeddingSidecar, Offer};
use crate::error::{Error, Result};

const CATEGORIES: [&str; 8] = [
    "dress", "sneaker", "jacket", "shirt", "jeans", "boot", "skirt", "sweater",
];
const COLORS: [&str; 8] = [
    "black", "white", "navy", "red", "olive", "beige", "grey", "pink",
];
const ADJECTIVES: [&str; 8] = [
    "classic", "slim", "relaxed", "cropped", "oversized", "essential", "vintage", "light",
];
const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ra", "ven", "to", "sel", "da", "ni", "bro", "an", "cor", "el", "vi", "sta",
    "mu",
];
const SUB_BRANDS: [&str; 4] = ["sport", "kids", "pro", "lab"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Products with offers in at least two domains.
    pub n_products: usize,
    /// At least 3: the last is the out-of-domain query domain.
    pub n_domains: usize,
    /// Probability that a product is offered in a given domain, redrawn until
    /// it is offered in at least two.
    pub domain_presence: f64,
    pub d_img: usize,
    pub d_txt: usize,
    /// Norm scale of the per-domain offset.
    pub domain_shift_scale: f64,
    /// Norm scale of per-image and per-title noise.
    pub noise_scale: f64,
    /// Dimension of the nuisance subspace.
    pub style_dims: usize,
    /// Norm scale of the per-offer nuisance component.
    pub style_scale: f64,
    /// Share of the out-of-domain style subspace not seen in training.
    pub out_domain_style_shift: f64,
    /// Weight of the shared brand direction in product latents.
    pub brand_weight: f64,
    pub n_brands: usize,
    /// Lone offers as a share of all offers.
    pub lone_negative_fraction: f64,
    pub images_mean: f64,
    pub images_sd: f64,
    pub price_log_mean: f64,
    pub price_log_sd: f64,
    /// Log-scale sd of offer prices around the product price.
    pub price_noise: f64,
    /// Share of products (by generation order) before the split date.
    pub train_cutoff: f64,
    /// Share of pre-cutoff products (and of lone offers) held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_products: 1000,
            n_domains: 3,
            domain_presence: 0.75,
            d_img: 64,
            d_txt: 48,
            domain_shift_scale: 1.0,
            noise_scale: 1.5,
            style_dims: 8,
            style_scale: 2.5,
            out_domain_style_shift: 0.5,
            brand_weight: 0.8,
            n_brands: 40,
            lone_negative_fraction: 0.3,
            images_mean: 4.5,
            images_sd: 2.0,
            price_log_mean: 3.5,
            price_log_sd: 0.8,
            price_noise: 0.05,
            train_cutoff: 0.8,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(Error::domain(field, reason));
        if self.n_products == 0 {
            return bad("n_products", "must be at least 1".into());
        }
        if self.n_domains < 3 {
            return bad("n_domains", format!("need at least 3, got {}", self.n_domains));
        }
        if self.d_img == 0 || self.d_txt == 0 {
            return bad("dims", format!("d_img {} / d_txt {} must be positive", self.d_img, self.d_txt));
        }
        if self.style_dims > self.d_img.min(self.d_txt) {
            return bad(
                "style_dims",
                format!("{} exceeds the smaller embedding dimension {}", self.style_dims, self.d_img.min(self.d_txt)),
            );
        }
        for (field, v) in [
            ("domain_shift_scale", self.domain_shift_scale),
            ("noise_scale", self.noise_scale),
            ("style_scale", self.style_scale),
            ("brand_weight", self.brand_weight),
            ("images_sd", self.images_sd),
            ("price_log_sd", self.price_log_sd),
            ("price_noise", self.price_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, format!("must be non-negative, got {v}"));
            }
        }
        for (field, v) in [
            ("domain_presence", self.domain_presence),
            ("out_domain_style_shift", self.out_domain_style_shift),
            ("train_cutoff", self.train_cutoff),
            ("validation_fraction", self.validation_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(field, format!("must lie in [0, 1], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.lone_negative_fraction) {
            return bad(
                "lone_negative_fraction",
                format!("must lie in [0, 1), got {}", self.lone_negative_fraction),
            );
        }
        if self.domain_presence == 0.0 {
            return bad("domain_presence", "must be positive".into());
        }
        if self.images_mean < 1.0 {
            return bad("images_mean", format!("must be at least 1, got {}", self.images_mean));
        }
        if self.n_brands == 0 {
            return bad("n_brands", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn domain_names(&self) -> Vec<DomainId> {
        (0..self.n_domains)
            .map(|i| DomainId::new(domain_name(i)).expect("non-empty"))
            .collect()
    }
}

fn domain_name(i: usize) -> String {
    if i < 26 {
        char::from(b'A' + i as u8).to_string()
    } else {
        format!("D{i}")
    }
}

#[derive(Debug, Clone)]
pub struct SynthSplits {
    /// Every generated offer.
    pub all: Corpus,
    pub train: Corpus,
    /// Held-out products plus lone distractors from the training domains.
    pub validation: Corpus,
    /// Index offers shared by both test splits: the first domain after the cutoff.
    pub test_index: Corpus,
    /// Second domain after the cutoff.
    pub test_in_query: Corpus,
    /// Held-out last domain after the cutoff.
    pub test_out_query: Corpus,
}

fn mix(seed: u64, stream: u64, i: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Array1<f64> {
    // Expected norm about `scale`.
    let s = scale / (d as f64).sqrt();
    Array1::from_shape_fn(d, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * s
    })
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Orthonormal columns from Gram-Schmidt on Gaussian vectors.
fn orthonormal(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((d, k));
    let mut c = 0;
    while c < k {
        let mut v = gaussian(rng, d, 1.0);
        for j in 0..c {
            let col = q.column(j);
            let p = v.dot(&col);
            v.scaled_add(-p, &col);
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-8 {
            q.column_mut(c).assign(&(v / n));
            c += 1;
        }
    }
    q
}

/// Nuisance bases: the training domains share `base`; the out-of-domain
/// basis swaps its last `round(shift * k)` columns for new directions.
fn style_bases(rng: &mut ChaCha8Rng, d: usize, k: usize, shift: f64) -> (Array2<f64>, Array2<f64>) {
    let full = orthonormal(rng, d, (2 * k).min(d));
    let base = full.slice(ndarray::s![.., ..k]).to_owned();
    let swap = ((shift * k as f64).round() as usize).min(full.ncols() - k);
    let mut out = base.clone();
    for j in 0..swap {
        out.column_mut(k - 1 - j).assign(&full.column(k + j));
    }
    (base, out)
}

struct Space {
    offsets: Vec<Array1<f64>>,
    style_in: Array2<f64>,
    style_out: Array2<f64>,
    brand_dirs: Vec<Array1<f64>>,
}

impl Space {
    fn new(rng: &mut ChaCha8Rng, d: usize, cfg: &SynthConfig) -> Space {
        let offsets = (0..cfg.n_domains)
            .map(|_| gaussian(rng, d, cfg.domain_shift_scale))
            .collect();
        let (style_in, style_out) =
            style_bases(rng, d, cfg.style_dims, cfg.out_domain_style_shift);
        let brand_dirs = (0..cfg.n_brands).map(|_| unit(gaussian(rng, d, 1.0))).collect();
        Space {
            offsets,
            style_in,
            style_out,
            brand_dirs,
        }
    }

    fn latent(&self, rng: &mut ChaCha8Rng, brand: usize, w: f64) -> Array1<f64> {
        let d = self.brand_dirs[0].len();
        unit(&self.brand_dirs[brand] * w + &unit(gaussian(rng, d, 1.0)))
    }

    /// Latent plus domain offset plus this offer's nuisance; noise comes per view.
    fn offer_center(&self, rng: &mut ChaCha8Rng, latent: &Array1<f64>, domain: usize, cfg: &SynthConfig) -> Array1<f64> {
        let basis = if domain + 1 == cfg.n_domains {
            &self.style_out
        } else {
            &self.style_in
        };
        let coeffs = gaussian(rng, cfg.style_dims, cfg.style_scale);
        latent + &self.offsets[domain] + &basis.dot(&coeffs)
    }
}

/// Rounded through f32 so that sidecar round trips are exact.
fn view(rng: &mut ChaCha8Rng, center: &Array1<f64>, noise: f64) -> Vec<f64> {
    let v = unit(center + &gaussian(rng, center.len(), noise));
    v.iter().map(|&x| f64::from(x as f32)).collect()
}

fn brand_names(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(n);
    while names.len() < n {
        let syl = rng.random_range(2..=3);
        let name: String = (0..syl)
            .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
            .collect();
        if !names.contains(&name) {
            names.push(name);
        }
    }
    names
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

struct ProductSpec {
    brand: usize,
    sub_brand: Option<usize>,
    category: usize,
    color: usize,
    adjective: usize,
    price: f64,
    sizes: u32,
}

impl ProductSpec {
    fn draw(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<ProductSpec> {
        let price_dist = Normal::new(cfg.price_log_mean, cfg.price_log_sd)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(ProductSpec {
            brand: rng.random_range(0..cfg.n_brands),
            sub_brand: rng.random_bool(0.3).then(|| rng.random_range(0..SUB_BRANDS.len())),
            category: rng.random_range(0..CATEGORIES.len()),
            color: rng.random_range(0..COLORS.len()),
            adjective: rng.random_range(0..ADJECTIVES.len()),
            price: price_dist.sample(rng).exp(),
            sizes: rng.random_range(1..=8),
        })
    }

    /// Brand as a given shop writes it: full sub-brand, parent only, or upper case.
    fn brand_raw(&self, rng: &mut ChaCha8Rng, brands: &[String]) -> String {
        let parent = &brands[self.brand];
        let full = match self.sub_brand {
            Some(s) => format!("{parent} {}", SUB_BRANDS[s]),
            None => parent.clone(),
        };
        match rng.random_range(0..3) {
            0 => capitalize(&full),
            1 => full.to_uppercase(),
            _ => capitalize(parent),
        }
    }

    fn title(&self, rng: &mut ChaCha8Rng) -> String {
        let (a, c, k) = (
            ADJECTIVES[self.adjective],
            COLORS[self.color],
            CATEGORIES[self.category],
        );
        match rng.random_range(0..3) {
            0 => format!("{a} {c} {k}"),
            1 => format!("{k} {a} - {c}"),
            _ => format!("{}  {k} ({c})", capitalize(a)),
        }
    }
}

/// One offer of product `spec` in `domain`.
#[allow(clippy::too_many_arguments)]
fn make_offer(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    spaces: (&Space, &Space),
    latents: (&Array1<f64>, &Array1<f64>),
    spec: &ProductSpec,
    brands: &[String],
    domain: usize,
    offer_id: String,
    product_id: String,
) -> Result<Offer> {
    let (img_space, txt_space) = spaces;
    let img_center = img_space.offer_center(rng, latents.0, domain, cfg);
    let txt_center = txt_space.offer_center(rng, latents.1, domain, cfg);
    let n_images = {
        let d = Normal::new(cfg.images_mean, cfg.images_sd).map_err(|e| Error::Config(e.to_string()))?;
        (d.sample(rng).round() as i64).max(1) as usize
    };
    let images = (0..n_images)
        .map(|_| view(rng, &img_center, cfg.noise_scale))
        .collect();
    let text = view(rng, &txt_center, cfg.noise_scale);
    let price_noise = Normal::new(0.0, cfg.price_noise).map_err(|e| Error::Config(e.to_string()))?;
    let price = (spec.price * price_noise.sample(rng).exp() * 100.0).round() / 100.0;
    let sizes = if rng.random_bool(0.2) {
        (spec.sizes + 1).min(10)
    } else {
        spec.sizes
    };
    Ok(Offer::new(
        offer_id,
        DomainId::new(domain_name(domain))?,
        spec.brand_raw(rng, brands),
        spec.title(rng),
        price.max(0.01),
        sizes,
        images,
        text,
    )
    .with_product(product_id)
    .with_category(CATEGORIES[spec.category]))
}

/// Generates the corpus and its splits. Products and lone offers are drawn from
/// per-item seeds, so adding products does not perturb earlier ones.
pub fn generate(cfg: &SynthConfig) -> Result<SynthSplits> {
    cfg.validate()?;
    let mut global = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0, 0));
    let img_space = Space::new(&mut global, cfg.d_img, cfg);
    let txt_space = Space::new(&mut global, cfg.d_txt, cfg);
    let brands = brand_names(&mut global, cfg.n_brands);
    let spaces = (&img_space, &txt_space);

    // (date rank in [0, 1), offer)
    let mut dated: Vec<(f64, Offer)> = Vec::new();
    let mut product_offers = 0usize;
    for p in 0..cfg.n_products {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, p as u64));
        let spec = ProductSpec::draw(&mut rng, cfg)?;
        let latents = (
            img_space.latent(&mut rng, spec.brand, cfg.brand_weight),
            txt_space.latent(&mut rng, spec.brand, cfg.brand_weight),
        );
        let domains: Vec<usize> = loop {
            let ds: Vec<usize> = (0..cfg.n_domains)
                .filter(|_| rng.random_bool(cfg.domain_presence))
                .collect();
            if ds.len() >= 2 {
                break ds;
            }
        };
        let date = p as f64 / cfg.n_products as f64;
        for d in domains {
            let offer = make_offer(
                &mut rng,
                cfg,
                spaces,
                (&latents.0, &latents.1),
                &spec,
                &brands,
                d,
                format!("{}-{p:05}", domain_name(d)),
                format!("p{p:05}"),
            )?;
            dated.push((date, offer));
            product_offers += 1;
        }
    }
    let f = cfg.lone_negative_fraction;
    let n_lone = (f / (1.0 - f) * product_offers as f64).round() as usize;
    for l in 0..n_lone {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 2, l as u64));
        let spec = ProductSpec::draw(&mut rng, cfg)?;
        let latents = (
            img_space.latent(&mut rng, spec.brand, cfg.brand_weight),
            txt_space.latent(&mut rng, spec.brand, cfg.brand_weight),
        );
        let d = rng.random_range(0..cfg.n_domains);
        let date = rng.random::<f64>();
        let offer = make_offer(
            &mut rng,
            cfg,
            spaces,
            (&latents.0, &latents.1),
            &spec,
            &brands,
            d,
            format!("{}-L{l:05}", domain_name(d)),
            format!("lone{l:05}"),
        )?;
        dated.push((date, offer));
    }

    let out_domain = cfg.n_domains - 1;
    let domains = cfg.domain_names();
    let is = |o: &Offer, d: usize| o.domain == domains[d];
    let pre: Vec<&(f64, Offer)> = dated.iter().filter(|(t, _)| *t < cfg.train_cutoff).collect();
    let post: Vec<&Offer> = dated
        .iter()
        .filter(|(t, _)| *t >= cfg.train_cutoff)
        .map(|(_, o)| o)
        .collect();

    // Validation: a share of the pre-cutoff products offered in at least two
    // training domains, plus the same share of the remaining (lone) offers as
    // distractors.
    let mut by_product: BTreeMap<&str, Vec<&Offer>> = BTreeMap::new();
    for (_, o) in &pre {
        if !is(o, out_domain) {
            let pid = o.product_id.as_ref().map(|p| p.0.as_str()).unwrap_or_default();
            by_product.entry(pid).or_default().push(o);
        }
    }
    let mut held = std::collections::BTreeSet::new();
    let mut vrng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 3, 0));
    for grouped in [true, false] {
        let mut ids: Vec<&str> = by_product
            .iter()
            .filter(|(_, os)| (os.len() >= 2) == grouped)
            .map(|(p, _)| *p)
            .collect();
        let take = (cfg.validation_fraction * ids.len() as f64).round() as usize;
        rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut vrng);
        held.extend(ids[..take].iter().copied());
    }

    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (_, o) in &pre {
        if is(o, out_domain) {
            continue;
        }
        let pid = o.product_id.as_ref().map(|p| p.0.as_str()).unwrap_or_default();
        if held.contains(pid) {
            validation.push(o.clone());
        } else {
            train.push(o.clone());
        }
    }
    let pick = |d: usize| -> Vec<Offer> { post.iter().filter(|o| is(o, d)).map(|o| (*o).clone()).collect() };
    let (test_index, test_in, test_out) = (pick(0), pick(1), pick(out_domain));
    drop(by_product);
    drop(pre);
    drop(post);
    let all = Corpus::new(dated.into_iter().map(|(_, o)| o).collect(), CorpusRole::Train)?;
    Ok(SynthSplits {
        all,
        train: Corpus::new(train, CorpusRole::Train)?,
        validation: Corpus::new(validation, CorpusRole::Validation)?,
        test_index: Corpus::new(test_index, CorpusRole::TestInDomain)?
            .with_test_domains(domains[0].clone(), domains[1].clone())?,
        test_in_query: Corpus::new(test_in, CorpusRole::TestInDomain)?
            .with_test_domains(domains[0].clone(), domains[1].clone())?,
        test_out_query: Corpus::new(test_out, CorpusRole::TestOutDomain)?
            .with_test_domains(domains[0].clone(), domains[out_domain].clone())?,
    })
}

pub const SPLIT_FILES: [&str; 6] = [
    "all", "train", "validation", "test_index", "test_in_query", "test_out_query",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    /// Split name to offer count.
    pub counts: BTreeMap<String, usize>,
    /// Split name to JSONL file name; each has a `.emb` sidecar beside it.
    pub files: BTreeMap<String, String>,
    pub matching_pairs: usize,
    pub lone_offers: usize,
}

impl SynthSplits {
    pub fn named(&self) -> [(&'static str, &Corpus); 6] {
        [
            ("all", &self.all),
            ("train", &self.train),
            ("validation", &self.validation),
            ("test_index", &self.test_index),
            ("test_in_query", &self.test_in_query),
            ("test_out_query", &self.test_out_query),
        ]
    }

    /// Writes `<split>.jsonl` + `<split>.emb` for every split and `manifest.json`.
    pub fn write(&self, dir: &Path, cfg: &SynthConfig) -> Result<SynthManifest> {
        std::fs::create_dir_all(dir)?;
        let mut counts = BTreeMap::new();
        let mut files = BTreeMap::new();
        for (name, corpus) in self.named() {
            let file = format!("{name}.jsonl");
            let path = dir.join(&file);
            let mut sidecar = EmbeddingSidecar::new(cfg.d_img);
            write_offers_jsonl(&path, corpus.offers(), Some(&mut sidecar))?;
            crate::domain::write_sidecar(&path.with_extension("emb"), &sidecar)?;
            counts.insert(name.to_string(), corpus.len());
            files.insert(name.to_string(), file);
        }
        let manifest = SynthManifest {
            config: cfg.clone(),
            counts,
            files,
            matching_pairs: self.all.matching_pairs().len(),
            lone_offers: self.all.lone_positions().len(),
        };
        let f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(f, &manifest)?;
        Ok(manifest)
    }
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ingest_offers, OfferFormat};
    use crate::encoder::{embed_corpus, ModalityMask, ProjectionHead};
    use crate::eval::{cross_domain_eval, evaluate, GroundTruth};
    use crate::retrieval::{match_domains, MatchIndex, MatchParams};

    fn small() -> SynthConfig {
        SynthConfig {
            n_products: 200,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.all, b.all);
        assert_eq!(a.validation, b.validation);
        let c = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.all, c.all);
    }

    #[test]
    fn no_lone_offers_when_fraction_zero() {
        let s = generate(&SynthConfig { lone_negative_fraction: 0.0, ..small() }).unwrap();
        assert!(s.all.lone_positions().is_empty());
    }

    #[test]
    fn pair_count_recount() {
        let s = generate(&SynthConfig::default()).unwrap();
        // Independent recount: per product, k offers in k distinct domains give k(k-1)/2 pairs.
        let mut per: BTreeMap<String, usize> = BTreeMap::new();
        for o in s.all.offers() {
            *per.entry(o.product_id.clone().unwrap().0).or_default() += 1;
        }
        let expected: usize = per.values().map(|&k| k * (k - 1) / 2).sum();
        assert_eq!(s.all.matching_pairs().len(), expected);
        let lone = per.values().filter(|&&k| k == 1).count();
        assert_eq!(s.all.lone_positions().len(), lone);
        let share = lone as f64 / s.all.len() as f64;
        assert!((share - 0.3).abs() < 0.01, "{share}");
    }

    #[test]
    fn splits_are_disjoint_and_domain_pure() {
        let s = generate(&small()).unwrap();
        let d = small().domain_names();
        assert!(s.train.offers().iter().all(|o| o.domain != d[2]));
        assert!(s.test_index.offers().iter().all(|o| o.domain == d[0]));
        assert!(s.test_in_query.offers().iter().all(|o| o.domain == d[1]));
        assert!(s.test_out_query.offers().iter().all(|o| o.domain == d[2]));
        let train_products: std::collections::BTreeSet<_> = s.train.offers().iter().map(|o| o.product_id.clone()).collect();
        for o in s.validation.offers().iter().chain(s.test_index.offers()).chain(s.test_in_query.offers()) {
            assert!(!train_products.contains(&o.product_id), "{}", o.offer_id);
        }
        assert!(!s.validation.is_empty() && !s.test_in_query.is_empty());
    }

    #[test]
    fn degenerate_generator_is_perfect_for_raw_retrieval() {
        let cfg = SynthConfig {
            domain_shift_scale: 0.0,
            noise_scale: 0.0,
            style_scale: 0.0,
            ..small()
        };
        let s = generate(&cfg).unwrap();
        let head = ProjectionHead::identity(cfg.d_img, cfg.d_txt, ModalityMask::IMAGE_TEXT);
        let emb = embed_corpus(&s.validation, &head).unwrap();
        let r = cross_domain_eval(&s.validation, &emb, &MatchParams::default(), &[1]).unwrap();
        assert_eq!(r.recall_at_k[&1], 1.0);
        // Same on the in-domain test split with its lone distractors.
        let qe = embed_corpus(&s.test_in_query, &head).unwrap();
        let ie = embed_corpus(&s.test_index, &head).unwrap();
        let index = MatchIndex::build(&ie, &s.test_index).unwrap();
        let out = match_domains(&s.test_in_query, &qe, &index, &MatchParams::default()).unwrap();
        let truth = GroundTruth::from_corpora(&s.test_in_query, &s.test_index);
        assert_eq!(evaluate(&out.predictions, &truth, &[1]).unwrap().recall_at_k[&1], 1.0);
    }

    fn mean_cosines(cfg: &SynthConfig) -> (f64, f64) {
        let s = generate(cfg).unwrap();
        let head = ProjectionHead::identity(cfg.d_img, cfg.d_txt, ModalityMask::IMAGE_TEXT);
        let emb = embed_corpus(&s.all, &head).unwrap();
        let (mut within, mut nw) = (0.0, 0);
        for g in s.all.product_groups().values().filter(|g| g.len() >= 2) {
            within += emb.row(g[0]).dot(&emb.row(g[1]));
            nw += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut between, mut nb) = (0.0, 0);
        for _ in 0..5000 {
            let (i, j) = (rng.random_range(0..emb.len()), rng.random_range(0..emb.len()));
            if s.all.offers()[i].product_id != s.all.offers()[j].product_id {
                between += emb.row(i).dot(&emb.row(j));
                nb += 1;
            }
        }
        (within / nw as f64, between / nb as f64)
    }

    #[test]
    fn within_product_similarity_exceeds_between() {
        let (w, b) = mean_cosines(&SynthConfig::default());
        assert!(w > b + 0.04, "within {w} between {b}");
        let quiet = SynthConfig {
            domain_shift_scale: 0.3,
            noise_scale: 0.5,
            style_scale: 0.5,
            ..SynthConfig::default()
        };
        let (w, b) = mean_cosines(&quiet);
        assert!(w > b + 0.2, "within {w} between {b}");
    }

    #[test]
    fn files_roundtrip() {
        let cfg = SynthConfig { n_products: 30, ..SynthConfig::default() };
        let s = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = s.write(dir.path(), &cfg).unwrap();
        assert_eq!(m.counts["all"], s.all.len());
        let back = ingest_offers(&split_path(dir.path(), "all"), &OfferFormat::Jsonl).unwrap();
        for (a, b) in back.offers().iter().zip(s.all.offers()) {
            assert_eq!(a, b, "{}", a.offer_id);
        }
        assert_eq!(back.len(), s.all.len());
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&SynthConfig { n_domains: 2, ..small() }).is_err());
        assert!(generate(&SynthConfig { style_dims: 100, ..small() }).is_err());
        assert!(generate(&SynthConfig { noise_scale: -1.0, ..small() }).is_err());
    }
}
