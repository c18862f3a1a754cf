//! Late-fusion encoder: average-pool the image embeddings of an offer,
//! concatenate `[image | text | numerical]`, project with a small trainable
//! head and L2-normalize into the matching space.

mod persist;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{numerical_features, Corpus, Offer};
use crate::error::{Error, Result};

pub use persist::{
    read_embeddings, read_head, write_embeddings, write_head, HEAD_MAGIC, HEAD_VERSION,
};

pub const DEFAULT_OUTPUT_DIM: usize = 192;
pub const HIDDEN_DIM: usize = 256;
pub const NUMERICAL_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub image: bool,
    pub text: bool,
    pub numerical: bool,
}

impl ModalityMask {
    pub const ALL: ModalityMask = ModalityMask {
        image: true,
        text: true,
        numerical: true,
    };
    pub const IMAGE_TEXT: ModalityMask = ModalityMask {
        image: true,
        text: true,
        numerical: false,
    };
    pub const IMAGE_ONLY: ModalityMask = ModalityMask {
        image: true,
        text: false,
        numerical: false,
    };
    pub const TEXT_ONLY: ModalityMask = ModalityMask {
        image: false,
        text: true,
        numerical: false,
    };

    pub fn bits(self) -> u32 {
        u32::from(self.image) | u32::from(self.text) << 1 | u32::from(self.numerical) << 2
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        if bits == 0 || bits > 7 {
            return Err(Error::Format(format!("invalid modality mask {bits:#b}")));
        }
        Ok(ModalityMask {
            image: bits & 1 != 0,
            text: bits & 2 != 0,
            numerical: bits & 4 != 0,
        })
    }

    pub fn fused_dim(self, d_img: usize, d_txt: usize) -> usize {
        let mut d = 0;
        if self.image {
            d += d_img;
        }
        if self.text {
            d += d_txt;
        }
        if self.numerical {
            d += NUMERICAL_DIM;
        }
        d
    }
}

impl Default for ModalityMask {
    fn default() -> Self {
        ModalityMask::ALL
    }
}

/// Per-component standardization of the numerical features, fitted on the
/// training corpus and persisted with the head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; NUMERICAL_DIM],
    pub std: [f64; NUMERICAL_DIM],
}

impl FeatureStats {
    pub const IDENTITY: FeatureStats = FeatureStats {
        mean: [0.0; NUMERICAL_DIM],
        std: [1.0; NUMERICAL_DIM],
    };

    pub fn fit(corpus: &Corpus) -> Result<Self> {
        if corpus.is_empty() {
            return Ok(Self::IDENTITY);
        }
        let feats = corpus
            .offers()
            .iter()
            .map(|o| numerical_features(o.price, o.n_sizes))
            .collect::<Result<Vec<_>>>()?;
        let n = feats.len() as f64;
        let mut mean = [0.0; NUMERICAL_DIM];
        let mut std = [0.0; NUMERICAL_DIM];
        for c in 0..NUMERICAL_DIM {
            mean[c] = feats.iter().map(|f| f[c]).sum::<f64>() / n;
            let var = feats.iter().map(|f| (f[c] - mean[c]).powi(2)).sum::<f64>() / n;
            // Constant features pass through centred but unscaled.
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(FeatureStats { mean, std })
    }

    pub fn apply(&self, raw: [f64; NUMERICAL_DIM]) -> [f64; NUMERICAL_DIM] {
        let mut out = raw;
        for c in 0..NUMERICAL_DIM {
            out[c] = (raw[c] - self.mean[c]) / self.std[c];
        }
        out
    }
}

/// A fused offer feature vector in the head's input space.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVector(pub Vec<f64>);

/// Dense affine layer, `y = W x + b`, with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform fan-in initialization in `[-1/sqrt(d_in), 1/sqrt(d_in)]`.
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = 1.0 / (d_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((d_out, d_in), || rng.random_range(-a..=a));
        let bias = Array1::from_shape_simple_fn(d_out, || rng.random_range(-a..=a));
        Linear { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    /// One layer, or two with a ReLU in between.
    pub layers: Vec<Linear>,
    pub d_img: usize,
    pub d_txt: usize,
    pub mask: ModalityMask,
    pub stats: FeatureStats,
}

/// Gradient of a scalar with respect to every head parameter, shaped like the head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub layers: Vec<Linear>,
}

impl HeadGradient {
    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Weights then bias of each layer, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight *= c;
            l.bias *= c;
        }
    }
}

/// Intermediate activations of a batch forward pass, kept for backprop.
pub struct ForwardCache {
    /// Hidden pre-activations when the head has a hidden layer.
    hidden_pre: Option<Array2<f64>>,
    hidden: Option<Array2<f64>>,
}

impl ProjectionHead {
    pub fn new_linear(
        d_img: usize,
        d_txt: usize,
        mask: ModalityMask,
        d_out: usize,
        stats: FeatureStats,
        seed: u64,
    ) -> Result<Self> {
        Self::with_widths(d_img, d_txt, mask, &[d_out], stats, seed)
    }

    /// `Linear(d_in -> 256) -> ReLU -> Linear(256 -> d_out)`.
    pub fn new_hidden(
        d_img: usize,
        d_txt: usize,
        mask: ModalityMask,
        d_out: usize,
        stats: FeatureStats,
        seed: u64,
    ) -> Result<Self> {
        Self::with_widths(d_img, d_txt, mask, &[HIDDEN_DIM, d_out], stats, seed)
    }

    /// Layer widths after the input, ReLU between consecutive layers.
    pub fn with_widths(
        d_img: usize,
        d_txt: usize,
        mask: ModalityMask,
        widths: &[usize],
        stats: FeatureStats,
        seed: u64,
    ) -> Result<Self> {
        let d_in = mask.fused_dim(d_img, d_txt);
        if d_in == 0 {
            return Err(Error::Config("head input dimension is zero".into()));
        }
        if widths.is_empty() || widths.len() > 2 {
            return Err(Error::Config("head must have one or two layers".into()));
        }
        if widths.contains(&0) {
            return Err(Error::Config("output dimension must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = d_in;
        for &w in widths {
            layers.push(Linear::init(fan_in, w, &mut rng));
            fan_in = w;
        }
        Ok(ProjectionHead {
            layers,
            d_img,
            d_txt,
            mask,
            stats,
        })
    }

    /// Identity-weight square linear head, for tests and raw-embedding baselines.
    pub fn identity(d_img: usize, d_txt: usize, mask: ModalityMask) -> Self {
        let d = mask.fused_dim(d_img, d_txt);
        ProjectionHead {
            layers: vec![Linear {
                weight: Array2::eye(d),
                bias: Array1::zeros(d),
            }],
            d_img,
            d_txt,
            mask,
            stats: FeatureStats::IDENTITY,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn zero_gradient(&self) -> HeadGradient {
        HeadGradient {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    /// Pre-normalization outputs for a batch of fused rows.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dimension("fused batch", self.input_dim(), x.ncols()));
        }
        match self.layers.as_slice() {
            [only] => Ok((
                only.forward(x),
                ForwardCache {
                    hidden_pre: None,
                    hidden: None,
                },
            )),
            [first, second] => {
                let pre = first.forward(x);
                let hidden = pre.mapv(|v| v.max(0.0));
                let out = second.forward(hidden.view());
                Ok((
                    out,
                    ForwardCache {
                        hidden_pre: Some(pre),
                        hidden: Some(hidden),
                    },
                ))
            }
            _ => Err(Error::Format(format!(
                "unsupported layer count {}",
                self.layers.len()
            ))),
        }
    }

    /// Backpropagates `d_out` (gradient w.r.t. pre-normalization outputs) to
    /// every parameter.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &ForwardCache,
        d_out: ArrayView2<f64>,
    ) -> HeadGradient {
        let linear_grad = |input: ArrayView2<f64>, d: ArrayView2<f64>| Linear {
            weight: d.t().dot(&input),
            bias: d.sum_axis(Axis(0)),
        };
        match (&cache.hidden_pre, &cache.hidden) {
            (Some(pre), Some(hidden)) => {
                let g2 = linear_grad(hidden.view(), d_out);
                let mut d_hidden = d_out.dot(&self.layers[1].weight);
                d_hidden.zip_mut_with(pre, |g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
                let g1 = linear_grad(x, d_hidden.view());
                HeadGradient {
                    layers: vec![g1, g2],
                }
            }
            _ => HeadGradient {
                layers: vec![linear_grad(x, d_out)],
            },
        }
    }

    /// Maps a fused vector to the unit sphere.
    pub fn project(&self, fused: &FusedVector) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, fused.0.len()), &fused.0)
            .map_err(|e| Error::Format(e.to_string()))?;
        let (z, _) = self.forward_batch(x)?;
        normalize(z.row(0)).ok_or(Error::DegenerateProjection)
    }
}

/// L2-normalizes a vector; `None` for the zero vector.
pub fn normalize(v: ArrayView1<f64>) -> Option<Vec<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

/// Componentwise mean of an offer's image embeddings.
pub fn pool_images(image_embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = image_embeddings
        .first()
        .ok_or_else(|| Error::EmptyImages(String::new()))?;
    let mut acc = vec![0.0; first.len()];
    for (i, v) in image_embeddings.iter().enumerate() {
        if v.len() != acc.len() {
            return Err(Error::dimension(
                format!("image embedding {i}"),
                acc.len(),
                v.len(),
            ));
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = image_embeddings.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Concatenates `[pooled image | text | standardized numerical]`, omitting
/// masked-out modalities.
pub fn fuse(offer: &Offer, head: &ProjectionHead) -> Result<FusedVector> {
    let wrap = |e: Error| e.for_offer(&offer.offer_id);
    let mut out = Vec::with_capacity(head.input_dim());
    if head.mask.image {
        let pooled = pool_images(&offer.image_embeddings).map_err(|e| match e {
            Error::EmptyImages(_) => Error::EmptyImages(offer.offer_id.clone()),
            other => wrap(other),
        })?;
        if pooled.len() != head.d_img {
            return Err(wrap(Error::dimension(
                "image embedding",
                head.d_img,
                pooled.len(),
            )));
        }
        out.extend(pooled);
    }
    if head.mask.text {
        if offer.text_embedding.len() != head.d_txt {
            return Err(wrap(Error::dimension(
                "text embedding",
                head.d_txt,
                offer.text_embedding.len(),
            )));
        }
        out.extend_from_slice(&offer.text_embedding);
    }
    if head.mask.numerical {
        let raw = numerical_features(offer.price, offer.n_sizes).map_err(wrap)?;
        out.extend(head.stats.apply(raw));
    }
    Ok(FusedVector(out))
}

/// Fused inputs of a whole corpus as a row matrix, in corpus order.
pub fn fuse_corpus(corpus: &Corpus, head: &ProjectionHead) -> Result<Array2<f64>> {
    let rows = corpus
        .offers()
        .par_iter()
        .map(|o| fuse(o, head))
        .collect::<Result<Vec<_>>>()?;
    let d = head.input_dim();
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.into_iter().enumerate() {
        m.row_mut(i).assign(&ArrayView1::from(&r.0));
    }
    Ok(m)
}

/// Unit embeddings of a corpus, aligned with corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub ids: Vec<String>,
    pub vectors: Array2<f64>,
}

impl Embeddings {
    pub fn new(ids: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if ids.len() != vectors.nrows() {
            return Err(Error::dimension("embedding ids", vectors.nrows(), ids.len()));
        }
        Ok(Embeddings { ids, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    pub fn lookup(&self) -> std::collections::HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Rows for the given positions, in order.
    pub fn select(&self, rows: &[usize]) -> Embeddings {
        Embeddings {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            vectors: self.vectors.select(Axis(0), rows),
        }
    }
}

/// `project(fuse(offer))` for every offer. Parallel over offers; the result
/// does not depend on the thread count.
pub fn embed_corpus(corpus: &Corpus, head: &ProjectionHead) -> Result<Embeddings> {
    let rows = corpus
        .offers()
        .par_iter()
        .map(|o| {
            fuse(o, head)
                .and_then(|f| head.project(&f))
                .map_err(|e| match e {
                    e @ (Error::Offer { .. } | Error::EmptyImages(_)) => e,
                    other => other.for_offer(&o.offer_id),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let d = head.output_dim();
    let mut vectors = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        vectors.slice_mut(s![i, ..]).assign(&ArrayView1::from(r));
    }
    Embeddings::new(
        corpus.offers().iter().map(|o| o.offer_id.clone()).collect(),
        vectors,
    )
}

/// Row-normalizes a matrix; zero rows are an error.
pub fn normalize_rows(z: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::DegenerateProjection);
    }
    let v = z / &norms.view().insert_axis(Axis(1));
    Ok((v, norms))
}
