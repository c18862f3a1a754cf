//! Supervised contrastive loss over a batch of unit embeddings and its exact
//! gradient back through row normalization and the projection head.
//!
//! With logits `s_ik = v_i . v_k / tau`, each anchor `i` with positives
//! `P(i)` contributes `lse_{k != i}(s_ik) - mean_{j in P(i)} s_ij`. Its gradient
//! with respect to the logits is `g_ik = softmax_ik - [k in P(i)] / |P(i)|`,
//! so `dL/dV = (G + G^T) V / tau`.
//!
//! Rows are processed in fixed tiles. The `G V` half is computed per row tile,
//! the `G^T V` half per column tile (reusing row-wise normalizers), so every
//! tile writes disjoint output rows and the result does not depend on thread
//! scheduling.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::encoder::{normalize_rows, HeadGradient, ProjectionHead};
use crate::error::{Error, Result};

const TILE: usize = 128;

/// Per-row positive counts `|P(i)|`; zero for lone members.
fn positive_counts(labels: &[Option<u32>]) -> Vec<usize> {
    let mut sizes: HashMap<u32, usize> = HashMap::new();
    for l in labels.iter().flatten() {
        *sizes.entry(*l).or_default() += 1;
    }
    labels
        .iter()
        .map(|l| l.map_or(0, |l| sizes[&l] - 1))
        .collect()
}

fn check(v: ArrayView2<f64>, labels: &[Option<u32>], tau: f64) -> Result<Vec<usize>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::domain("temperature", format!("must be positive, got {tau}")));
    }
    if labels.len() != v.nrows() {
        return Err(Error::dimension("batch labels", v.nrows(), labels.len()));
    }
    let counts = positive_counts(labels);
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::NoPositivePairs);
    }
    Ok(counts)
}

fn same(labels: &[Option<u32>], i: usize, k: usize) -> bool {
    i != k && labels[i].is_some() && labels[i] == labels[k]
}

fn tiles(n: usize) -> Vec<(usize, usize)> {
    (0..n).step_by(TILE).map(|a| (a, (a + TILE).min(n))).collect()
}

/// Loss, per-anchor log-normalizers and the `G V` half of the gradient for one row tile.
fn row_tile(
    v: ArrayView2<f64>,
    labels: &[Option<u32>],
    counts: &[usize],
    tau: f64,
    (a, b): (usize, usize),
    want_grad: bool,
) -> (Vec<f64>, Vec<f64>, Option<Array2<f64>>) {
    let mut logits = v.slice(s![a..b, ..]).dot(&v.t());
    logits /= tau;
    let mut terms = vec![0.0; b - a];
    let mut lse = vec![0.0; b - a];
    for (r, mut row) in logits.axis_iter_mut(Axis(0)).enumerate() {
        let i = a + r;
        if counts[i] == 0 {
            row.fill(0.0);
            continue;
        }
        let max = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &x)| (x - max).exp())
            .sum();
        let norm = max + sum.ln();
        let p = counts[i] as f64;
        let pos: f64 = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| same(labels, i, k))
            .map(|(_, &x)| x)
            .sum();
        terms[r] = norm - pos / p;
        lse[r] = norm;
        if want_grad {
            for (k, x) in row.iter_mut().enumerate() {
                *x = if k == i {
                    0.0
                } else {
                    (*x - norm).exp() - if same(labels, i, k) { 1.0 / p } else { 0.0 }
                };
            }
        }
    }
    let gv = want_grad.then(|| logits.dot(&v));
    (terms, lse, gv)
}

/// The `G^T V` half for column tile `[a, b)`: row `k` is `sum_i g_ik v_i`.
fn column_tile(
    v: ArrayView2<f64>,
    labels: &[Option<u32>],
    counts: &[usize],
    lse: &[f64],
    tau: f64,
    (a, b): (usize, usize),
) -> Array2<f64> {
    let mut h = v.slice(s![a..b, ..]).dot(&v.t());
    h /= tau;
    for (r, mut row) in h.axis_iter_mut(Axis(0)).enumerate() {
        let k = a + r;
        for (i, x) in row.iter_mut().enumerate() {
            *x = if i == k || counts[i] == 0 {
                0.0
            } else {
                (*x - lse[i]).exp()
                    - if same(labels, i, k) {
                        1.0 / counts[i] as f64
                    } else {
                        0.0
                    }
            };
        }
    }
    h.dot(&v)
}

/// Summed over anchors with at least one in-batch positive. Members labelled
/// `None` are lone: they only enter other anchors' denominators.
pub fn supcon_loss(v: ArrayView2<f64>, labels: &[Option<u32>], tau: f64) -> Result<f64> {
    let counts = check(v, labels, tau)?;
    let parts: Vec<Vec<f64>> = tiles(v.nrows())
        .into_par_iter()
        .map(|t| row_tile(v, labels, &counts, tau, t, false).0)
        .collect();
    Ok(parts
        .iter()
        .fold(0.0, |acc, t| acc + t.iter().sum::<f64>()))
}

/// Loss and its gradient with respect to the unit embeddings.
pub fn supcon_loss_grad(
    v: ArrayView2<f64>,
    labels: &[Option<u32>],
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let counts = check(v, labels, tau)?;
    let tile_list = tiles(v.nrows());
    let rows: Vec<_> = tile_list
        .par_iter()
        .map(|&t| row_tile(v, labels, &counts, tau, t, true))
        .collect();
    let mut loss = 0.0;
    let mut lse = Vec::with_capacity(v.nrows());
    for (terms, l, _) in &rows {
        loss += terms.iter().sum::<f64>();
        lse.extend_from_slice(l);
    }
    let cols: Vec<Array2<f64>> = tile_list
        .par_iter()
        .map(|&t| column_tile(v, labels, &counts, &lse, tau, t))
        .collect();
    let mut grad = Array2::zeros(v.raw_dim());
    for ((&(a, b), (_, _, gv)), gtv) in tile_list.iter().zip(&rows).zip(&cols) {
        let mut out = grad.slice_mut(s![a..b, ..]);
        out += gv.as_ref().expect("row tiles computed with gradient");
        out += gtv;
        out /= tau;
    }
    Ok((loss, grad))
}

/// Loss of the projected batch and its gradient with respect to every head
/// parameter, including the normalization Jacobian.
pub fn supcon_gradient(
    head: &ProjectionHead,
    x: ArrayView2<f64>,
    labels: &[Option<u32>],
    tau: f64,
) -> Result<(f64, HeadGradient)> {
    let (z, cache) = head.forward_batch(x)?;
    let (v, norms) = normalize_rows(&z)?;
    let (loss, dv) = supcon_loss_grad(v.view(), labels, tau)?;
    // dz_i = (I - v_i v_i^T) dv_i / |z_i|
    let mut dz = dv;
    for ((mut g, vi), &n) in dz
        .axis_iter_mut(Axis(0))
        .zip(v.axis_iter(Axis(0)))
        .zip(norms.iter())
    {
        let proj = g.dot(&vi);
        g.scaled_add(-proj, &vi);
        g /= n;
    }
    Ok((loss, head.backward(x, &cache, dz.view())))
}
