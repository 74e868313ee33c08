//! Building blocks with explicit forward caches and backward passes.
//!
//! Sequences of a batch are stacked row-wise without padding; a
//! [`Segment`] names the query rows and key rows that attend to each other.
//! Biases are stored as `1 × m` matrices so every parameter is a 2-D tensor.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Segment {
    pub query: Range<usize>,
    pub key: Range<usize>,
}

pub(crate) fn linear(x: ArrayView2<'_, f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Accumulates `dW += xᵀ dy`, `db += Σ_rows dy` and returns `dx = dy Wᵀ`.
pub(crate) fn linear_backward(
    x: ArrayView2<'_, f64>,
    w: &Array2<f64>,
    dy: ArrayView2<'_, f64>,
    dw: &mut Array2<f64>,
    db: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, dw);
    if let Some(db) = db {
        *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    dy.dot(&w.t())
}

pub(crate) struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
}

fn softmax_rows(mut s: Array2<f64>) -> Array2<f64> {
    for mut row in s.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    s
}

/// Single-head attention of rows of `a` over rows of `b`, output `O Wo`.
pub(crate) fn attention(
    p: &AttentionWeights,
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    segments: &[Segment],
) -> (Array2<f64>, AttentionCache) {
    let q = a.dot(&p.wq);
    let k = b.dot(&p.wk);
    let v = b.dot(&p.wv);
    let scale = 1.0 / (p.wq.ncols() as f64).sqrt();
    let mut o = Array2::zeros((a.nrows(), p.wv.ncols()));
    let mut probs = Vec::with_capacity(segments.len());
    for seg in segments {
        let qs = q.slice(s![seg.query.clone(), ..]);
        let ks = k.slice(s![seg.key.clone(), ..]);
        let vs = v.slice(s![seg.key.clone(), ..]);
        let pr = softmax_rows(qs.dot(&ks.t()) * scale);
        o.slice_mut(s![seg.query.clone(), ..]).assign(&pr.dot(&vs));
        probs.push(pr);
    }
    let y = o.dot(&p.wo);
    (y, AttentionCache { q, k, v, probs, o })
}

/// Returns `(da, db)`; for self-attention the caller adds them.
pub(crate) fn attention_backward(
    p: &AttentionWeights,
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    segments: &[Segment],
    cache: &AttentionCache,
    dy: ArrayView2<'_, f64>,
    g: &mut AttentionWeights,
) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (p.wq.ncols() as f64).sqrt();
    let d_o = linear_backward(cache.o.view(), &p.wo, dy, &mut g.wo, None);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (seg, pr) in segments.iter().zip(&cache.probs) {
        let dos = d_o.slice(s![seg.query.clone(), ..]);
        let vs = cache.v.slice(s![seg.key.clone(), ..]);
        let qs = cache.q.slice(s![seg.query.clone(), ..]);
        let ks = cache.k.slice(s![seg.key.clone(), ..]);
        let dp = dos.dot(&vs.t());
        dv.slice_mut(s![seg.key.clone(), ..]).scaled_add(1.0, &pr.t().dot(&dos));
        let mut ds = pr * &dp;
        let row_sums = ds.sum_axis(Axis(1)).insert_axis(Axis(1));
        ds -= &(pr * &row_sums);
        ds *= scale;
        dq.slice_mut(s![seg.query.clone(), ..]).scaled_add(1.0, &ds.dot(&ks));
        dk.slice_mut(s![seg.key.clone(), ..]).scaled_add(1.0, &ds.t().dot(&qs));
    }
    let da = linear_backward(a, &p.wq, dq.view(), &mut g.wq, None);
    let mut db = linear_backward(b, &p.wk, dk.view(), &mut g.wk, None);
    db += &linear_backward(b, &p.wv, dv.view(), &mut g.wv, None);
    (da, db)
}

pub(crate) struct FeedForwardCache {
    hidden: Array2<f64>,
}

/// `relu(x W1 + b1) W2 + b2`.
pub(crate) fn feed_forward(p: &FeedForward, x: ArrayView2<'_, f64>) -> (Array2<f64>, FeedForwardCache) {
    let hidden = linear(x, &p.w1, &p.b1).mapv_into(|v| v.max(0.0));
    let y = linear(hidden.view(), &p.w2, &p.b2);
    (y, FeedForwardCache { hidden })
}

pub(crate) fn feed_forward_backward(
    p: &FeedForward,
    x: ArrayView2<'_, f64>,
    cache: &FeedForwardCache,
    dy: ArrayView2<'_, f64>,
    g: &mut FeedForward,
) -> Array2<f64> {
    let mut dh = linear_backward(cache.hidden.view(), &p.w2, dy, &mut g.w2, Some(&mut g.b2));
    ndarray::Zip::from(&mut dh).and(&cache.hidden).for_each(|d, &h| {
        if h <= 0.0 {
            *d = 0.0;
        }
    });
    linear_backward(x, &p.w1, dh.view(), &mut g.w1, Some(&mut g.b1))
}

/// Sinusoidal encoding of a (possibly fractional) position.
pub(crate) fn sinusoid(pos: f64, width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / width as f64);
            if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}
