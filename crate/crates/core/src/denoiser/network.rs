//! Forward and backward passes of the encoder/denoiser network.
//!
//! Encoder: `x = E[src] W_e + b_e + pos`, one self-attention block and one
//! feed-forward block, both residual. The length head reads the mean of the
//! encoder states. Denoiser: `u = z_in W_i + b_i + pos + time(t) W_t`, then
//! residual self-attention, cross-attention over the encoder states and a
//! feed-forward block, and a linear read-out to `ẑ_0`. There is no
//! normalisation layer; inputs are scaled to unit variance by the caller.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis};

use super::layers::{
    attention, attention_backward, feed_forward, feed_forward_backward, linear, linear_backward, sinusoid,
    AttentionCache, FeedForwardCache, Segment,
};
use super::params::DenoiserParameters;

/// A batch of sources, stacked row-wise.
#[derive(Debug, Clone)]
pub(crate) struct SourceBatch {
    pub tokens: Vec<usize>,
    pub segments: Vec<Range<usize>>,
}

impl SourceBatch {
    pub fn new(sources: &[&[usize]]) -> Self {
        let mut tokens = Vec::new();
        let mut segments = Vec::with_capacity(sources.len());
        for src in sources {
            let start = tokens.len();
            tokens.extend_from_slice(src);
            segments.push(start..tokens.len());
        }
        SourceBatch { tokens, segments }
    }
}

fn positions(segments: &[Range<usize>], rows: usize, width: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, width));
    for seg in segments {
        for (i, r) in seg.clone().enumerate() {
            out.row_mut(r).assign(&ndarray::Array1::from(sinusoid(i as f64, width)));
        }
    }
    out
}

fn self_segments(segments: &[Range<usize>]) -> Vec<Segment> {
    segments.iter().map(|r| Segment { query: r.clone(), key: r.clone() }).collect()
}

pub(crate) struct Encoded {
    pub states: Array2<f64>,
    pub length_logits: Array2<f64>,
    cache: EncoderCache,
}

struct EncoderCache {
    xs: Array2<f64>,
    a0: Array2<f64>,
    a1: Array2<f64>,
    pooled: Array2<f64>,
    attn: AttentionCache,
    ffn: FeedForwardCache,
}

pub(crate) fn encode(p: &DenoiserParameters, src: &SourceBatch) -> Encoded {
    let m = p.shape.d_model;
    let xs = p.embedding.vectors().select(Axis(0), &src.tokens);
    let a0 = linear(xs.view(), &p.enc_in_w, &p.enc_in_b) + positions(&src.segments, xs.nrows(), m);
    let segs = self_segments(&src.segments);
    let (ya, attn) = attention(&p.enc_attn, a0.view(), a0.view(), &segs);
    let a1 = &a0 + &ya;
    let (yf, ffn) = feed_forward(&p.enc_ffn, a1.view());
    let states = &a1 + &yf;
    let mut pooled = Array2::zeros((src.segments.len(), m));
    for (b, seg) in src.segments.iter().enumerate() {
        let rows = states.slice(s![seg.clone(), ..]);
        pooled.row_mut(b).assign(&rows.mean_axis(Axis(0)).expect("non-empty source"));
    }
    let length_logits = linear(pooled.view(), &p.length_w, &p.length_b);
    Encoded { states, length_logits, cache: EncoderCache { xs, a0, a1, pooled, attn, ffn } }
}

/// Denoiser inputs for a batch whose sources were encoded as `src`.
pub(crate) struct DenoiseInput {
    /// `Σn × input_width`: scaled `z_t`, optionally followed by prev `ẑ_0`.
    pub z_in: Array2<f64>,
    pub segments: Vec<Range<usize>>,
    /// Timestep position fed to the sinusoidal embedding, per sequence.
    pub time: Vec<f64>,
}

pub(crate) struct DenoiseCache {
    time_rows: Array2<f64>,
    u0: Array2<f64>,
    u1: Array2<f64>,
    u2: Array2<f64>,
    u3: Array2<f64>,
    self_attn: AttentionCache,
    cross_attn: AttentionCache,
    ffn: FeedForwardCache,
}

fn cross_segments(tgt: &[Range<usize>], src: &[Range<usize>]) -> Vec<Segment> {
    tgt.iter().zip(src).map(|(q, k)| Segment { query: q.clone(), key: k.clone() }).collect()
}

pub(crate) fn denoise(
    p: &DenoiserParameters,
    src: &SourceBatch,
    enc: &Encoded,
    input: &DenoiseInput,
) -> (Array2<f64>, DenoiseCache) {
    let m = p.shape.d_model;
    let rows = input.z_in.nrows();
    let mut time_rows = Array2::zeros((rows, m));
    for (seg, &t) in input.segments.iter().zip(&input.time) {
        let emb = ndarray::Array1::from(sinusoid(t, m));
        for r in seg.clone() {
            time_rows.row_mut(r).assign(&emb);
        }
    }
    let u0 = linear(input.z_in.view(), &p.dec_in_w, &p.dec_in_b)
        + positions(&input.segments, rows, m)
        + time_rows.dot(&p.time_w);
    let (ys, self_attn) = attention(&p.dec_self, u0.view(), u0.view(), &self_segments(&input.segments));
    let u1 = &u0 + &ys;
    let cross = cross_segments(&input.segments, &src.segments);
    let (yc, cross_attn) = attention(&p.dec_cross, u1.view(), enc.states.view(), &cross);
    let u2 = &u1 + &yc;
    let (yf, ffn) = feed_forward(&p.dec_ffn, u2.view());
    let u3 = &u2 + &yf;
    let out = linear(u3.view(), &p.out_w, &p.out_b);
    (out, DenoiseCache { time_rows, u0, u1, u2, u3, self_attn, cross_attn, ffn })
}

/// Backward through denoiser and encoder. Gradients are accumulated into
/// `g` (the source-embedding path included); returns `∂L/∂z_in`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    p: &DenoiserParameters,
    src: &SourceBatch,
    enc: &Encoded,
    input: &DenoiseInput,
    cache: &DenoiseCache,
    d_out: ArrayView2<'_, f64>,
    d_length_logits: ArrayView2<'_, f64>,
    g: &mut DenoiserParameters,
) -> Array2<f64> {
    let d_u3 = linear_backward(cache.u3.view(), &p.out_w, d_out, &mut g.out_w, Some(&mut g.out_b));
    let d_u2 = &d_u3 + &feed_forward_backward(&p.dec_ffn, cache.u2.view(), &cache.ffn, d_u3.view(), &mut g.dec_ffn);
    let cross = cross_segments(&input.segments, &src.segments);
    let (dq, d_states) = attention_backward(
        &p.dec_cross,
        cache.u1.view(),
        enc.states.view(),
        &cross,
        &cache.cross_attn,
        d_u2.view(),
        &mut g.dec_cross,
    );
    let d_u1 = &d_u2 + &dq;
    let (dq, dk) = attention_backward(
        &p.dec_self,
        cache.u0.view(),
        cache.u0.view(),
        &self_segments(&input.segments),
        &cache.self_attn,
        d_u1.view(),
        &mut g.dec_self,
    );
    let d_u0 = d_u1 + dq + dk;
    ndarray::linalg::general_mat_mul(1.0, &cache.time_rows.t(), &d_u0, 1.0, &mut g.time_w);
    let d_z_in = linear_backward(input.z_in.view(), &p.dec_in_w, d_u0.view(), &mut g.dec_in_w, Some(&mut g.dec_in_b));

    encoder_backward(p, src, enc, d_states, d_length_logits, g);
    d_z_in
}

fn encoder_backward(
    p: &DenoiserParameters,
    src: &SourceBatch,
    enc: &Encoded,
    mut d_states: Array2<f64>,
    d_length_logits: ArrayView2<'_, f64>,
    g: &mut DenoiserParameters,
) {
    let c = &enc.cache;
    let d_pooled =
        linear_backward(c.pooled.view(), &p.length_w, d_length_logits, &mut g.length_w, Some(&mut g.length_b));
    for (b, seg) in src.segments.iter().enumerate() {
        let share = &d_pooled.row(b) / seg.len() as f64;
        for r in seg.clone() {
            let mut row = d_states.row_mut(r);
            row += &share;
        }
    }
    let d_a1 = &d_states + &feed_forward_backward(&p.enc_ffn, c.a1.view(), &c.ffn, d_states.view(), &mut g.enc_ffn);
    let segs = self_segments(&src.segments);
    let (dq, dk) =
        attention_backward(&p.enc_attn, c.a0.view(), c.a0.view(), &segs, &c.attn, d_a1.view(), &mut g.enc_attn);
    let d_a0 = d_a1 + dq + dk;
    let d_xs = linear_backward(c.xs.view(), &p.enc_in_w, d_a0.view(), &mut g.enc_in_w, Some(&mut g.enc_in_b));
    let ge = g.embedding.vectors_mut();
    for (row, &tok) in d_xs.outer_iter().zip(&src.tokens) {
        let mut dst = ge.row_mut(tok);
        dst += &row;
    }
}
