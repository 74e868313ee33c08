use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layers::{AttentionWeights, FeedForward};
use crate::embeddings::EmbeddingTable;
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Sizes that fix every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab: usize,
    pub dim: usize,
    pub d_model: usize,
    pub n_max: usize,
    pub self_conditioning: bool,
}

impl ModelShape {
    pub fn hidden(&self) -> usize {
        2 * self.d_model
    }

    /// Width of the denoiser input: `z_t`, or `[z_t ; prev ẑ_0]`.
    pub fn input_width(&self) -> usize {
        if self.self_conditioning {
            2 * self.dim
        } else {
            self.dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 8 || self.dim == 0 || self.d_model == 0 || self.n_max == 0 {
            return Err(Error::config(format!("invalid model shape {self:?} (V ≥ 8 and positive sizes required)")));
        }
        Ok(())
    }

    /// `(name, rows, cols)` of every tensor in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        let (v, d, m, h, n) = (self.vocab, self.dim, self.d_model, self.hidden(), self.n_max);
        vec![
            ("embedding", v, d),
            ("enc_in.w", d, m),
            ("enc_in.b", 1, m),
            ("enc_attn.wq", m, m),
            ("enc_attn.wk", m, m),
            ("enc_attn.wv", m, m),
            ("enc_attn.wo", m, m),
            ("enc_ffn.w1", m, h),
            ("enc_ffn.b1", 1, h),
            ("enc_ffn.w2", h, m),
            ("enc_ffn.b2", 1, m),
            ("length.w", m, n),
            ("length.b", 1, n),
            ("dec_in.w", self.input_width(), m),
            ("dec_in.b", 1, m),
            ("time.w", m, m),
            ("dec_self.wq", m, m),
            ("dec_self.wk", m, m),
            ("dec_self.wv", m, m),
            ("dec_self.wo", m, m),
            ("dec_cross.wq", m, m),
            ("dec_cross.wk", m, m),
            ("dec_cross.wv", m, m),
            ("dec_cross.wo", m, m),
            ("dec_ffn.w1", m, h),
            ("dec_ffn.b1", 1, h),
            ("dec_ffn.w2", h, m),
            ("dec_ffn.b2", 1, m),
            ("out.w", m, d),
            ("out.b", 1, d),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, r, c)| r * c).sum()
    }
}

/// Every trainable weight, including the embedding table shared by the
/// encoder input, the diffusion target and the rounding head.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParameters {
    pub shape: ModelShape,
    pub embedding: EmbeddingTable,
    pub enc_in_w: Array2<f64>,
    pub enc_in_b: Array2<f64>,
    pub enc_attn: AttentionWeights,
    pub enc_ffn: FeedForward,
    pub length_w: Array2<f64>,
    pub length_b: Array2<f64>,
    pub dec_in_w: Array2<f64>,
    pub dec_in_b: Array2<f64>,
    pub time_w: Array2<f64>,
    pub dec_self: AttentionWeights,
    pub dec_cross: AttentionWeights,
    pub dec_ffn: FeedForward,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
}

fn attention_zeros(m: usize) -> AttentionWeights {
    let z = || Array2::zeros((m, m));
    AttentionWeights { wq: z(), wk: z(), wv: z(), wo: z() }
}

fn ffn_zeros(m: usize, h: usize) -> FeedForward {
    FeedForward {
        w1: Array2::zeros((m, h)),
        b1: Array2::zeros((1, h)),
        w2: Array2::zeros((h, m)),
        b2: Array2::zeros((1, m)),
    }
}

impl DenoiserParameters {
    /// All tensors zero (the embedding table included). Used for gradients.
    pub fn zeros(shape: ModelShape) -> Self {
        let (d, m, h, n) = (shape.dim, shape.d_model, shape.hidden(), shape.n_max);
        DenoiserParameters {
            shape,
            embedding: EmbeddingTable::from_matrix(Array2::zeros((shape.vocab.max(2), d.max(1))), 1.0)
                .expect("zero table is finite"),
            enc_in_w: Array2::zeros((d, m)),
            enc_in_b: Array2::zeros((1, m)),
            enc_attn: attention_zeros(m),
            enc_ffn: ffn_zeros(m, h),
            length_w: Array2::zeros((m, n)),
            length_b: Array2::zeros((1, n)),
            dec_in_w: Array2::zeros((shape.input_width(), m)),
            dec_in_b: Array2::zeros((1, m)),
            time_w: Array2::zeros((m, m)),
            dec_self: attention_zeros(m),
            dec_cross: attention_zeros(m),
            dec_ffn: ffn_zeros(m, h),
            out_w: Array2::zeros((m, d)),
            out_b: Array2::zeros((1, d)),
        }
    }

    /// Gaussian embeddings with scale `sigma_e`, weight matrices with
    /// standard deviation `1/√fan_in`, zero biases.
    ///
    /// Each tensor draws from its own stream keyed by name, so switching
    /// self-conditioning on leaves every other tensor unchanged. With
    /// self-conditioning the extra input rows for the previous estimate
    /// start at zero, so a zero previous estimate reproduces the plain
    /// network exactly.
    pub fn init(shape: ModelShape, sigma_e: f64, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut p = DenoiserParameters::zeros(shape);
        p.embedding = EmbeddingTable::init_gaussian(shape.vocab, shape.dim, sigma_e, seed)?;
        for (name, t) in p.tensors_mut() {
            if name == "embedding" || name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                continue;
            }
            let rows = if name == "dec_in.w" { shape.dim } else { t.nrows() };
            let std = 1.0 / (rows as f64).sqrt();
            let key = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
            let mut values = rng::normals(seed, Purpose::ParamInit, &[key], rows * t.ncols());
            values.iter_mut().for_each(|v| *v *= std);
            let block = Array2::from_shape_vec((rows, t.ncols()), values).expect("shape matches");
            t.slice_mut(ndarray::s![..rows, ..]).assign(&block);
        }
        Ok(p)
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
        let p = self;
        let names = self.shape.tensor_shapes();
        let refs: Vec<&Array2<f64>> = vec![
            p.embedding_matrix(),
            &p.enc_in_w,
            &p.enc_in_b,
            &p.enc_attn.wq,
            &p.enc_attn.wk,
            &p.enc_attn.wv,
            &p.enc_attn.wo,
            &p.enc_ffn.w1,
            &p.enc_ffn.b1,
            &p.enc_ffn.w2,
            &p.enc_ffn.b2,
            &p.length_w,
            &p.length_b,
            &p.dec_in_w,
            &p.dec_in_b,
            &p.time_w,
            &p.dec_self.wq,
            &p.dec_self.wk,
            &p.dec_self.wv,
            &p.dec_self.wo,
            &p.dec_cross.wq,
            &p.dec_cross.wk,
            &p.dec_cross.wv,
            &p.dec_cross.wo,
            &p.dec_ffn.w1,
            &p.dec_ffn.b1,
            &p.dec_ffn.w2,
            &p.dec_ffn.b2,
            &p.out_w,
            &p.out_b,
        ];
        names.into_iter().map(|(n, _, _)| n).zip(refs).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
        let names = self.shape.tensor_shapes();
        let DenoiserParameters {
            shape: _,
            embedding,
            enc_in_w,
            enc_in_b,
            enc_attn,
            enc_ffn,
            length_w,
            length_b,
            dec_in_w,
            dec_in_b,
            time_w,
            dec_self,
            dec_cross,
            dec_ffn,
            out_w,
            out_b,
        } = self;
        let refs: Vec<&mut Array2<f64>> = vec![
            embedding.vectors_mut(),
            enc_in_w,
            enc_in_b,
            &mut enc_attn.wq,
            &mut enc_attn.wk,
            &mut enc_attn.wv,
            &mut enc_attn.wo,
            &mut enc_ffn.w1,
            &mut enc_ffn.b1,
            &mut enc_ffn.w2,
            &mut enc_ffn.b2,
            length_w,
            length_b,
            dec_in_w,
            dec_in_b,
            time_w,
            &mut dec_self.wq,
            &mut dec_self.wk,
            &mut dec_self.wv,
            &mut dec_self.wo,
            &mut dec_cross.wq,
            &mut dec_cross.wk,
            &mut dec_cross.wv,
            &mut dec_cross.wo,
            &mut dec_ffn.w1,
            &mut dec_ffn.b1,
            &mut dec_ffn.w2,
            &mut dec_ffn.b2,
            out_w,
            out_b,
        ];
        names.into_iter().map(|(n, _, _)| n).zip(refs).collect()
    }

    fn embedding_matrix(&self) -> &Array2<f64> {
        self.embedding.matrix()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Global L2 norm over all tensors.
    pub fn norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }
}
