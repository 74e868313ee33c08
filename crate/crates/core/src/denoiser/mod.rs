//! A small encoder/denoiser network with hand-written gradients.
//!
//! The network predicts `ẑ_0` from `(z_t, t, source)`. Gradients are exact
//! and cover every tensor, including the embedding table, which enters the
//! loss through the source encoder, the diffusion target `z_0 = E[y]`, the
//! noised input `z_t` and the rounding head.

mod layers;
mod network;
mod params;
pub mod tasks;
mod train;

use ndarray::{s, Array1, Array2, ArrayView2};

pub use layers::{AttentionWeights, FeedForward};
pub use params::{DenoiserParameters, ModelShape};
pub use tasks::{apply_task, cipher_permutation, make_batch, Pair, Task, TaskSampler};
pub use train::{
    gradcheck, gradcheck_case, loss_and_grad, train, train_with, GradcheckReport, LossMode, LossSettings, MetricsRow,
    TrainConfig, TrainOutcome, TrainingExample,
};

use network::{DenoiseInput, SourceBatch};

use crate::schedules::NoiseSchedule;
use crate::{Error, Result};

/// Trained weights together with the schedule they were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: DenoiserParameters,
    pub schedule: NoiseSchedule,
}

/// One sequence to denoise.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseItem<'a> {
    pub source: &'a [usize],
    pub z_t: ArrayView2<'a, f64>,
    pub t: usize,
    pub prev: Option<ArrayView2<'a, f64>>,
}

impl Model {
    pub fn new(params: DenoiserParameters, schedule: NoiseSchedule) -> Self {
        Model { params, schedule }
    }

    pub fn shape(&self) -> ModelShape {
        self.params.shape
    }

    /// `1/√(ᾱ_t + β̄_t)`: brings `z_t` to roughly unit scale. It is 1 for
    /// unrescaled and variance-preserving schedules.
    pub fn input_scale(&self, t: usize) -> f64 {
        input_scale(&self.schedule, t)
    }

    /// `ẑ_0` for one sequence.
    pub fn denoise(
        &self,
        z_t: ArrayView2<'_, f64>,
        t: usize,
        source: &[usize],
        prev: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>> {
        Ok(self.denoise_many(&[DenoiseItem { source, z_t, t, prev }])?.pop().expect("one item"))
    }

    /// `ẑ_0` for several sequences in one pass; results match
    /// [`Model::denoise`] item by item.
    pub fn denoise_many(&self, items: &[DenoiseItem<'_>]) -> Result<Vec<Array2<f64>>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let shape = self.params.shape;
        for item in items {
            self.check_source(item.source)?;
            self.schedule.check_timestep(item.t, 1)?;
            let n = item.z_t.nrows();
            if n == 0 || n > shape.n_max || item.z_t.ncols() != shape.dim {
                return Err(Error::shape(
                    format!("1..={} × {}", shape.n_max, shape.dim),
                    format!("{n} × {}", item.z_t.ncols()),
                ));
            }
            if let Some(prev) = item.prev {
                if prev.dim() != item.z_t.dim() {
                    return Err(Error::shape(format!("{:?}", item.z_t.dim()), format!("{:?}", prev.dim())));
                }
            }
        }
        let sources: Vec<&[usize]> = items.iter().map(|i| i.source).collect();
        let src = SourceBatch::new(&sources);
        let enc = network::encode(&self.params, &src);
        let input = self.build_input(items.iter().map(|i| (i.z_t, i.t, i.prev)));
        let (out, _) = network::denoise(&self.params, &src, &enc, &input);
        Ok(input.segments.iter().map(|r| out.slice(s![r.clone(), ..]).to_owned()).collect())
    }

    pub(crate) fn build_input<'a>(
        &self,
        items: impl Iterator<Item = (ArrayView2<'a, f64>, usize, Option<ArrayView2<'a, f64>>)>,
    ) -> DenoiseInput {
        build_input(&self.params.shape, &self.schedule, items)
    }

    /// Length logits over `[1, n_max]` (index `i` is length `i + 1`).
    pub fn predict_length(&self, source: &[usize]) -> Result<Array1<f64>> {
        self.check_source(source)?;
        let src = SourceBatch::new(&[source]);
        let enc = network::encode(&self.params, &src);
        Ok(enc.length_logits.row(0).to_owned())
    }

    fn check_source(&self, source: &[usize]) -> Result<()> {
        if source.is_empty() {
            return Err(Error::config("source sequence is empty"));
        }
        let vocab = self.params.shape.vocab;
        if let Some(&bad) = source.iter().find(|&&t| t >= vocab) {
            return Err(Error::Token { index: bad, vocab });
        }
        Ok(())
    }
}

pub(crate) fn input_scale(schedule: &NoiseSchedule, t: usize) -> f64 {
    1.0 / (schedule.alpha_bar(t) + schedule.beta_bar(t)).sqrt()
}

/// Timestep position for the sinusoidal embedding, on a `0..1000` scale
/// independent of `T`.
pub(crate) fn time_position(schedule: &NoiseSchedule, t: usize) -> f64 {
    1000.0 * t as f64 / schedule.steps() as f64
}

pub(crate) fn build_input<'a>(
    shape: &ModelShape,
    schedule: &NoiseSchedule,
    items: impl Iterator<Item = (ArrayView2<'a, f64>, usize, Option<ArrayView2<'a, f64>>)>,
) -> DenoiseInput {
    let d = shape.dim;
    let mut blocks = Vec::new();
    let mut segments = Vec::new();
    let mut time = Vec::new();
    let mut rows = 0;
    for (z_t, t, prev) in items {
        let n = z_t.nrows();
        let mut block = Array2::zeros((n, shape.input_width()));
        block.slice_mut(s![.., ..d]).assign(&(&z_t * input_scale(schedule, t)));
        if let (true, Some(prev)) = (shape.self_conditioning, prev) {
            block.slice_mut(s![.., d..]).assign(&prev);
        }
        blocks.push(block);
        segments.push(rows..rows + n);
        time.push(time_position(schedule, t));
        rows += n;
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let z_in = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
    DenoiseInput { z_in, segments, time }
}
