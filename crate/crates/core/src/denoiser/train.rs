use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{self, SourceBatch};
use super::params::{DenoiserParameters, ModelShape};
use super::tasks::{Task, TaskSampler};
use super::{build_input, input_scale, Model};
use crate::config::KeyValues;
use crate::decoding::{self, DecodeOptions};
use crate::degeneration::{search_factor, MonteCarlo, SearchSettings};
use crate::diffusion::LossParts;
use crate::embeddings::softmax;
use crate::rng::{self, Purpose};
use crate::schedules::{build_schedule, NoiseSchedule, ScheduleKind};
use crate::{Error, Result};

/// Which objective is optimised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `L_vlb` alone.
    VlbOnly,
    /// `L_vlb + L_round`.
    Text,
    /// `L_vlb + L_anchor`.
    Anchor,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::VlbOnly => "vlb_only",
            LossMode::Text => "text",
            LossMode::Anchor => "anchor",
        }
    }

    pub const ALL: [LossMode; 3] = [LossMode::VlbOnly, LossMode::Text, LossMode::Anchor];
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vlb_only" => Ok(LossMode::VlbOnly),
            "text" => Ok(LossMode::Text),
            "anchor" => Ok(LossMode::Anchor),
            other => Err(Error::config(format!("unknown loss mode `{other}` (expected vlb_only, text or anchor)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub mode: LossMode,
    pub lambda_len: f64,
    /// Applied to the rounding-head term of anchor mode and to the length NLL.
    pub label_smoothing: f64,
    /// Multiplies the whole objective.
    pub scale: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings { mode: LossMode::Anchor, lambda_len: 0.1, label_smoothing: 0.1, scale: 1.0 }
    }
}

/// One training sequence with its sampled timestep and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub t: usize,
    /// `n × d` standard normal noise for the forward sample.
    pub noise: Array2<f64>,
    /// Self-conditioning input, treated as a constant.
    pub prev: Option<Array2<f64>>,
}

/// Smoothed cross-entropy for a row of logits; returns `(loss, dloss/dlogits)`.
fn cross_entropy(logits: ndarray::ArrayView1<'_, f64>, y: usize, eps: f64) -> (f64, ndarray::Array1<f64>) {
    let p = softmax(logits);
    let v = logits.len() as f64;
    let lse = crate::embeddings::log_sum_exp(logits);
    let mut grad = p;
    let loss = (1.0 - eps) * (lse - logits[y]) + eps * (lse - logits.mean().unwrap_or(0.0));
    grad.mapv_inplace(|g| g - eps / v);
    grad[y] -= 1.0 - eps;
    (loss, grad)
}

/// Loss and exact gradient of every parameter for one batch.
pub fn loss_and_grad(
    params: &DenoiserParameters,
    schedule: &NoiseSchedule,
    batch: &[TrainingExample],
    settings: &LossSettings,
) -> Result<(LossParts, DenoiserParameters)> {
    let shape = params.shape;
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    for ex in batch {
        schedule.check_timestep(ex.t, 1)?;
        if ex.source.is_empty() || ex.target.is_empty() || ex.target.len() > shape.n_max {
            return Err(Error::config(format!("sequence lengths must be 1..={}", shape.n_max)));
        }
        if ex.noise.dim() != (ex.target.len(), shape.dim) {
            return Err(Error::shape(format!("{} × {}", ex.target.len(), shape.dim), format!("{:?}", ex.noise.dim())));
        }
        if let Some(&bad) = ex.source.iter().chain(&ex.target).find(|&&t| t >= shape.vocab) {
            return Err(Error::Token { index: bad, vocab: shape.vocab });
        }
    }
    let table = params.embedding.vectors();
    let d = shape.dim;
    let sources: Vec<&[usize]> = batch.iter().map(|e| e.source.as_slice()).collect();
    let src = SourceBatch::new(&sources);
    let enc = network::encode(params, &src);

    let targets: Vec<usize> = batch.iter().flat_map(|e| e.target.iter().copied()).collect();
    let z0 = table.select(Axis(0), &targets);
    let mut z_t_blocks = Vec::with_capacity(batch.len());
    let mut row = 0;
    for ex in batch {
        let n = ex.target.len();
        let (sa, sb) = (schedule.alpha_bar(ex.t).sqrt(), schedule.beta_bar(ex.t).sqrt());
        z_t_blocks.push(&z0.slice(s![row..row + n, ..]) * sa + &ex.noise * sb);
        row += n;
    }
    let input = build_input(
        &shape,
        schedule,
        batch.iter().zip(&z_t_blocks).map(|(ex, z)| (z.view(), ex.t, ex.prev.as_ref().map(|p| p.view()))),
    );
    let (out, cache) = network::denoise(params, &src, &enc, &input);

    let rows = targets.len() as f64;
    let scale = settings.scale;
    let mut grads = DenoiserParameters::zeros(shape);

    // L_vlb
    let diff = &out - &z0;
    let vlb = diff.iter().map(|v| v * v).sum::<f64>() / (rows * d as f64);
    let mut d_out = &diff * (2.0 * scale / (rows * d as f64));
    let mut d_z0 = -&d_out;

    // rounding-head term
    let mut head = 0.0;
    let head_input = match settings.mode {
        LossMode::VlbOnly => None,
        LossMode::Anchor => Some(&out),
        LossMode::Text => Some(&z0),
    };
    if let Some(z) = head_input {
        let eps = if settings.mode == LossMode::Anchor { settings.label_smoothing } else { 0.0 };
        let logits = z.dot(&table.t());
        let mut d_logits = Array2::zeros(logits.raw_dim());
        for (i, &y) in targets.iter().enumerate() {
            let (l, g) = cross_entropy(logits.row(i), y, eps);
            head += l;
            d_logits.row_mut(i).assign(&(g * (scale / rows)));
        }
        head /= rows;
        let d_z = d_logits.dot(&table);
        match settings.mode {
            LossMode::Anchor => d_out += &d_z,
            _ => d_z0 += &d_z,
        }
        ndarray::linalg::general_mat_mul(1.0, &d_logits.t(), z, 1.0, grads.embedding.vectors_mut());
    }

    // length prediction
    let mut length = 0.0;
    let b = batch.len() as f64;
    let mut d_len = Array2::zeros(enc.length_logits.raw_dim());
    for (i, ex) in batch.iter().enumerate() {
        let (l, g) = cross_entropy(enc.length_logits.row(i), ex.target.len() - 1, settings.label_smoothing);
        length += l;
        if settings.lambda_len != 0.0 {
            d_len.row_mut(i).assign(&(g * (settings.lambda_len * scale / b)));
        }
    }
    length /= b;

    let d_z_in = network::backward(params, &src, &enc, &input, &cache, d_out.view(), d_len.view(), &mut grads);
    // z_in = c_in (√ᾱ z_0 + √β̄ ε)
    let mut row = 0;
    for ex in batch {
        let n = ex.target.len();
        let k = input_scale(schedule, ex.t) * schedule.alpha_bar(ex.t).sqrt();
        d_z0.slice_mut(s![row..row + n, ..]).scaled_add(k, &d_z_in.slice(s![row..row + n, ..d]));
        row += n;
    }
    let ge = grads.embedding.vectors_mut();
    for (g, &y) in d_z0.outer_iter().zip(&targets) {
        let mut dst = ge.row_mut(y);
        dst += &g;
    }

    let total = scale * (vlb + head + settings.lambda_len * length);
    let parts = LossParts { vlb, anchor: head, length, total };
    if !total.is_finite() {
        return Err(Error::NonFinite { step: 0, detail: format!("{parts:?}") });
    }
    Ok((parts, grads))
}

/// The tiny gradient-check problem: `V = 11, d = 4, d_model = 8`, two
/// examples with target length 3 on a rescaled sqrt schedule.
pub fn gradcheck_case(
    self_conditioning: bool,
    seed: u64,
) -> Result<(DenoiserParameters, NoiseSchedule, Vec<TrainingExample>)> {
    let shape = ModelShape { vocab: 11, dim: 4, d_model: 8, n_max: 5, self_conditioning };
    let params = DenoiserParameters::init(shape, 1.0, seed)?;
    let schedule = build_schedule(ScheduleKind::Sqrt, 20)?.rescale(2.0, false)?;
    let batch = (0..2u64)
        .map(|i| {
            let noise =
                Array2::from_shape_vec((3, 4), rng::normals(seed + 5, Purpose::TrainNoise, &[i], 12)).expect("3 × 4");
            let prev = self_conditioning.then(|| noise.mapv(|v| 0.5 * v.sin()));
            let k = i as usize;
            TrainingExample { source: vec![4 + k, 7, 9, 5], target: vec![6, 10, 4 + k], t: 3 + 7 * k, noise, prev }
        })
        .collect();
    Ok((params, schedule, batch))
}

/// Largest relative error of analytic against central-difference gradients
/// for one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tensor: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares every tensor's analytic gradient with five-point central
/// differences of step `h` (truncation error `O(h⁴)`), on at most
/// `per_tensor` entries per tensor (all if 0). The
/// relative error of an entry is `|a − n| / max(|a| + |n|, floor)`, with a
/// small floor so entries whose true gradient is zero are compared in
/// absolute terms.
pub fn gradcheck(
    params: &DenoiserParameters,
    schedule: &NoiseSchedule,
    batch: &[TrainingExample],
    settings: &LossSettings,
    h: f64,
    per_tensor: usize,
) -> Result<Vec<GradcheckReport>> {
    let (_, grads) = loss_and_grad(params, schedule, batch, settings)?;
    let analytic: Vec<(String, Array2<f64>)> =
        grads.tensors().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let mut work = params.clone();
    let mut reports = Vec::new();
    for (ti, (name, ga)) in analytic.iter().enumerate() {
        let len = ga.len();
        let stride = if per_tensor == 0 || len <= per_tensor { 1 } else { len.div_ceil(per_tensor) };
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for flat in (0..len).step_by(stride) {
            let (r, c) = (flat / ga.ncols(), flat % ga.ncols());
            let orig = params.tensors()[ti].1[[r, c]];
            let eval = |work: &mut DenoiserParameters, v: f64| -> Result<f64> {
                work.tensors_mut()[ti].1[[r, c]] = v;
                Ok(loss_and_grad(work, schedule, batch, settings)?.0.total)
            };
            let (p1, m1) = (eval(&mut work, orig + h)?, eval(&mut work, orig - h)?);
            let (p2, m2) = (eval(&mut work, orig + 2.0 * h)?, eval(&mut work, orig - 2.0 * h)?);
            work.tensors_mut()[ti].1[[r, c]] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = ga[[r, c]];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
        reports.push(GradcheckReport { tensor: name.clone(), max_rel_error: worst, checked });
    }
    Ok(reports)
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub vocab: usize,
    pub dim: usize,
    pub d_model: usize,
    /// Source lengths are drawn from `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    pub n_max: usize,
    pub sigma_e: f64,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub factor: f64,
    pub vp: bool,
    /// When positive, `factor` is replaced by the searched factor for this
    /// threshold, measured on the initial embedding table.
    pub dgs_max: f64,
    pub loss_mode: LossMode,
    pub self_conditioning: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub lambda_len: f64,
    pub label_smoothing: f64,
    pub log_interval: usize,
    pub val_size: usize,
    pub val_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Cipher,
            vocab: 64,
            dim: 16,
            d_model: 64,
            min_len: 4,
            max_len: 16,
            n_max: 24,
            sigma_e: 1.0,
            schedule: ScheduleKind::Sqrt,
            diffusion_steps: 200,
            factor: 1.0,
            vp: false,
            dgs_max: 0.0,
            loss_mode: LossMode::Anchor,
            self_conditioning: false,
            lr: 5e-4,
            batch_size: 64,
            steps: 5000,
            warmup: 500,
            seed: 0,
            grad_clip: 1.0,
            weight_decay: 0.01,
            lambda_len: 0.1,
            label_smoothing: 0.1,
            log_interval: 500,
            val_size: 64,
            val_k: 20,
        }
    }
}

macro_rules! config_fields {
    ($($field:ident),* $(,)?) => {
        impl TrainConfig {
            /// Field names, which are also the configuration-file keys.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Applies `key = value` overrides; unknown keys are errors.
            pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
                for (key, value) in kv.iter() {
                    match key {
                        $(stringify!($field) => {
                            self.$field = value.parse().map_err(|_| {
                                Error::config(format!("invalid value `{value}` for key `{key}`"))
                            })?;
                        })*
                        other => return Err(Error::config(format!("unknown configuration key `{other}`"))),
                    }
                }
                Ok(())
            }

            /// All fields as `key = value` lines, in declaration order.
            pub fn to_key_values(&self) -> KeyValues {
                let mut kv = KeyValues::default();
                $(kv.push(stringify!($field), self.$field.to_string()).expect("distinct keys");)*
                kv
            }
        }
    };
}

config_fields!(
    task,
    vocab,
    dim,
    d_model,
    min_len,
    max_len,
    n_max,
    sigma_e,
    schedule,
    diffusion_steps,
    factor,
    vp,
    dgs_max,
    loss_mode,
    self_conditioning,
    lr,
    batch_size,
    steps,
    warmup,
    seed,
    grad_clip,
    weight_decay,
    lambda_len,
    label_smoothing,
    log_interval,
    val_size,
    val_k,
);

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl TrainConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            vocab: self.vocab,
            dim: self.dim,
            d_model: self.d_model,
            n_max: self.n_max,
            self_conditioning: self.self_conditioning,
        }
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            mode: self.loss_mode,
            lambda_len: self.lambda_len,
            label_smoothing: self.label_smoothing,
            scale: 1.0,
        }
    }

    pub fn sampler(&self) -> Result<TaskSampler> {
        TaskSampler::new(self.task, self.vocab, self.min_len, self.max_len, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().validate()?;
        if self.max_len > self.n_max {
            return Err(Error::config(format!("max_len {} exceeds n_max {}", self.max_len, self.n_max)));
        }
        if self.batch_size == 0 || self.diffusion_steps == 0 || self.log_interval == 0 {
            return Err(Error::config("batch_size, diffusion_steps and log_interval must be positive"));
        }
        if !(self.factor >= 1.0) || !(self.sigma_e > 0.0) || !(self.lr >= 0.0) {
            return Err(Error::config("need factor ≥ 1, sigma_e > 0 and lr ≥ 0"));
        }
        if self.val_k == 0 || self.val_k > self.diffusion_steps {
            return Err(Error::config(format!("val_k must lie in 1..={}", self.diffusion_steps)));
        }
        Ok(())
    }

    /// The training schedule; searches the factor first when `dgs_max > 0`.
    pub fn build_schedule(&self, params: &DenoiserParameters) -> Result<NoiseSchedule> {
        let base = build_schedule(self.schedule, self.diffusion_steps)?;
        let factor = if self.dgs_max > 0.0 {
            let settings = SearchSettings { dgs_max: self.dgs_max, vp: self.vp, ..SearchSettings::default() };
            let mc = MonteCarlo { seed: self.seed, ..MonteCarlo::default() };
            search_factor(&base, &params.embedding, &settings, &mc)?.factor
        } else {
            self.factor
        };
        base.rescale(factor, self.vp)
    }
}

/// One line of the metrics log. Loss columns are means over the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub loss_vlb: f64,
    /// `L_anchor` in anchor mode, `L_round` in text mode, 0 otherwise.
    pub loss_anchor: f64,
    pub loss_len: f64,
    pub ani: f64,
    pub val_acc: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "step,loss,loss_vlb,loss_anchor,loss_len,ani,val_acc";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss, self.loss_vlb, self.loss_anchor, self.loss_len, self.ani, self.val_acc
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub steps_done: usize,
}

struct AdamW {
    m: DenoiserParameters,
    v: DenoiserParameters,
    t: i32,
}

const ADAM_BETAS: (f64, f64) = (0.9, 0.98);
const ADAM_EPS: f64 = 1e-8;

fn is_bias(name: &str) -> bool {
    name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2")
}

impl AdamW {
    fn new(shape: ModelShape) -> Self {
        AdamW { m: DenoiserParameters::zeros(shape), v: DenoiserParameters::zeros(shape), t: 0 }
    }

    fn step(&mut self, params: &mut DenoiserParameters, grads: &DenoiserParameters, lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((name, p), (_, g)), (_, m)), (_, v)) in
            params.tensors_mut().into_iter().zip(grads.tensors()).zip(ms).zip(vs)
        {
            let decay = if is_bias(name) { 0.0 } else { weight_decay };
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * ((*m / c1) / ((*v / c2).sqrt() + ADAM_EPS) + decay * *p);
            });
        }
    }
}

fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup == 0 {
        cfg.lr
    } else {
        cfg.lr * ((step + 1) as f64 / cfg.warmup as f64).min(1.0)
    }
}

/// Draws the timesteps, noise and self-conditioning inputs for one batch.
pub(crate) fn prepare_batch(
    model: &Model,
    cfg: &TrainConfig,
    sampler: &TaskSampler,
    step: usize,
) -> Result<Vec<TrainingExample>> {
    let pairs = sampler.batch(cfg.batch_size, cfg.seed, step as u64);
    let mut rng = rng::stream(cfg.seed, Purpose::TrainNoise, &[step as u64]);
    let mut batch: Vec<TrainingExample> = pairs
        .into_iter()
        .map(|pair| {
            let t = rng.random_range(1..=cfg.diffusion_steps);
            let mut noise = Array2::zeros((pair.target.len(), cfg.dim));
            rng::fill_normal(&mut rng, noise.as_slice_mut().expect("contiguous"));
            TrainingExample { source: pair.source, target: pair.target, t, noise, prev: None }
        })
        .collect();
    if cfg.self_conditioning && rng.random_bool(0.5) {
        let table = model.params.embedding.vectors();
        let z_t: Vec<Array2<f64>> = batch
            .iter()
            .map(|ex| {
                let z0 = table.select(Axis(0), &ex.target);
                let (sa, sb) = (model.schedule.alpha_bar(ex.t).sqrt(), model.schedule.beta_bar(ex.t).sqrt());
                z0 * sa + &ex.noise * sb
            })
            .collect();
        let items: Vec<_> = batch
            .iter()
            .zip(&z_t)
            .map(|(ex, z)| super::DenoiseItem { source: &ex.source, z_t: z.view(), t: ex.t, prev: None })
            .collect();
        let prev = model.denoise_many(&items)?;
        for (ex, p) in batch.iter_mut().zip(prev) {
            ex.prev = Some(p);
        }
    }
    Ok(batch)
}

/// Trains a model from scratch. Deterministic in `cfg.seed`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// [`train`] with a callback invoked on every logged metrics row.
pub fn train_with(cfg: &TrainConfig, mut on_log: impl FnMut(&MetricsRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = DenoiserParameters::init(cfg.shape(), cfg.sigma_e, cfg.seed)?;
    let schedule = cfg.build_schedule(&params)?;
    let mut model = Model::new(params, schedule);
    let sampler = cfg.sampler()?;
    let validation = sampler.validation(cfg.val_size, cfg.seed);
    let settings = cfg.loss_settings();
    let decode = DecodeOptions { k: cfg.val_k, early_stop: 0, ..DecodeOptions::default() };
    let mut opt = AdamW::new(cfg.shape());
    let mut metrics = Vec::new();
    let mut interval = (LossParts::default(), 0usize);

    for step in 0..cfg.steps {
        let batch = prepare_batch(&model, cfg, &sampler, step)?;
        let (parts, mut grads) =
            loss_and_grad(&model.params, &model.schedule, &batch, &settings).map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
                other => other,
            })?;
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite { step, detail: "gradient norm".into() });
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / norm);
        }
        opt.step(&mut model.params, &grads, learning_rate(cfg, step), cfg.weight_decay);

        let acc = &mut interval.0;
        acc.total += parts.total;
        acc.vlb += parts.vlb;
        acc.anchor += parts.anchor;
        acc.length += parts.length;
        interval.1 += 1;
        if (step + 1) % cfg.log_interval == 0 || step + 1 == cfg.steps {
            let n = interval.1 as f64;
            let row = MetricsRow {
                step: step + 1,
                loss: interval.0.total / n,
                loss_vlb: interval.0.vlb / n,
                loss_anchor: interval.0.anchor / n,
                loss_len: interval.0.length / n,
                ani: model.params.embedding.anisotropy().unwrap_or(f64::NAN),
                val_acc: decoding::evaluate(&model, &validation, &decode, cfg.seed)?.token_accuracy,
            };
            on_log(&row);
            metrics.push(row);
            interval = (LossParts::default(), 0);
        }
    }
    Ok(TrainOutcome { config: cfg.clone(), model, metrics, steps_done: cfg.steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(self_conditioning: bool) -> (DenoiserParameters, NoiseSchedule, Vec<TrainingExample>) {
        gradcheck_case(self_conditioning, 4).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for sc in [false, true] {
            for mode in LossMode::ALL {
                let (params, schedule, batch) = tiny(sc);
                let settings = LossSettings { mode, ..LossSettings::default() };
                for r in gradcheck(&params, &schedule, &batch, &settings, 1e-3, 0).unwrap() {
                    assert!(r.max_rel_error <= 1e-4, "{mode:?} sc={sc} {}: {}", r.tensor, r.max_rel_error);
                }
            }
        }
    }

    #[test]
    fn unused_length_head_has_zero_gradient() {
        let (params, schedule, batch) = tiny(false);
        let settings = LossSettings { lambda_len: 0.0, ..LossSettings::default() };
        let (_, g) = loss_and_grad(&params, &schedule, &batch, &settings).unwrap();
        assert!(g.length_w.iter().chain(g.length_b.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_the_scale_doubles_gradients() {
        let (params, schedule, batch) = tiny(true);
        let one = LossSettings::default();
        let two = LossSettings { scale: 2.0, ..one };
        let (l1, g1) = loss_and_grad(&params, &schedule, &batch, &one).unwrap();
        let (l2, g2) = loss_and_grad(&params, &schedule, &batch, &two).unwrap();
        assert_eq!(l2.total, 2.0 * l1.total);
        for ((_, a), (_, b)) in g1.tensors().into_iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let cfg = TrainConfig {
            task: Task::Dedup,
            loss_mode: LossMode::Text,
            lr: 1.5e-3,
            vp: true,
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_key_values(&cfg.to_key_values()).unwrap();
        assert_eq!(back, cfg);
        let bad = KeyValues::parse("lerning_rate = 1").unwrap();
        assert!(TrainConfig::from_key_values(&bad).is_err());
    }
}
