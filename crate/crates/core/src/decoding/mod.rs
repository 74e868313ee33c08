//! Generation from a trained model.
//!
//! Decoding starts from noise at `τ_K = T` and alternates `ẑ_0` prediction
//! with posterior steps down a subsampled trajectory `τ_1 < … < τ_K`. The
//! result is the rounded `ẑ_0` of the last prediction made; stopping early
//! simply makes fewer predictions. Every candidate owns a noise stream keyed
//! by `(seed, item, length-beam rank, noise index)`, so candidates do not
//! depend on each other or on batch composition.

mod metrics;

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{bleu, diversity_ngram, mbr_index, mbr_risks, token_accuracy};

use crate::denoiser::{DenoiseItem, Model, Pair};
use crate::diffusion::posterior_sample_between;
use crate::embeddings::argmax;
use crate::rng::{self, Purpose};
use crate::schedules::{build_schedule, subsample_trajectory};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    /// Number of trajectory points `K`.
    pub k: usize,
    /// Predictions skipped at the end of the trajectory.
    pub early_stop: usize,
    /// Length beam `b1`.
    pub b1: usize,
    /// Noise beam `b2`.
    pub b2: usize,
    /// Rescales the noise of the sampling schedule only (1 = off). The
    /// model keeps the schedule it was trained with; this exists to show
    /// that rescaling at sampling time alone does not help.
    pub sampling_factor: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { k: 20, early_stop: 5, b1: 1, b2: 1, sampling_factor: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeCandidate {
    pub tokens: Vec<usize>,
    pub length_beam_rank: usize,
    pub noise_seed: u64,
    /// MBR risk, set by [`mbr_select`].
    pub risk: Option<f64>,
    /// Rounded `ẑ_0` after every prediction, when requested.
    pub snapshots: Option<Vec<Vec<usize>>>,
}

struct Job<'a> {
    source: &'a [usize],
    length: usize,
    key: [u64; 3],
}

fn sampling_model(model: &Model, opts: &DecodeOptions) -> Result<Option<Model>> {
    if opts.sampling_factor == 1.0 {
        return Ok(None);
    }
    let base = build_schedule(model.schedule.kind(), model.schedule.steps())?;
    Ok(Some(Model::new(model.params.clone(), base.rescale(opts.sampling_factor, false)?)))
}

fn check_options(model: &Model, opts: &DecodeOptions) -> Result<()> {
    let steps = model.schedule.steps();
    if opts.k == 0 || opts.k > steps {
        return Err(Error::config(format!("need 1 ≤ K ≤ T = {steps}, got K = {}", opts.k)));
    }
    if opts.early_stop >= opts.k {
        return Err(Error::config(format!("early stop {} must be smaller than K = {}", opts.early_stop, opts.k)));
    }
    if opts.b1 == 0 || opts.b2 == 0 || opts.b1 > model.shape().n_max {
        return Err(Error::config(format!("need b1, b2 ≥ 1 and b1 ≤ n_max, got ({}, {})", opts.b1, opts.b2)));
    }
    Ok(())
}

fn round(model: &Model, z0_hat: ArrayView2<'_, f64>) -> Vec<usize> {
    let logits = z0_hat.dot(&model.params.embedding.vectors().t());
    logits.outer_iter().map(|row| argmax(row)).collect()
}

/// Runs all jobs in lockstep, batching the network calls.
fn generate(
    model: &Model,
    jobs: &[Job<'_>],
    opts: &DecodeOptions,
    seed: u64,
    snapshots: bool,
) -> Result<Vec<DecodeCandidate>> {
    check_options(model, opts)?;
    let alt = sampling_model(model, opts)?;
    let model = alt.as_ref().unwrap_or(model);
    let schedule = &model.schedule;
    let d = model.shape().dim;
    let taus = subsample_trajectory(schedule.steps(), opts.k)?;
    let start_sd = schedule.beta_bar(schedule.steps()).sqrt();

    let mut rngs: Vec<ChaCha8Rng> = jobs.iter().map(|j| rng::stream(seed, Purpose::DecodeNoise, &j.key)).collect();
    let draw = |rng: &mut ChaCha8Rng, n: usize| {
        let mut a = Array2::zeros((n, d));
        rng::fill_normal(rng, a.as_slice_mut().expect("contiguous"));
        a
    };
    let mut z: Vec<Array2<f64>> = jobs.iter().zip(&mut rngs).map(|(j, r)| draw(r, j.length) * start_sd).collect();
    let mut prev: Option<Vec<Array2<f64>>> = None;
    let mut history: Vec<Vec<Vec<usize>>> = vec![Vec::new(); jobs.len()];
    let predictions = opts.k - opts.early_stop;
    let mut last = Vec::new();

    for (done, i) in (0..opts.k).rev().enumerate() {
        let t = taus[i];
        let items: Vec<DenoiseItem<'_>> = jobs
            .iter()
            .enumerate()
            .map(|(j, job)| DenoiseItem {
                source: job.source,
                z_t: z[j].view(),
                t,
                prev: prev.as_ref().map(|p| p[j].view()),
            })
            .collect();
        let z0_hat = model.denoise_many(&items)?;
        if snapshots {
            for (h, x) in history.iter_mut().zip(&z0_hat) {
                h.push(round(model, x.view()));
            }
        }
        if done + 1 == predictions {
            last = z0_hat;
            break;
        }
        let s = if i == 0 { 0 } else { taus[i - 1] };
        for (j, rng) in rngs.iter_mut().enumerate() {
            let noise = draw(rng, jobs[j].length);
            z[j] = posterior_sample_between(z[j].view(), z0_hat[j].view(), s, t, schedule, noise.view())?.values;
        }
        if model.shape().self_conditioning {
            prev = Some(z0_hat);
        }
    }

    Ok(jobs
        .iter()
        .zip(last)
        .zip(history)
        .map(|((job, x), h)| DecodeCandidate {
            tokens: round(model, x.view()),
            length_beam_rank: job.key[1] as usize,
            noise_seed: job.key[2],
            risk: None,
            snapshots: snapshots.then_some(h),
        })
        .collect())
}

/// One candidate of the given length.
pub fn reverse_generate(
    model: &Model,
    source: &[usize],
    opts: &DecodeOptions,
    length: usize,
    seed: u64,
) -> Result<DecodeCandidate> {
    check_length(model, length)?;
    let job = Job { source, length, key: [0, 0, 0] };
    Ok(generate(model, &[job], opts, seed, false)?.pop().expect("one job"))
}

fn check_length(model: &Model, length: usize) -> Result<()> {
    if length == 0 || length > model.shape().n_max {
        return Err(Error::config(format!("length must lie in 1..={}, got {length}", model.shape().n_max)));
    }
    Ok(())
}

/// The `b` most likely lengths, most likely first (shorter on ties).
pub fn top_lengths(model: &Model, source: &[usize], b: usize) -> Result<Vec<usize>> {
    let logits = model.predict_length(source)?;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(b).map(|i| i + 1).collect())
}

fn beam_jobs<'a>(model: &Model, item: u64, source: &'a [usize], opts: &DecodeOptions) -> Result<Vec<Job<'a>>> {
    let lengths = top_lengths(model, source, opts.b1)?;
    Ok(lengths
        .iter()
        .enumerate()
        .flat_map(|(rank, &length)| {
            (0..opts.b2).map(move |noise| Job { source, length, key: [item, rank as u64, noise as u64] })
        })
        .collect())
}

/// `b1 × b2` candidates: top-`b1` predicted lengths crossed with `b2`
/// noise draws, ordered by (length rank, noise index).
pub fn parallel_decode(
    model: &Model,
    source: &[usize],
    opts: &DecodeOptions,
    seed: u64,
) -> Result<Vec<DecodeCandidate>> {
    let jobs = beam_jobs(model, 0, source, opts)?;
    generate(model, &jobs, opts, seed, false)
}

/// Fills every candidate's risk and returns the index of the MBR choice.
pub fn mbr_select(candidates: &mut [DecodeCandidate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::config("MBR selection needs at least one candidate"));
    }
    let seqs: Vec<&[usize]> = candidates.iter().map(|c| c.tokens.as_slice()).collect();
    let risks = mbr_risks(&seqs);
    for (c, r) in candidates.iter_mut().zip(&risks) {
        c.risk = Some(*r);
    }
    Ok(mbr_index(&risks).expect("non-empty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub bleu: f64,
    /// Fraction of selected outputs whose length equals the reference's.
    pub length_accuracy: f64,
}

fn score(outputs: &[Vec<usize>], pairs: &[Pair]) -> EvalReport {
    let n = pairs.len().max(1) as f64;
    let mut r = EvalReport { token_accuracy: 0.0, exact_match: 0.0, bleu: 0.0, length_accuracy: 0.0 };
    for (out, pair) in outputs.iter().zip(pairs) {
        r.token_accuracy += token_accuracy(out, &pair.target);
        r.exact_match += (out == &pair.target) as u8 as f64;
        r.bleu += bleu(out, &[&pair.target], 4);
        r.length_accuracy += (out.len() == pair.target.len()) as u8 as f64;
    }
    r.token_accuracy /= n;
    r.exact_match /= n;
    r.bleu /= n;
    r.length_accuracy /= n;
    r
}

/// Decodes every source with `b1 × b2` candidates and MBR selection, and
/// scores the selections against the targets.
pub fn evaluate(model: &Model, pairs: &[Pair], opts: &DecodeOptions, seed: u64) -> Result<EvalReport> {
    Ok(score(&decode_all(model, pairs, opts, seed)?, pairs))
}

/// The MBR-selected output for every source.
pub fn decode_all(model: &Model, pairs: &[Pair], opts: &DecodeOptions, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut jobs = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        jobs.extend(beam_jobs(model, i as u64, &pair.source, opts)?);
    }
    let mut candidates = generate(model, &jobs, opts, seed, false)?;
    let per = opts.b1 * opts.b2;
    candidates
        .chunks_mut(per)
        .map(|group| {
            let best = mbr_select(group)?;
            Ok(group[best].tokens.clone())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsPoint {
    /// 1-based prediction index along the reverse process.
    pub step: usize,
    pub t: usize,
    pub token_accuracy: f64,
    pub bleu: f64,
}

/// Scores the rounded `ẑ_0` after each of the `K` predictions of a full
/// (no early stop) reverse process with the predicted length.
pub fn quality_dynamics(model: &Model, pairs: &[Pair], k: usize, seed: u64) -> Result<Vec<DynamicsPoint>> {
    let opts = DecodeOptions { k, early_stop: 0, b1: 1, b2: 1, sampling_factor: 1.0 };
    let mut jobs = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        jobs.extend(beam_jobs(model, i as u64, &pair.source, &opts)?);
    }
    let candidates = generate(model, &jobs, &opts, seed, true)?;
    let taus = subsample_trajectory(model.schedule.steps(), k)?;
    Ok((0..k)
        .map(|step| {
            let outputs: Vec<Vec<usize>> =
                candidates.iter().map(|c| c.snapshots.as_ref().expect("recorded")[step].clone()).collect();
            let r = score(&outputs, pairs);
            DynamicsPoint { step: step + 1, t: taus[k - 1 - step], token_accuracy: r.token_accuracy, bleu: r.bleu }
        })
        .collect())
}
