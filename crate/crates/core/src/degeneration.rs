//! Degeneration analysis.
//!
//! The degenerated model ignores the condition and the other positions: it
//! maps every noised embedding to the vocabulary entry with the smallest
//! classification loss. Its accuracy under a noise schedule, averaged over
//! timesteps, is the degeneration score (DGS). A schedule whose DGS is high
//! lets a denoiser score well without using context; noise rescaling
//! increases `F` until the DGS drops below a threshold.
//!
//! The classifier always sees the latent mapped back to the data scale,
//! `z_t / √ᾱ_t`, so its decision depends on the schedule only through the
//! noise ratio `√(β̄_t/ᾱ_t)`.
//!
//! Randomness: the embedding rows evaluated come from the stream
//! `(seed, DgsRows)`, and the noise for timestep `t`, row `i` and draw `k`
//! from `(seed, DgsNoise, [t, i, k])`. Work is split into fixed-size row
//! chunks and per-chunk integer counts are summed, so results are identical
//! for any number of worker threads.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{log_sum_exp, mean_sq_dist, EmbeddingTable};
use crate::rng::{self, Purpose};
use crate::schedules::{NoiseSchedule, ScheduleSpec};
use crate::{Error, Result};

const CHUNK_ROWS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    /// Smallest mean squared distance.
    #[default]
    NearestNeighbor,
    /// Smallest squared distance plus rounding-head negative log-likelihood.
    FullLoss,
}

impl std::str::FromStr for Classifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest_neighbor" | "nn" => Ok(Classifier::NearestNeighbor),
            "full_loss" | "full" => Ok(Classifier::FullLoss),
            other => Err(Error::config(format!("unknown classifier `{other}`"))),
        }
    }
}

/// Monte-Carlo settings shared by every estimator in this module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    /// Noise draws per (row, timestep).
    pub samples: usize,
    /// Rows of the table evaluated; the search itself always scans all `V`.
    pub max_rows: usize,
    pub seed: u64,
    pub classifier: Classifier,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        MonteCarlo { samples: 4, max_rows: 2000, seed: 0, classifier: Classifier::NearestNeighbor }
    }
}

/// A Gaussian embedding table described by its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    pub vocab: usize,
    pub dim: usize,
    pub sigma_e: f64,
    pub seed: u64,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig { vocab: 10_000, dim: 128, sigma_e: 1.0, seed: 0 }
    }
}

impl TableConfig {
    pub fn build(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::init_gaussian(self.vocab, self.dim, self.sigma_e, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgsReport {
    pub schedule: ScheduleSpec,
    pub timesteps: Vec<usize>,
    pub dgs_t: Vec<f64>,
    pub dgs: f64,
    pub mc: MonteCarlo,
    pub rows_evaluated: usize,
    pub vocab: usize,
    pub dim: usize,
    pub sigma_e: f64,
}

/// Position-wise degenerated model on latents already in the data scale.
pub fn degenerated_model(z: ArrayView2<'_, f64>, table: &EmbeddingTable, classifier: Classifier) -> Result<Vec<usize>> {
    z.outer_iter()
        .map(|row| match classifier {
            Classifier::NearestNeighbor => table.nearest_neighbor(row),
            Classifier::FullLoss => table.min_loss_token(row),
        })
        .collect()
}

/// Timestep grid `𝒯`: midpoints of `grid_size` equal slices of `[0, T]`,
/// rounded to integers.
pub fn dgs_grid(steps: usize, grid_size: usize) -> Result<Vec<usize>> {
    if grid_size < 2 || grid_size > steps {
        return Err(Error::config(format!("need 2 ≤ grid size ≤ T, got grid {grid_size}, T = {steps}")));
    }
    Ok((0..grid_size).map(|i| ((2 * i + 1) * steps + grid_size) / (2 * grid_size)).collect())
}

/// The rows evaluated by the estimators, in ascending order.
pub fn evaluation_rows(vocab: usize, mc: &MonteCarlo) -> Vec<usize> {
    if mc.max_rows == 0 || vocab <= mc.max_rows {
        return (0..vocab).collect();
    }
    let mut rng = rng::stream(mc.seed, Purpose::DgsRows, &[vocab as u64]);
    let mut rows = index::sample(&mut rng, vocab, mc.max_rows).into_vec();
    rows.sort_unstable();
    rows
}

fn noise_block(seed: u64, t: usize, rows: &[usize], draw: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut dst, &row) in out.outer_iter_mut().zip(rows) {
        let mut r = rng::stream(seed, Purpose::DgsNoise, &[t as u64, row as u64, draw as u64]);
        rng::fill_normal(&mut r, dst.as_slice_mut().expect("row-major"));
    }
    out
}

/// Decision scores: the classifier picks `argmin_j (a·‖e_j‖² − b·x·e_j)`.
fn score_weights(classifier: Classifier, dim: usize) -> (f64, f64) {
    match classifier {
        Classifier::NearestNeighbor => (1.0, 2.0),
        Classifier::FullLoss => {
            let d = dim as f64;
            (1.0 / d, 1.0 + 2.0 / d)
        }
    }
}

fn argmin_scores(dots: ArrayView1<'_, f64>, norms: &Array1<f64>, a: f64, b: f64) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, (&dot, &n)) in dots.iter().zip(norms.iter()).enumerate() {
        let score = a * n - b * dot;
        if score < best.1 {
            best = (j, score);
        }
    }
    best.0
}

struct Workspace<'a> {
    table: &'a EmbeddingTable,
    norms: Array1<f64>,
    rows: Vec<usize>,
}

impl<'a> Workspace<'a> {
    fn new(table: &'a EmbeddingTable, mc: &MonteCarlo) -> Self {
        Workspace { table, norms: table.row_norms_sq(), rows: evaluation_rows(table.vocab(), mc) }
    }

    fn chunks(&self) -> Vec<&[usize]> {
        self.rows.chunks(CHUNK_ROWS).collect()
    }

    /// Correct classifications at timestep `t` over all rows and draws.
    fn hits_at(&self, schedule: &NoiseSchedule, t: usize, mc: &MonteCarlo) -> u64 {
        let alpha = schedule.alpha_bar(t);
        let beta = schedule.beta_bar(t);
        let (sa, sb) = (alpha.sqrt(), beta.sqrt());
        let (a, b) = score_weights(mc.classifier, self.table.dim());
        let vectors = self.table.vectors();
        self.chunks()
            .par_iter()
            .map(|rows| {
                let clean = vectors.select(Axis(0), rows);
                let mut hits = 0u64;
                for draw in 0..mc.samples {
                    let eps = noise_block(mc.seed, t, rows, draw, self.table.dim());
                    // z_t = √ᾱ e_y + √β̄ ε, classified at data scale z_t / √ᾱ
                    let z = (&clean * sa + &eps * sb) / sa;
                    let dots = z.dot(&vectors.t());
                    for (i, &y) in rows.iter().enumerate() {
                        if argmin_scores(dots.row(i), &self.norms, a, b) == y {
                            hits += 1;
                        }
                    }
                }
                hits
            })
            .sum()
    }
}

/// `DGS_t`: accuracy of the degenerated model at timestep `t`.
pub fn dgs_at(schedule: &NoiseSchedule, t: usize, table: &EmbeddingTable, mc: &MonteCarlo) -> Result<f64> {
    schedule.check_timestep(t, 0)?;
    check_mc(mc)?;
    let ws = Workspace::new(table, mc);
    let total = (ws.rows.len() * mc.samples) as f64;
    Ok(ws.hits_at(schedule, t, mc) as f64 / total)
}

fn check_mc(mc: &MonteCarlo) -> Result<()> {
    if mc.samples == 0 {
        return Err(Error::config("Monte-Carlo estimate needs at least one sample"));
    }
    Ok(())
}

/// DGS over the timestep grid [`dgs_grid`].
pub fn compute_dgs(
    schedule: &NoiseSchedule,
    table: &EmbeddingTable,
    grid_size: usize,
    mc: &MonteCarlo,
) -> Result<DgsReport> {
    check_mc(mc)?;
    let timesteps = dgs_grid(schedule.steps(), grid_size)?;
    let ws = Workspace::new(table, mc);
    let total = (ws.rows.len() * mc.samples) as f64;
    let dgs_t: Vec<f64> = timesteps.iter().map(|&t| ws.hits_at(schedule, t, mc) as f64 / total).collect();
    Ok(report(schedule, table, timesteps, dgs_t, mc, ws.rows.len()))
}

fn report(
    schedule: &NoiseSchedule,
    table: &EmbeddingTable,
    timesteps: Vec<usize>,
    dgs_t: Vec<f64>,
    mc: &MonteCarlo,
    rows_evaluated: usize,
) -> DgsReport {
    let dgs = dgs_t.iter().sum::<f64>() / dgs_t.len() as f64;
    DgsReport {
        schedule: schedule.spec(),
        timesteps,
        dgs_t,
        dgs,
        mc: *mc,
        rows_evaluated,
        vocab: table.vocab(),
        dim: table.dim(),
        sigma_e: table.sigma_e(),
    }
}

/// For every `(t, row, draw)` of the grid, the noise scale at which the
/// nearest-neighbour decision first leaves the true token.
///
/// With `x = e_y + r·ε` the decision is correct iff
/// `‖e_y − e_j‖² + 2r ε·(e_y − e_j) > 0` for every `j ≠ y`, i.e. iff
/// `r < r* = min_{j : ε·(e_j − e_y) > 0} ‖e_y − e_j‖² / (2 ε·(e_j − e_y))`.
/// Nearest-neighbour cells are convex, so the draw stays correct for all
/// smaller noise scales. Once the radii are known, `DGS_t` of any schedule
/// on the same grid is a count, which makes the factor search cheap.
#[derive(Debug, Clone)]
pub struct ExitRadii {
    steps: usize,
    timesteps: Vec<usize>,
    samples: usize,
    rows: usize,
    // [grid][row][draw]
    radii: Vec<f64>,
    mc: MonteCarlo,
    vocab: usize,
    dim: usize,
    sigma_e: f64,
}

impl ExitRadii {
    pub fn compute(table: &EmbeddingTable, steps: usize, grid_size: usize, mc: &MonteCarlo) -> Result<Self> {
        check_mc(mc)?;
        if mc.classifier != Classifier::NearestNeighbor {
            return Err(Error::config("exit radii are only defined for the nearest-neighbour classifier"));
        }
        let timesteps = dgs_grid(steps, grid_size)?;
        let ws = Workspace::new(table, mc);
        let vectors = table.vectors();
        let chunks = ws.chunks();
        let per_chunk: Vec<Vec<f64>> = chunks
            .par_iter()
            .map(|rows| {
                let clean = vectors.select(Axis(0), rows);
                let gram = clean.dot(&vectors.t());
                let mut out = Vec::with_capacity(timesteps.len() * rows.len() * mc.samples);
                for &t in &timesteps {
                    for draw in 0..mc.samples {
                        let eps = noise_block(mc.seed, t, rows, draw, table.dim());
                        let proj = eps.dot(&vectors.t());
                        for (i, &y) in rows.iter().enumerate() {
                            out.push(exit_radius(y, gram.row(i), proj.row(i), &ws.norms));
                        }
                    }
                }
                out
            })
            .collect();

        // reorder chunk-major [t][draw][row] blocks into [t][row][draw]
        let (g, n, k) = (timesteps.len(), ws.rows.len(), mc.samples);
        let mut radii = vec![0.0; g * n * k];
        let mut offset = 0;
        for (chunk, values) in chunks.iter().zip(&per_chunk) {
            let c = chunk.len();
            for ti in 0..g {
                for draw in 0..k {
                    for i in 0..c {
                        radii[(ti * n + offset + i) * k + draw] = values[(ti * k + draw) * c + i];
                    }
                }
            }
            offset += c;
        }
        Ok(ExitRadii {
            steps,
            timesteps,
            samples: k,
            rows: n,
            radii,
            mc: *mc,
            vocab: table.vocab(),
            dim: table.dim(),
            sigma_e: table.sigma_e(),
        })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// The DGS report for `schedule`, which must have the same `T`.
    pub fn report(&self, schedule: &NoiseSchedule) -> Result<DgsReport> {
        if schedule.steps() != self.steps {
            return Err(Error::config(format!(
                "radii were computed for T = {}, schedule has T = {}",
                self.steps,
                schedule.steps()
            )));
        }
        let per_t = self.rows * self.samples;
        let dgs_t: Vec<f64> = self
            .timesteps
            .iter()
            .enumerate()
            .map(|(ti, &t)| {
                let r = schedule.noise_ratio(t);
                let block = &self.radii[ti * per_t..(ti + 1) * per_t];
                block.iter().filter(|&&limit| r < limit).count() as f64 / per_t as f64
            })
            .collect();
        let dgs = dgs_t.iter().sum::<f64>() / dgs_t.len() as f64;
        Ok(DgsReport {
            schedule: schedule.spec(),
            timesteps: self.timesteps.clone(),
            dgs_t,
            dgs,
            mc: self.mc,
            rows_evaluated: self.rows,
            vocab: self.vocab,
            dim: self.dim,
            sigma_e: self.sigma_e,
        })
    }
}

fn exit_radius(y: usize, gram: ArrayView1<'_, f64>, proj: ArrayView1<'_, f64>, norms: &Array1<f64>) -> f64 {
    let own = proj[y];
    let mut limit = f64::INFINITY;
    for j in 0..norms.len() {
        if j == y {
            continue;
        }
        let toward = proj[j] - own;
        if toward > 0.0 {
            let dist = norms[y] + norms[j] - 2.0 * gram[j];
            let r = dist / (2.0 * toward);
            if r < limit {
                limit = r;
            }
        }
    }
    limit
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    /// Exit radii for the nearest-neighbour classifier, direct re-estimation otherwise.
    #[default]
    Auto,
    /// Re-run the Monte-Carlo estimate for every candidate factor.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub dgs_max: f64,
    pub delta_f: f64,
    pub vp: bool,
    pub grid_size: usize,
    /// Give up once `F` exceeds this value.
    pub cap: f64,
    pub method: SearchMethod,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings { dgs_max: 0.15, delta_f: 0.5, vp: false, grid_size: 20, cap: 100.0, method: SearchMethod::Auto }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub factor: f64,
    pub dgs: f64,
    /// Every `(F, DGS)` pair visited, in order.
    pub trail: Vec<(f64, f64)>,
}

/// Smallest `F ∈ {1, 1+ΔF, 1+2ΔF, …}` whose rescaled schedule has
/// `DGS ≤ dgs_max`, scanning upward from 1.
pub fn search_factor(
    base: &NoiseSchedule,
    table: &EmbeddingTable,
    settings: &SearchSettings,
    mc: &MonteCarlo,
) -> Result<SearchResult> {
    if !(settings.delta_f > 0.0) {
        return Err(Error::config(format!("ΔF must be positive, got {}", settings.delta_f)));
    }
    if base.is_rescaled() {
        return Err(Error::config("factor search starts from an unrescaled schedule"));
    }
    let radii = match (settings.method, mc.classifier) {
        (SearchMethod::Auto, Classifier::NearestNeighbor) => {
            Some(ExitRadii::compute(table, base.steps(), settings.grid_size, mc)?)
        }
        _ => None,
    };
    let mut trail = Vec::new();
    for step in 0usize.. {
        let factor = 1.0 + step as f64 * settings.delta_f;
        if factor > settings.cap {
            let last_dgs = trail.last().map_or(f64::NAN, |&(_, d)| d);
            return Err(Error::SearchDiverged { cap: settings.cap, last_dgs });
        }
        let schedule = base.rescale(factor, settings.vp)?;
        let dgs = match &radii {
            Some(r) => r.report(&schedule)?.dgs,
            None => compute_dgs(&schedule, table, settings.grid_size, mc)?.dgs,
        };
        trail.push((factor, dgs));
        if dgs <= settings.dgs_max {
            return Ok(SearchResult { factor, dgs, trail });
        }
    }
    unreachable!("the factor cap ends the scan")
}

/// Monte-Carlo losses of the degenerated model at noise level `β̄`, with
/// `ᾱ = 1 − β̄`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaPoint {
    pub beta_bar: f64,
    /// Accuracy of the degenerated model.
    pub accuracy: f64,
    /// `L(f_dg(z_t), z_0)`: loss of the degenerated model's output.
    pub degenerated_loss: f64,
    /// `L(z_t, z_0)`: loss of the noised input against its own token.
    pub correct_loss: f64,
    /// `(1/d)‖z_t − e_j‖²` against a uniformly drawn wrong token `j`.
    pub wrong_distance: f64,
    /// `−log p(j | z_t)` for the same wrong token.
    pub wrong_nll: f64,
}

/// Degenerated-model losses at one noise level. Rows and noise follow
/// `mc`; the wrong token for each sample is drawn from the same stream.
pub fn deg_model_loss(beta_bar: f64, table: &EmbeddingTable, mc: &MonteCarlo) -> Result<LemmaPoint> {
    check_mc(mc)?;
    if !(0.0..=1.0).contains(&beta_bar) {
        return Err(Error::config(format!("β̄ must lie in [0, 1] for this check, got {beta_bar}")));
    }
    let alpha = 1.0 - beta_bar;
    let (sa, sb) = (alpha.sqrt(), beta_bar.sqrt());
    let ws = Workspace::new(table, mc);
    let vectors = table.vectors();
    let vocab = table.vocab();
    let (a, b) = score_weights(mc.classifier, table.dim());
    let key = beta_bar.to_bits();

    let sums: Vec<[f64; 5]> = ws
        .chunks()
        .par_iter()
        .map(|rows| {
            let clean = vectors.select(Axis(0), rows);
            let mut acc = [0.0; 5];
            for draw in 0..mc.samples {
                let mut eps = Array2::zeros((rows.len(), table.dim()));
                let mut wrong = Vec::with_capacity(rows.len());
                for (mut dst, &y) in eps.outer_iter_mut().zip(rows.iter()) {
                    let mut r = rng::stream(mc.seed, Purpose::LemmaNoise, &[key, y as u64, draw as u64]);
                    rng::fill_normal(&mut r, dst.as_slice_mut().expect("row-major"));
                    let j = rand::Rng::random_range(&mut r, 0..vocab - 1);
                    wrong.push(if j >= y { j + 1 } else { j });
                }
                let z = &clean * sa + &eps * sb;
                let logits = z.dot(&vectors.t());
                let picked: Vec<usize> = rows
                    .iter()
                    .enumerate()
                    // scores of z/√ᾱ scaled by √ᾱ: same decision, and defined at ᾱ = 0
                    .map(|(i, _)| argmin_scores(logits.row(i), &ws.norms, a * sa, b))
                    .collect();
                let picked_logits = vectors.select(Axis(0), &picked).dot(&vectors.t());
                for (i, &y) in rows.iter().enumerate() {
                    let zi = z.row(i);
                    let lse = log_sum_exp(logits.row(i));
                    let p = picked[i];
                    acc[0] += (p == y) as u8 as f64;
                    acc[1] += mean_sq_dist(vectors.row(p), vectors.row(y)) + log_sum_exp(picked_logits.row(i))
                        - picked_logits[[i, y]];
                    acc[2] += mean_sq_dist(zi, vectors.row(y)) + lse - logits[[i, y]];
                    acc[3] += mean_sq_dist(zi, vectors.row(wrong[i]));
                    acc[4] += lse - logits[[i, wrong[i]]];
                }
            }
            acc
        })
        .collect();
    let mut total = [0.0; 5];
    for part in &sums {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    let n = (ws.rows.len() * mc.samples) as f64;
    Ok(LemmaPoint {
        beta_bar,
        accuracy: total[0] / n,
        degenerated_loss: total[1] / n,
        correct_loss: total[2] / n,
        wrong_distance: total[3] / n,
        wrong_nll: total[4] / n,
    })
}

/// Fraction of draws on which the two classifiers pick the same token, at
/// the given noise levels `β̄` (with `ᾱ = 1 − β̄`).
pub fn classifier_agreement(table: &EmbeddingTable, beta_bars: &[f64], mc: &MonteCarlo) -> Result<f64> {
    check_mc(mc)?;
    let ws = Workspace::new(table, mc);
    let vectors = table.vectors();
    let (na, nb) = score_weights(Classifier::NearestNeighbor, table.dim());
    let (fa, fb) = score_weights(Classifier::FullLoss, table.dim());
    let mut same = 0u64;
    let mut total = 0u64;
    for (bi, &beta) in beta_bars.iter().enumerate() {
        let (sa, sb) = ((1.0 - beta).sqrt(), beta.sqrt());
        let counts: Vec<(u64, u64)> = ws
            .chunks()
            .par_iter()
            .map(|rows| {
                let clean = vectors.select(Axis(0), rows);
                let mut c = (0, 0);
                for draw in 0..mc.samples {
                    let eps = noise_block(mc.seed, usize::MAX - bi, rows, draw, table.dim());
                    let z = (&clean * sa + &eps * sb) / sa;
                    let dots = z.dot(&vectors.t());
                    for i in 0..rows.len() {
                        let nn = argmin_scores(dots.row(i), &ws.norms, na, nb);
                        let full = argmin_scores(dots.row(i), &ws.norms, fa, fb);
                        c.0 += (nn == full) as u64;
                        c.1 += 1;
                    }
                }
                c
            })
            .collect();
        for (s, t) in counts {
            same += s;
            total += t;
        }
    }
    Ok(same as f64 / total as f64)
}

/// `(t, DGS_t)` pairs of a report restricted to timesteps `≤ t_max`.
pub fn dgs_prefix(report: &DgsReport, t_max: usize) -> Vec<(usize, f64)> {
    report.timesteps.iter().copied().zip(report.dgs_t.iter().copied()).take_while(|&(t, _)| t <= t_max).collect()
}
