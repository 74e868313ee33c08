//! Forward process, closed-form posterior and training losses.
//!
//! The model predicts the clean latent `ẑ_0` directly. Losses are means
//! over positions and dimensions, and cross-entropy terms use the raw
//! dot-product logits of the tied rounding head.

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::embeddings::{log_softmax_at, EmbeddingTable};
use crate::schedules::NoiseSchedule;
use crate::{Error, Result};

/// A latent `z_t` for one sequence: `n × d` values at timestep `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub values: Array2<f64>,
    pub timestep: usize,
}

impl LatentSequence {
    pub fn new(values: Array2<f64>, timestep: usize) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::config("latent sequence must have at least one position"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: timestep, detail: format!("latent entry {pos}") });
        }
        Ok(LatentSequence { values, timestep })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// `q(z_{s} | z_t, z_0) = N(ξ z_0 + λ z_t, β̃ I)` between two timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorCoefficients {
    pub xi: f64,
    pub lambda: f64,
    pub beta_tilde: f64,
}

fn check_shape(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(format!("{}×{}", expected.0, expected.1), format!("{}×{}", actual.0, actual.1)));
    }
    Ok(())
}

/// `z_t = √ᾱ_t z_0 + √β̄_t ε` using the schedule's (possibly rescaled)
/// coefficients.
pub fn forward_sample(
    z0: ArrayView2<'_, f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: ArrayView2<'_, f64>,
) -> Result<LatentSequence> {
    schedule.check_timestep(t, 0)?;
    check_shape(z0.dim(), noise.dim())?;
    let (sa, sb) = (schedule.alpha_bar(t).sqrt(), schedule.beta_bar(t).sqrt());
    let values = Zip::from(&z0).and(&noise).map_collect(|&z, &e| sa * z + sb * e);
    Ok(LatentSequence { values, timestep: t })
}

/// Posterior coefficients from timestep `t` down to `t − 1`.
pub fn posterior_coefficients(schedule: &NoiseSchedule, t: usize) -> Result<PosteriorCoefficients> {
    schedule.check_timestep(t, 1)?;
    posterior_between(schedule, t - 1, t)
}

/// Posterior coefficients between any two timesteps `s < t`, as used by
/// subsampled trajectories.
///
/// With `α = ᾱ_t/ᾱ_s` and `β = β̄_t − α β̄_s` (the transition `s → t`
/// adds variance `β`), `ξ = √ᾱ_s β / β̄_t`, `λ = √α β̄_s / β̄_t` and
/// `β̃ = β β̄_s / β̄_t`. For unrescaled and variance-preserving schedules
/// `β̄ = 1 − ᾱ` and these are the usual DDPM formulas; the `β̄` form also
/// covers plain rescaling, where `ᾱ + β̄ ≠ 1`.
pub fn posterior_between(schedule: &NoiseSchedule, s: usize, t: usize) -> Result<PosteriorCoefficients> {
    schedule.check_timestep(t, 1)?;
    if s >= t {
        return Err(Error::Timestep { t: s, min: 0, max: t - 1 });
    }
    let (ab_s, ab_t) = (schedule.alpha_bar(s), schedule.alpha_bar(t));
    let (bb_s, bb_t) = (schedule.beta_bar(s), schedule.beta_bar(t));
    if bb_t <= 0.0 {
        return Err(Error::config(format!("posterior undefined: β̄_{t} = {bb_t}")));
    }
    let alpha = ab_t / ab_s;
    let beta = (bb_t - alpha * bb_s).max(0.0);
    Ok(PosteriorCoefficients {
        xi: ab_s.sqrt() * beta / bb_t,
        lambda: alpha.sqrt() * bb_s / bb_t,
        beta_tilde: beta * bb_s / bb_t,
    })
}

/// One reverse step `z_s = ξ ẑ_0 + λ z_t + √β̃ ε` from `t` to `s`.
pub fn posterior_sample_between(
    z_t: ArrayView2<'_, f64>,
    z0_hat: ArrayView2<'_, f64>,
    s: usize,
    t: usize,
    schedule: &NoiseSchedule,
    noise: ArrayView2<'_, f64>,
) -> Result<LatentSequence> {
    check_shape(z_t.dim(), z0_hat.dim())?;
    check_shape(z_t.dim(), noise.dim())?;
    let c = posterior_between(schedule, s, t)?;
    let sd = c.beta_tilde.sqrt();
    let values =
        Zip::from(&z0_hat).and(&z_t).and(&noise).map_collect(|&x0, &zt, &e| c.xi * x0 + c.lambda * zt + sd * e);
    Ok(LatentSequence { values, timestep: s })
}

/// One reverse step from `t` to `t − 1`.
pub fn posterior_sample(
    z_t: ArrayView2<'_, f64>,
    z0_hat: ArrayView2<'_, f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: ArrayView2<'_, f64>,
) -> Result<LatentSequence> {
    schedule.check_timestep(t, 1)?;
    posterior_sample_between(z_t, z0_hat, t - 1, t, schedule, noise)
}

/// `L_vlb`: mean squared error between `ẑ_0` and `z_0`.
pub fn loss_vlb(z0_hat: ArrayView2<'_, f64>, z0: ArrayView2<'_, f64>) -> Result<f64> {
    check_shape(z0.dim(), z0_hat.dim())?;
    let n = z0.len().max(1) as f64;
    Ok(Zip::from(&z0_hat).and(&z0).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b)) / n)
}

/// Cross-entropy of `y` under the rounding head at every row of `z`,
/// averaged over positions, with optional label smoothing `eps`
/// (target mass `1 − eps` on `y_i` and `eps / V` spread uniformly).
pub fn rounding_nll(z: ArrayView2<'_, f64>, y: &[usize], table: &EmbeddingTable, eps: f64) -> Result<f64> {
    if z.nrows() != y.len() {
        return Err(Error::shape(format!("{} positions", y.len()), format!("{} rows", z.nrows())));
    }
    if z.ncols() != table.dim() {
        return Err(Error::shape(format!("dimension {}", table.dim()), format!("dimension {}", z.ncols())));
    }
    let mut total = 0.0;
    for (row, &tok) in z.outer_iter().zip(y) {
        if tok >= table.vocab() {
            return Err(Error::Token { index: tok, vocab: table.vocab() });
        }
        total += smoothed_nll(table.round_logits(row)?.view(), tok, eps);
    }
    Ok(total / y.len().max(1) as f64)
}

/// `−(1−ε) log p_y − (ε/V) Σ_j log p_j` for one logit vector.
pub fn smoothed_nll(logits: ArrayView1<'_, f64>, y: usize, eps: f64) -> f64 {
    let nll = -log_softmax_at(logits, y);
    if eps == 0.0 {
        return nll;
    }
    let lse = crate::embeddings::log_sum_exp(logits);
    let mean_nll = lse - logits.mean().unwrap_or(0.0);
    (1.0 - eps) * nll + eps * mean_nll
}

/// `L_anchor`: rounding-head NLL of the true tokens at the model's `ẑ_0`.
pub fn loss_anchor(z0_hat: ArrayView2<'_, f64>, y: &[usize], table: &EmbeddingTable) -> Result<f64> {
    rounding_nll(z0_hat, y, table, 0.0)
}

/// `L_round`: rounding-head NLL at `z_0 = e(y) + √β_0 ε`.
pub fn loss_round(y: &[usize], table: &EmbeddingTable, beta_0: f64, noise: Option<ArrayView2<'_, f64>>) -> Result<f64> {
    let mut z0 = table.lookup(y)?;
    if beta_0 > 0.0 {
        let noise = noise.ok_or_else(|| Error::config("β_0 > 0 needs a noise matrix"))?;
        check_shape(z0.dim(), noise.dim())?;
        z0.scaled_add(beta_0.sqrt(), &noise);
    }
    rounding_nll(z0.view(), y, table, 0.0)
}

/// Negative log-likelihood of the true length `n_true ∈ [1, n_max]` under
/// length logits indexed from length 1.
pub fn length_nll(length_logits: ArrayView1<'_, f64>, n_true: usize, eps: f64) -> Result<f64> {
    if n_true == 0 || n_true > length_logits.len() {
        return Err(Error::Token { index: n_true, vocab: length_logits.len() });
    }
    Ok(smoothed_nll(length_logits, n_true - 1, eps))
}

/// Individually reported parts of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub vlb: f64,
    pub anchor: f64,
    pub length: f64,
    pub total: f64,
}

/// `L_vlb + L_anchor + λ_len · L_len`.
pub fn loss_total(
    z0_hat: ArrayView2<'_, f64>,
    z0: ArrayView2<'_, f64>,
    y: &[usize],
    length_logits: ArrayView1<'_, f64>,
    n_true: usize,
    table: &EmbeddingTable,
    lambda_len: f64,
) -> Result<LossParts> {
    let vlb = loss_vlb(z0_hat, z0)?;
    let anchor = loss_anchor(z0_hat, y, table)?;
    let length = length_nll(length_logits, n_true, 0.0)?;
    Ok(LossParts { vlb, anchor, length, total: vlb + anchor + lambda_len * length })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{build_schedule, ScheduleKind};
    use approx::assert_relative_eq;
    use ndarray::{array, Array1};

    #[test]
    fn posterior_is_exact_at_t1() {
        for kind in ScheduleKind::ALL {
            let s = build_schedule(kind, 50).unwrap();
            let c = posterior_coefficients(&s, 1).unwrap();
            assert_eq!((c.xi, c.lambda, c.beta_tilde), (1.0, 0.0, 0.0));
            let r = s.rescale(3.0, false).unwrap();
            let c = posterior_coefficients(&r, 1).unwrap();
            assert_eq!((c.xi, c.lambda), (1.0, 0.0));
        }
    }

    #[test]
    fn posterior_hand_values() {
        let s = NoiseSchedule::from_series(ScheduleKind::Linear, vec![1.0, 0.9, 0.8], vec![0.0, 0.1, 0.2]).unwrap();
        let c = posterior_coefficients(&s, 2).unwrap();
        let alpha = 0.8 / 0.9;
        let beta = 1.0 - alpha;
        assert_relative_eq!(c.xi, 0.9f64.sqrt() * beta / 0.2, max_relative = 1e-14);
        assert_relative_eq!(c.lambda, alpha.sqrt() * 0.1 / 0.2, max_relative = 1e-14);
        assert_relative_eq!(c.beta_tilde, beta * 0.1 / 0.2, max_relative = 1e-14);
    }

    #[test]
    fn posterior_mean_matches_gaussian_conditioning() {
        // z_s ~ N(√ᾱ_s z0, β̄_s), z_t | z_s ~ N(√α z_s, β): condition on z_t
        let s = build_schedule(ScheduleKind::Cosine, 40).unwrap().rescale(2.0, false).unwrap();
        let (a, b) = (7, 19);
        let (ab_s, ab_t, bb_s, bb_t) = (s.alpha_bar(a), s.alpha_bar(b), s.beta_bar(a), s.beta_bar(b));
        let alpha = ab_t / ab_s;
        let cov = alpha.sqrt() * bb_s;
        let var_t = bb_t;
        let (z0, zt) = (0.7, -1.3);
        let mean = ab_s.sqrt() * z0 + cov / var_t * (zt - ab_t.sqrt() * z0);
        let var = bb_s - cov * cov / var_t;
        let c = posterior_between(&s, a, b).unwrap();
        assert_relative_eq!(c.xi * z0 + c.lambda * zt, mean, max_relative = 1e-12);
        assert_relative_eq!(c.beta_tilde, var, max_relative = 1e-10);
    }

    #[test]
    fn forward_noiseless_and_endpoint() {
        let s = build_schedule(ScheduleKind::Sqrt, 100).unwrap();
        let z0 = array![[1.0, -2.0], [0.5, 3.0]];
        let zero = Array2::zeros((2, 2));
        let out = forward_sample(z0.view(), 30, &s, zero.view()).unwrap();
        assert_eq!(out.values, z0.mapv(|v| v * s.alpha_bar(30).sqrt()));
        let eps = array![[0.3, 0.1], [-0.2, 0.4]];
        let end = forward_sample(z0.view(), 100, &s, eps.view()).unwrap();
        let pure = eps.mapv(|v| v * s.beta_bar(100).sqrt());
        assert!((&end.values - &pure).iter().all(|v| v.abs() < 0.01));
        assert!(forward_sample(z0.view(), 101, &s, eps.view()).is_err());
    }

    #[test]
    fn posterior_step_linearity() {
        let s = build_schedule(ScheduleKind::Linear, 30).unwrap();
        let c = Array2::from_elem((2, 3), 1.7);
        let zero = Array2::zeros((2, 3));
        let out = posterior_sample(c.view(), c.view(), 12, &s, zero.view()).unwrap();
        let k = posterior_coefficients(&s, 12).unwrap();
        for v in out.values.iter() {
            assert_relative_eq!(*v, (k.xi + k.lambda) * 1.7, max_relative = 1e-14);
        }
        let one = posterior_sample(c.view(), zero.view(), 1, &s, c.view()).unwrap();
        assert_eq!(one.values, zero);
    }

    #[test]
    fn vlb_cases() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(loss_vlb(a.view(), a.view()).unwrap(), 0.0);
        assert_relative_eq!(loss_vlb((&a + 0.5).view(), a.view()).unwrap(), 0.25, max_relative = 1e-14);
        let b = array![[0.0, 2.0, 1.0], [4.0, 7.0, 3.0]];
        assert_relative_eq!(loss_vlb(a.view(), b.view()).unwrap(), (1.0 + 0.0 + 4.0 + 0.0 + 4.0 + 9.0) / 6.0);
    }

    #[test]
    fn anchor_cases() {
        let table = EmbeddingTable::from_matrix(array![[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]], 1.0).unwrap();
        let zero = Array2::zeros((2, 2));
        assert_relative_eq!(loss_anchor(zero.view(), &[0, 2], &table).unwrap(), 3f64.ln(), max_relative = 1e-14);
        // z = (1, 1): logits (1, 2, 0)
        let z = array![[1.0, 1.0]];
        let expected = (1f64.exp() + 2f64.exp() + 1.0).ln() - 2.0;
        assert_relative_eq!(loss_anchor(z.view(), &[1], &table).unwrap(), expected, max_relative = 1e-14);
        assert_eq!(
            loss_round(&[1], &table, 0.0, None).unwrap(),
            loss_anchor(table.lookup(&[1]).unwrap().view(), &[1], &table).unwrap()
        );
        assert!(loss_anchor(z.view(), &[3], &table).is_err());
    }

    #[test]
    fn smoothing_matches_explicit_target() {
        let logits = Array1::from(vec![0.3, -1.0, 2.0, 0.5]);
        let eps = 0.1;
        let lse = crate::embeddings::log_sum_exp(logits.view());
        let explicit: f64 = (0..4)
            .map(|j| {
                let q = if j == 2 { 1.0 - eps + eps / 4.0 } else { eps / 4.0 };
                q * (lse - logits[j])
            })
            .sum();
        assert_relative_eq!(smoothed_nll(logits.view(), 2, eps), explicit, max_relative = 1e-14);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let table = EmbeddingTable::init_gaussian(9, 4, 1.0, 3).unwrap();
        let y = [1, 4, 7];
        let z0 = table.lookup(&y).unwrap();
        let z0_hat = &z0 + 0.2;
        let len_logits = Array1::from(vec![0.1, 0.4, -0.3, 0.0, 1.1]);
        let parts = loss_total(z0_hat.view(), z0.view(), &y, len_logits.view(), 3, &table, 0.1).unwrap();
        let expected = loss_vlb(z0_hat.view(), z0.view()).unwrap()
            + loss_anchor(z0_hat.view(), &y, &table).unwrap()
            + 0.1 * length_nll(len_logits.view(), 3, 0.0).unwrap();
        assert_relative_eq!(parts.total, expected, max_relative = 1e-14);
        let no_len = loss_total(z0_hat.view(), z0.view(), &y, len_logits.view(), 3, &table, 0.0).unwrap();
        assert_eq!(no_len.total, no_len.vlb + no_len.anchor);
    }
}
