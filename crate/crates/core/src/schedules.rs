//! Noise schedules.
//!
//! A schedule is the discrete series `(ᾱ_t, β̄_t)` for `t = 0..=T`, where the
//! forward process is `q(z_t | z_0) = N(√ᾱ_t z_0, β̄_t I)`. Index 0 is the
//! clean latent (`ᾱ_0 = 1`, `β̄_0 = 0`).
//!
//! Rescaling multiplies the noise variance by `F²`. The plain variant keeps
//! `ᾱ` untouched; the variance-preserving variant renormalises so that
//! `ᾱ' + β̄' = 1`, which divides the signal-to-noise ratio by `F²`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lower clip for `ᾱ_t`.
pub const MIN_ALPHA_BAR: f64 = 1e-5;
/// Upper clip for the per-step `β_t = 1 - ᾱ_t / ᾱ_{t-1}`.
pub const MAX_STEP_BETA: f64 = 0.999;

const COSINE_OFFSET: f64 = 0.008;
const SQRT_OFFSET: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Sqrt,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Linear, ScheduleKind::Cosine, ScheduleKind::Sqrt];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Sqrt => "sqrt",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "sqrt" => Ok(ScheduleKind::Sqrt),
            other => Err(Error::config(format!("unknown schedule kind `{other}` (expected linear, cosine or sqrt)"))),
        }
    }
}

/// Everything needed to rebuild a schedule: kind, steps and rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub factor: f64,
    pub vp: bool,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, steps: usize) -> Self {
        ScheduleSpec { kind, steps, factor: 1.0, vp: false }
    }

    pub fn rescaled(self, factor: f64, vp: bool) -> Self {
        ScheduleSpec { factor, vp, ..self }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.kind, self.steps)?.rescale(self.factor, self.vp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
    factor: f64,
    vp: bool,
}

/// Builds an unrescaled schedule with `steps` diffusion steps.
///
/// - `linear`: per-step `β` linearly spaced over `t = 1..=T` between
///   `1e-4·(1000/T)` and `0.02·(1000/T)`, `ᾱ_t = ∏(1 - β_i)`. The `1000/T`
///   factor keeps the curve shape independent of `T`.
/// - `cosine`: `ᾱ_t = f(t)/f(0)`, `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`, `s = 0.008`.
/// - `sqrt`: `ᾱ_t = 1 - √(t/T + s)`, `s = 1e-4`.
///
/// `ᾱ_t` is clipped to `[1e-5, 1]` and the implied per-step `β_t` to `0.999`.
pub fn build_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("a schedule needs at least one diffusion step"));
    }
    let t_max = steps as f64;
    let raw: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let scale = 1000.0 / t_max;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            let mut acc = 1.0;
            let mut out = vec![1.0];
            for i in 0..steps {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                let beta = (lo + (hi - lo) * frac).min(MAX_STEP_BETA);
                acc *= 1.0 - beta;
                out.push(acc);
            }
            out
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let x = ((t / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            let f0 = f(0.0);
            (0..=steps).map(|t| f(t as f64) / f0).collect()
        }
        ScheduleKind::Sqrt => {
            (0..=steps).map(|t| if t == 0 { 1.0 } else { 1.0 - (t as f64 / t_max + SQRT_OFFSET).sqrt() }).collect()
        }
    };

    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for t in 1..=steps {
        let prev = alpha_bar[t - 1];
        let a = raw[t].max((1.0 - MAX_STEP_BETA) * prev).clamp(MIN_ALPHA_BAR, 1.0).min(prev);
        alpha_bar.push(a);
    }
    let beta_bar = alpha_bar.iter().map(|a| 1.0 - a).collect();
    Ok(NoiseSchedule { kind, steps, alpha_bar, beta_bar, factor: 1.0, vp: false })
}

impl NoiseSchedule {
    /// A schedule from explicit series. Used for analytic checks (for
    /// instance a zero-noise schedule); no kind-specific formula applies.
    pub fn from_series(kind: ScheduleKind, alpha_bar: Vec<f64>, beta_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() != beta_bar.len() || alpha_bar.len() < 2 {
            return Err(Error::shape(
                "two series of equal length ≥ 2",
                format!("{} and {}", alpha_bar.len(), beta_bar.len()),
            ));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) || beta_bar.iter().any(|b| !(*b >= 0.0 && b.is_finite()))
        {
            return Err(Error::config("alpha_bar must lie in (0, 1] and beta_bar must be finite and non-negative"));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("alpha_bar must be non-increasing"));
        }
        let steps = alpha_bar.len() - 1;
        Ok(NoiseSchedule { kind, steps, alpha_bar, beta_bar, factor: 1.0, vp: false })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn is_vp(&self) -> bool {
        self.vp
    }

    pub fn is_rescaled(&self) -> bool {
        self.factor != 1.0 || self.vp
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec { kind: self.kind, steps: self.steps, factor: self.factor, vp: self.vp }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_bars(&self) -> &[f64] {
        &self.beta_bar
    }

    /// `ᾱ_t`; panics if `t > T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `β̄_t`; panics if `t > T`.
    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t]
    }

    pub(crate) fn check_timestep(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::Timestep { t, min, max: self.steps });
        }
        Ok(())
    }

    /// Rescales the noise by `factor`.
    ///
    /// Plain: `(ᾱ', β̄') = (ᾱ, F²β̄)`. Variance preserving:
    /// `ᾱ' = ᾱ/(ᾱ + F²β̄)`, `β̄' = F²β̄/(ᾱ + F²β̄)`.
    pub fn rescale(&self, factor: f64, vp: bool) -> Result<NoiseSchedule> {
        if !(factor >= 1.0) || !factor.is_finite() {
            return Err(Error::config(format!("rescaling factor must be ≥ 1, got {factor}")));
        }
        if self.is_rescaled() {
            return Err(Error::config("schedule is already rescaled"));
        }
        if factor == 1.0 {
            return Ok(self.clone());
        }
        let f2 = factor * factor;
        let (alpha_bar, beta_bar) = if vp {
            self.alpha_bar
                .iter()
                .zip(&self.beta_bar)
                .map(|(&a, &b)| {
                    let noise = f2 * b;
                    let total = a + noise;
                    (a / total, noise / total)
                })
                .unzip()
        } else {
            (self.alpha_bar.clone(), self.beta_bar.iter().map(|b| f2 * b).collect())
        };
        Ok(NoiseSchedule { kind: self.kind, steps: self.steps, alpha_bar, beta_bar, factor, vp })
    }

    /// Signal-to-noise ratio `ᾱ_t / β̄_t` for `1 ≤ t ≤ T`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_timestep(t, 1)?;
        Ok(self.alpha_bar[t] / self.beta_bar[t])
    }

    /// Noise-to-signal standard-deviation ratio `√(β̄_t/ᾱ_t)`: the noise
    /// scale after mapping `z_t` back to the data scale by `1/√ᾱ_t`.
    pub fn noise_ratio(&self, t: usize) -> f64 {
        (self.beta_bar[t] / self.alpha_bar[t]).sqrt()
    }
}

/// Picks `K` timesteps `τ_i = round(i·T/K)`, `i = 1..=K`, from `1..=T`.
pub fn subsample_trajectory(steps: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > steps {
        return Err(Error::config(format!("need 1 ≤ K ≤ T, got K = {k}, T = {steps}")));
    }
    Ok((1..=k).map(|i| (2 * i * steps + k) / (2 * k)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn sqrt_values_by_hand() {
        let s = build_schedule(ScheduleKind::Sqrt, 2000).unwrap();
        // t = 0 is the clean latent
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.beta_bar(0), 0.0);
        // 1 - sqrt(0.5 + 1e-4)
        assert_relative_eq!(s.alpha_bar(1000), 0.292_822_511_670_514_2, max_relative = 1e-12);
        // 1 - sqrt(1.0001) < 0 → lower clip
        assert_eq!(s.alpha_bar(2000), MIN_ALPHA_BAR);
    }

    #[test]
    fn clean_convention_for_every_kind() {
        for kind in ScheduleKind::ALL {
            let s = build_schedule(kind, 50).unwrap();
            assert_eq!(s.beta_bar(0), 0.0);
            assert_eq!(s.alpha_bar(0), 1.0);
        }
    }

    #[test]
    fn linear_ends_in_noise() {
        let s = build_schedule(ScheduleKind::Linear, 2000).unwrap();
        assert!(s.alpha_bar(2000) < 1e-4, "{}", s.alpha_bar(2000));
    }

    #[test]
    fn linear_matches_product_of_betas() {
        let t = 100;
        let s = build_schedule(ScheduleKind::Linear, t).unwrap();
        let scale = 10.0;
        let mut acc = 1.0;
        for i in 0..t {
            let beta = 1e-4 * scale + (0.02 - 1e-4) * scale * i as f64 / 99.0;
            acc *= 1.0 - beta;
            assert_relative_eq!(s.alpha_bar(i + 1), acc, max_relative = 1e-12);
        }
    }

    #[test]
    fn unknown_kind_is_a_config_error() {
        assert!(matches!("quadratic".parse::<ScheduleKind>(), Err(Error::Config(_))));
        assert_eq!("SQRT".parse::<ScheduleKind>().unwrap(), ScheduleKind::Sqrt);
        assert!(build_schedule(ScheduleKind::Sqrt, 0).is_err());
    }

    #[test]
    fn rescale_identity_and_substitution() {
        let s = build_schedule(ScheduleKind::Cosine, 100).unwrap();
        assert_eq!(s.rescale(1.0, false).unwrap(), s);
        assert_eq!(s.rescale(1.0, true).unwrap(), s);

        let s = NoiseSchedule::from_series(ScheduleKind::Linear, vec![1.0, 0.9, 0.5], vec![0.0, 0.1, 0.5]).unwrap();
        let plain = s.rescale(2.0, false).unwrap();
        assert_eq!(plain.alpha_bar(1), 0.9);
        assert_relative_eq!(plain.beta_bar(1), 0.4, max_relative = 1e-15);

        let vp = s.rescale(2.0, true).unwrap();
        assert_relative_eq!(vp.alpha_bar(2), 0.2, max_relative = 1e-15);
        assert_relative_eq!(vp.beta_bar(2), 0.8, max_relative = 1e-15);
    }

    #[test]
    fn rescale_rejects_bad_input() {
        let s = build_schedule(ScheduleKind::Sqrt, 10).unwrap();
        assert!(s.rescale(0.5, false).is_err());
        assert!(s.rescale(f64::NAN, false).is_err());
        let r = s.rescale(2.0, false).unwrap();
        assert!(r.rescale(2.0, false).is_err());
        assert!(r.rescale(1.0, true).is_err());
    }

    #[test]
    fn snr_examples() {
        let s = NoiseSchedule::from_series(ScheduleKind::Sqrt, vec![1.0, 0.8, 0.5], vec![0.0, 0.2, 0.5]).unwrap();
        assert_relative_eq!(s.snr(1).unwrap(), 4.0, max_relative = 1e-15);
        assert_eq!(s.snr(2).unwrap(), 1.0);
        assert!(matches!(s.snr(0), Err(Error::Timestep { .. })));
        assert!(s.snr(3).is_err());
    }

    #[test]
    fn subsample_examples() {
        assert_eq!(subsample_trajectory(2000, 2000).unwrap(), (1..=2000).collect::<Vec<_>>());
        assert_eq!(subsample_trajectory(10, 1).unwrap(), vec![10]);
        let tau = subsample_trajectory(2000, 20).unwrap();
        assert_eq!(tau, (1..=20).map(|i| 100 * i).collect::<Vec<_>>());
        assert_eq!(subsample_trajectory(10, 3).unwrap(), vec![3, 7, 10]);
        assert!(subsample_trajectory(10, 0).is_err());
        assert!(subsample_trajectory(10, 11).is_err());
    }

    fn kinds() -> impl Strategy<Value = ScheduleKind> {
        prop_oneof![Just(ScheduleKind::Linear), Just(ScheduleKind::Cosine), Just(ScheduleKind::Sqrt)]
    }

    proptest! {
        #[test]
        fn schedule_invariants(kind in kinds(), steps in prop_oneof![Just(10usize), Just(100), Just(2000), 1usize..300]) {
            let s = build_schedule(kind, steps).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(s.alpha_bar(steps) > 0.0);
            for t in 0..=steps {
                prop_assert!((s.alpha_bar(t) + s.beta_bar(t) - 1.0).abs() <= 1e-12);
                if t > 0 {
                    prop_assert!(1.0 - s.alpha_bar(t) / s.alpha_bar(t - 1) <= MAX_STEP_BETA + 1e-12);
                }
            }
        }

        #[test]
        fn plain_rescale_keeps_alpha_bits(kind in kinds(), factor in 1.0f64..50.0) {
            let s = build_schedule(kind, 200).unwrap();
            let r = s.rescale(factor, false).unwrap();
            prop_assert_eq!(r.alpha_bars(), s.alpha_bars());
            for t in 0..=200 {
                prop_assert_eq!(r.beta_bar(t), factor * factor * s.beta_bar(t));
            }
        }

        #[test]
        fn vp_rescale_laws(kind in kinds(), factor in 1.0f64..50.0) {
            let s = build_schedule(kind, 200).unwrap();
            let r = s.rescale(factor, true).unwrap();
            for t in 1..=200 {
                prop_assert!((r.alpha_bar(t) + r.beta_bar(t) - 1.0).abs() <= 4.0 * f64::EPSILON);
                let want = s.snr(t).unwrap() / (factor * factor);
                prop_assert!(((r.snr(t).unwrap() - want) / want).abs() <= 1e-12);
            }
        }

        #[test]
        fn subsample_is_increasing(steps in 1usize..3000, frac in 0.0f64..1.0) {
            let k = 1 + ((steps - 1) as f64 * frac) as usize;
            let tau = subsample_trajectory(steps, k).unwrap();
            prop_assert_eq!(tau.len(), k);
            prop_assert!(tau.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(*tau.last().unwrap(), steps);
            prop_assert!(tau[0] >= 1);
        }
    }
}
