//! Discretized variance-preserving noise schedules.
//!
//! Each diffused modality gets its own schedule built from the adaptive
//! cosine form `ᾱ(t) = cos(π/2 · (t/T + s)^ν / (1 + s))²`: the exponent ν
//! shifts where in the trajectory the signal decays, so geometry and the
//! categorical modalities can be corrupted at different paces while sharing
//! the same step index.
//!
//! Construction pipeline: evaluate the closed form on t = 0..=T, enforce a
//! running-min envelope (the raw curve can tick upward past π/2 for ν > 1),
//! divide by the t = 0 value so ᾱ_0 = 1 exactly, clip from below at
//! [`EPS_FLOOR`], then repair any ties the clip created by nudging earlier
//! entries up one ulp. The result is strictly decreasing with every per-step
//! rate β_t = 1 − ᾱ_t/ᾱ_{t−1} inside (0, 1).

use crate::{EquimolError, Result};
use serde::{Deserialize, Serialize};

/// Lower clip for ᾱ_t: keeps 1 − ᾱ_t away from 1 so posterior and SNR
/// expressions stay finite.
pub const EPS_FLOOR: f64 = 1e-5;

/// A discretized noise schedule over steps 0..=T.
///
/// `alpha_bar[t]` is the cumulative signal retention ᾱ_t (length T+1,
/// `alpha_bar[0] == 1`). `beta[k]` and `alpha[k]` hold the per-step rates for
/// step t = k+1 (length T); prefer the `beta(t)` / `alpha(t)` accessors,
/// which take the step index directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub s: f64,
    pub nu: f64,
    pub alpha_bar: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// How the per-step loss is weighted during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LossWeighting {
    /// Every step weighs 1.
    Uniform,
    /// Weight by SNR(t) clamped into [clamp_min, clamp_max]. Down-weights
    /// near-noise steps, caps the near-data ones.
    SnrClamp { clamp_min: f64, clamp_max: f64 },
}

impl LossWeighting {
    /// The clamped-SNR weighting with its standard bounds.
    pub fn snr_clamp_default() -> Self {
        LossWeighting::SnrClamp {
            clamp_min: 0.05,
            clamp_max: 1.5,
        }
    }
}

/// Build an adaptive cosine schedule. Errors when the parameters yield a
/// curve the repair step cannot make strictly decreasing (e.g. T = 0 or a
/// non-finite/negative parameter).
pub fn make_adaptive_cosine(steps: usize, nu: f64, s: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(EquimolError::Config("schedule needs at least 1 step".into()));
    }
    if !(nu.is_finite() && nu > 0.0) || !(s.is_finite() && s >= 0.0) {
        return Err(EquimolError::Config(format!(
            "schedule parameters out of range: nu={nu}, s={s}"
        )));
    }
    let t_max = steps as f64;
    let mut alpha_bar: Vec<f64> = (0..=steps)
        .map(|t| {
            let u = (t as f64 / t_max + s).powf(nu) / (1.0 + s);
            let c = (std::f64::consts::FRAC_PI_2 * u).cos();
            c * c
        })
        .collect();
    // Running-min envelope: for ν > 1 the cosine argument can pass π/2
    // before T and the square would tick back up.
    for t in 1..=steps {
        alpha_bar[t] = alpha_bar[t].min(alpha_bar[t - 1]);
    }
    // Normalize so ᾱ_0 = 1 exactly, then clip from below.
    let a0 = alpha_bar[0];
    for v in alpha_bar.iter_mut() {
        *v /= a0;
    }
    for v in alpha_bar.iter_mut().skip(1) {
        if *v < EPS_FLOOR {
            *v = EPS_FLOOR;
        }
    }
    // Clipping can flatten the tail into exact ties; separate them by the
    // smallest possible amount so every β_t stays strictly positive.
    for t in (1..steps).rev() {
        if alpha_bar[t] <= alpha_bar[t + 1] {
            alpha_bar[t] = next_up(alpha_bar[t + 1]);
        }
    }

    let mut beta = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    for t in 1..=steps {
        let a = alpha_bar[t] / alpha_bar[t - 1];
        beta.push(1.0 - a);
        alpha.push(a);
    }

    let sched = NoiseSchedule {
        steps,
        s,
        nu,
        alpha_bar,
        beta,
        alpha,
    };
    sched.validate()?;
    Ok(sched)
}

/// Smallest f64 strictly greater than `x` (positive finite inputs).
fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

impl NoiseSchedule {
    /// Check all structural invariants; used by the constructor and by
    /// checkpoint loading.
    pub fn validate(&self) -> Result<()> {
        let t_len = self.alpha_bar.len();
        if t_len != self.steps + 1 || self.beta.len() != self.steps || self.alpha.len() != self.steps
        {
            return Err(EquimolError::Contract(format!(
                "schedule arrays have wrong lengths for T={}",
                self.steps
            )));
        }
        if self.alpha_bar[0] != 1.0 {
            return Err(EquimolError::Contract(format!(
                "alpha_bar[0] = {} but must be 1",
                self.alpha_bar[0]
            )));
        }
        for t in 1..=self.steps {
            if !(self.alpha_bar[t] < self.alpha_bar[t - 1]) {
                return Err(EquimolError::Contract(format!(
                    "alpha_bar not strictly decreasing at t={t}"
                )));
            }
        }
        let last = self.alpha_bar[self.steps];
        if !(last > 0.0 && last <= EPS_FLOOR) {
            return Err(EquimolError::Contract(format!(
                "alpha_bar[T] = {last} outside (0, {EPS_FLOOR}]"
            )));
        }
        for t in 1..=self.steps {
            let b = self.beta(t);
            let a = self.alpha(t);
            if !(b > 0.0 && b < 1.0 && a > 0.0 && a < 1.0) {
                return Err(EquimolError::Contract(format!(
                    "beta/alpha out of (0,1) at t={t}: beta={b}, alpha={a}"
                )));
            }
            if (a + b - 1.0).abs() > 1e-15 {
                return Err(EquimolError::Contract(format!(
                    "alpha + beta != 1 at t={t}"
                )));
            }
        }
        Ok(())
    }

    /// Cumulative signal retention ᾱ_t, t ∈ 0..=T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Per-step noise rate β_t, t ∈ 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Per-step retention α_t = 1 − β_t, t ∈ 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Signal-to-noise ratio ᾱ_t / (1 − ᾱ_t). Infinite at t = 0 where the
    /// signal is intact.
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar[t];
        if ab >= 1.0 {
            f64::INFINITY
        } else {
            ab / (1.0 - ab)
        }
    }
}

/// Per-step loss weight for a weighting mode.
pub fn loss_weight(weighting: &LossWeighting, schedule: &NoiseSchedule, t: usize) -> f64 {
    match *weighting {
        LossWeighting::Uniform => 1.0,
        LossWeighting::SnrClamp {
            clamp_min,
            clamp_max,
        } => schedule.snr(t).clamp(clamp_min, clamp_max),
    }
}
