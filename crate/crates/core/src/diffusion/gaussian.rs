//! Gaussian diffusion over coordinates (and, in the continuous state space,
//! over relaxed one-hot embeddings).
//!
//! Forward: `x_t = √ᾱ_t·x_0 + √(1 − ᾱ_t)·ε`. For coordinates the noise is
//! projected to zero column means so every state stays in the
//! translation-free subspace. Reverse: the exact posterior
//! `q(x_{t−1} | x_t, x_0)` evaluated at the model's clean estimate, plus a
//! deterministic strided variant for accelerated sampling and a
//! gradient-guided variant that shifts the posterior mean.

use crate::error::EquimolError;
use crate::schedule::NoiseSchedule;
use crate::Result;
use ndarray::{Array2, Axis};

use super::noise::NoiseSource;

/// Reverse-step distribution: elementwise mean and one shared std.
#[derive(Debug, Clone)]
pub struct GaussianPosteriorParams {
    pub mean: Array2<f64>,
    /// Strictly positive for `t > 1`; exactly 0 at the terminal step.
    pub std: f64,
}

/// Subtract each column's mean. Projects onto the zero-center-of-mass
/// subspace; idempotent.
pub fn project_columns_zero_mean(m: &Array2<f64>) -> Array2<f64> {
    let mean = m.mean_axis(Axis(0)).unwrap();
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        row -= &mean;
    }
    out
}

fn assert_centered(x: &Array2<f64>, what: &str) -> Result<()> {
    for m in x.mean_axis(Axis(0)).unwrap().iter() {
        if m.abs() > 1e-8 {
            return Err(EquimolError::Contract(format!(
                "{what} must be centered; |column mean| = {:e}",
                m.abs()
            )));
        }
    }
    Ok(())
}

/// Draw a standard-normal array shaped like `x`, center-of-mass projected
/// when asked.
fn draw_noise(
    shape: (usize, usize),
    noise: &mut dyn NoiseSource,
    project_com: bool,
) -> Array2<f64> {
    let raw = noise
        .standard_normal(&[shape.0, shape.1])
        .into_dimensionality()
        .expect("requested a 2-d shape");
    if project_com {
        project_columns_zero_mean(&raw)
    } else {
        raw
    }
}

/// Forward-noise `x0` to step `t`, returning the noised state and the (
/// possibly projected) noise actually used. With `project_com` the input
/// must already be centered and the output stays centered.
pub fn gaussian_forward_sample(
    x0: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &mut dyn NoiseSource,
    project_com: bool,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if t < 1 || t > schedule.steps {
        return Err(EquimolError::Contract(format!(
            "forward step {t} outside 1..={}",
            schedule.steps
        )));
    }
    if project_com {
        assert_centered(x0, "coordinate input")?;
    }
    let abar = schedule.alpha_bar(t);
    let eps = draw_noise(x0.dim(), noise, project_com);
    let xt = x0 * abar.sqrt() + &eps * (1.0 - abar).sqrt();
    Ok((xt, eps))
}

/// Recover the clean estimate from a noise prediction:
/// `x̂0 = (x_t − √(1 − ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn eps_to_x0(eps_hat: &Array2<f64>, xt: &Array2<f64>, alpha_bar_t: f64) -> Array2<f64> {
    (xt - &(eps_hat * (1.0 - alpha_bar_t).sqrt())) / alpha_bar_t.sqrt()
}

/// The inverse map: the noise a clean estimate implies,
/// `ε̂ = (x_t − √ᾱ_t·x̂0) / √(1 − ᾱ_t)`.
pub fn x0_to_eps(x0_hat: &Array2<f64>, xt: &Array2<f64>, alpha_bar_t: f64) -> Array2<f64> {
    (xt - &(x0_hat * alpha_bar_t.sqrt())) / (1.0 - alpha_bar_t).sqrt()
}

/// Parameters of the exact reverse posterior `q(x_{t−1} | x_t, x̂_0)`:
/// mean `(√ᾱ_{t−1}·β_t/(1 − ᾱ_t))·x̂0 + (√α_t·(1 − ᾱ_{t−1})/(1 − ᾱ_t))·x_t`,
/// variance `((1 − ᾱ_{t−1})/(1 − ᾱ_t))·β_t`. At `t = 1` the prefactors
/// collapse to mean `x̂0` and variance 0, which is how the terminal step
/// becomes deterministic.
pub fn gaussian_posterior_params(
    x0_hat: &Array2<f64>,
    xt: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<GaussianPosteriorParams> {
    if t < 1 || t > schedule.steps {
        return Err(EquimolError::Contract(format!(
            "posterior step {t} outside 1..={}",
            schedule.steps
        )));
    }
    if x0_hat.dim() != xt.dim() {
        return Err(EquimolError::Contract(format!(
            "clean estimate shape {:?} does not match state shape {:?}",
            x0_hat.dim(),
            xt.dim()
        )));
    }
    let abar_t = schedule.alpha_bar(t);
    let abar_prev = schedule.alpha_bar(t - 1);
    let alpha_t = schedule.alpha(t);
    let beta_t = schedule.beta(t);
    let denom = 1.0 - abar_t;
    let coef_x0 = abar_prev.sqrt() * beta_t / denom;
    let coef_xt = alpha_t.sqrt() * (1.0 - abar_prev) / denom;
    let var = ((1.0 - abar_prev) / denom) * beta_t;
    Ok(GaussianPosteriorParams {
        mean: x0_hat * coef_x0 + xt * coef_xt,
        std: var.sqrt(),
    })
}

/// One stochastic reverse step `x_{t−1} = μ + std·ε`; deterministic (no
/// draw) at `t = 1`. `project_com` selects center-of-mass-projected noise
/// (coordinates) or plain noise (relaxed categorical embeddings).
pub fn gaussian_reverse_step(
    x0_hat: &Array2<f64>,
    xt: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &mut dyn NoiseSource,
    project_com: bool,
) -> Result<Array2<f64>> {
    let params = gaussian_posterior_params(x0_hat, xt, t, schedule)?;
    if t == 1 {
        return Ok(params.mean);
    }
    let eps = draw_noise(xt.dim(), noise, project_com);
    Ok(params.mean + &eps * params.std)
}

/// Deterministic strided update to `t_next < t`:
/// `x_{t_next} = √ᾱ_{t_next}·x̂0 + √(1 − ᾱ_{t_next})·(x_t − √ᾱ_t·x̂0)/√(1 − ᾱ_t)`.
/// At `t_next = 0` this returns `x̂0` exactly.
pub fn ddim_coordinate_step(
    x0_hat: &Array2<f64>,
    xt: &Array2<f64>,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if t_next >= t || t > schedule.steps {
        return Err(EquimolError::Contract(format!(
            "strided step needs t_next < t ≤ {}, got t = {t}, t_next = {t_next}",
            schedule.steps
        )));
    }
    let abar_t = schedule.alpha_bar(t);
    let abar_next = schedule.alpha_bar(t_next);
    let eps_implied = x0_to_eps(x0_hat, xt, abar_t);
    Ok(x0_hat * abar_next.sqrt() + &eps_implied * (1.0 - abar_next).sqrt())
}

/// Reverse step with the posterior mean shifted by
/// `scale · var_{t−1} · gradient`, steering samples along an external
/// regressor's ascent direction. The gradient is re-projected onto the
/// zero-center-of-mass subspace (a no-op for compliant inputs) so guidance
/// can never push the trajectory off it. `scale = 0` reproduces
/// [`gaussian_reverse_step`] exactly.
pub fn guided_reverse_step(
    x0_hat: &Array2<f64>,
    xt: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    gradient: &Array2<f64>,
    scale: f64,
    noise: &mut dyn NoiseSource,
) -> Result<Array2<f64>> {
    if gradient.dim() != xt.dim() {
        return Err(EquimolError::Contract(format!(
            "guidance gradient shape {:?} does not match state shape {:?}",
            gradient.dim(),
            xt.dim()
        )));
    }
    let params = gaussian_posterior_params(x0_hat, xt, t, schedule)?;
    let var = params.std * params.std;
    let mean = if scale == 0.0 {
        params.mean
    } else {
        params.mean + project_columns_zero_mean(gradient) * (scale * var)
    };
    if t == 1 {
        return Ok(mean);
    }
    let eps = draw_noise(xt.dim(), noise, true);
    Ok(mean + &eps * params.std)
}
