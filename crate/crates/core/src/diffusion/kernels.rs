//! Categorical diffusion: transition matrices, posteriors, reverse steps.
//!
//! The forward process mixes each class row toward a fixed prior c̃ at the
//! rate the schedule dictates: one step multiplies by
//! `U_t = α_t·I + (1 − α_t)·1c̃ᵀ`, and `t` accumulated steps collapse to
//! `Ū_t = ᾱ_t·I + (1 − ᾱ_t)·1c̃ᵀ` because this matrix family is closed under
//! products. Reverse sampling combines the exact one-step posterior with the
//! denoiser's class probabilities by marginalizing over the predicted clean
//! class. All bond-matrix variants operate on the strict upper triangle and
//! mirror the result, keeping the tensor symmetric with a "none" diagonal.

use crate::error::EquimolError;
use crate::schedule::NoiseSchedule;
use crate::Result;
use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};

use super::noise::NoiseSource;

/// Tolerance for "sums to one" checks on probability vectors.
const PROB_SUM_TOL: f64 = 1e-12;

/// A categorical modality's noise model: the prior it decays toward and the
/// schedule that sets the per-step decay rate.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TransitionKernel {
    prior: Array1<f64>,
    schedule: NoiseSchedule,
}

impl TransitionKernel {
    pub fn new(prior: Array1<f64>, schedule: NoiseSchedule) -> Result<Self> {
        if prior.len() < 2 {
            return Err(EquimolError::Contract(format!(
                "categorical prior needs at least 2 classes, got {}",
                prior.len()
            )));
        }
        if prior.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(EquimolError::Contract(
                "categorical prior entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = prior.sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(EquimolError::Contract(format!(
                "categorical prior sums to {sum}, expected 1 within {PROB_SUM_TOL:e}"
            )));
        }
        schedule.validate()?;
        Ok(TransitionKernel { prior, schedule })
    }

    pub fn prior(&self) -> &Array1<f64> {
        &self.prior
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn num_classes(&self) -> usize {
        self.prior.len()
    }

    /// `a·I + (1 − a)·1c̃ᵀ` — every matrix in this kernel's family.
    fn mix(&self, a: f64) -> Array2<f64> {
        let k = self.num_classes();
        let mut m = Array2::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                m[[i, j]] = (1.0 - a) * self.prior[j];
            }
            m[[i, i]] += a;
        }
        m
    }

    /// Single-step transition matrix `U_t`, `t` in `1..=T`.
    pub fn u(&self, t: usize) -> Array2<f64> {
        self.mix(self.schedule.alpha(t))
    }

    /// Cumulative transition matrix `Ū_t`, `t` in `0..=T` (`Ū_0 = I`).
    pub fn ubar(&self, t: usize) -> Array2<f64> {
        self.mix(self.schedule.alpha_bar(t))
    }

    /// The pair `(U_t, Ū_t)` for one step.
    pub fn transition_matrices(&self, t: usize) -> (Array2<f64>, Array2<f64>) {
        (self.u(t), self.ubar(t))
    }

    /// Multi-step transition matrix from `t_from` back-referenced at
    /// `t_to < t_from`: the product `U_{t_to+1}···U_{t_from}`, which closes
    /// to a single mix with ratio `ᾱ_{t_from}/ᾱ_{t_to}`. With
    /// `t_to = t_from − 1` this is exactly `U_{t_from}`.
    pub fn jump(&self, t_from: usize, t_to: usize) -> Array2<f64> {
        assert!(t_to < t_from, "jump requires t_to < t_from");
        self.mix(self.schedule.alpha_bar(t_from) / self.schedule.alpha_bar(t_to))
    }
}

/// Sample each row of a (possibly unnormalized) probability matrix as a
/// one-hot row, consuming exactly one uniform draw per row.
fn sample_rows(probs: &Array2<f64>, noise: &mut dyn NoiseSource) -> Result<Array2<f64>> {
    let (n, k) = probs.dim();
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        let row = probs.row(i);
        let total: f64 = row.sum();
        if !total.is_finite() || total <= 0.0 {
            return Err(EquimolError::Numerical(format!(
                "cannot sample from probability row {i} with mass {total}"
            )));
        }
        let target = noise.uniform() * total;
        let mut cum = 0.0;
        let mut pick = None;
        let mut last_positive = 0;
        for (c, &p) in row.iter().enumerate() {
            if p <= 0.0 {
                continue; // zero-mass classes are never selectable
            }
            last_positive = c;
            cum += p;
            if cum >= target {
                pick = Some(c);
                break;
            }
        }
        // Rounding can leave cum a hair below target at the top end.
        out[[i, pick.unwrap_or(last_positive)]] = 1.0;
    }
    Ok(out)
}

/// Draw `rows` independent one-hot rows from the kernel's prior — the
/// `t = T` initialization of the reverse process. Consumes one uniform per
/// row.
pub fn sample_prior_rows(
    kernel: &TransitionKernel,
    rows: usize,
    noise: &mut dyn NoiseSource,
) -> Result<Array2<f64>> {
    let k = kernel.num_classes();
    let mut probs = Array2::zeros((rows, k));
    for mut row in probs.axis_iter_mut(Axis(0)) {
        row.assign(kernel.prior());
    }
    sample_rows(&probs, noise)
}

/// Forward-noise one-hot class rows to step `t`: each row is resampled from
/// `ᾱ_t·c_0 + (1 − ᾱ_t)·c̃`.
pub fn categorical_forward_sample(
    c0: &Array2<f64>,
    t: usize,
    kernel: &TransitionKernel,
    noise: &mut dyn NoiseSource,
) -> Result<Array2<f64>> {
    let abar = kernel.schedule().alpha_bar(t);
    let mut probs = c0 * abar;
    for mut row in probs.axis_iter_mut(Axis(0)) {
        row += &(kernel.prior() * (1.0 - abar));
    }
    sample_rows(&probs, noise)
}

/// Forward-noise a symmetric one-hot bond tensor: entries `i < j` are
/// sampled (one uniform each, row-major order) and mirrored; the diagonal
/// keeps the "none" class.
pub fn categorical_forward_sample_bonds(
    e0: &Array3<f64>,
    t: usize,
    kernel: &TransitionKernel,
    noise: &mut dyn NoiseSource,
) -> Result<Array3<f64>> {
    let n = e0.shape()[0];
    let k = e0.shape()[2];
    let upper = upper_triangle_rows(e0);
    let sampled = categorical_forward_sample(&upper, t, kernel, noise)?;
    Ok(rows_to_symmetric(&sampled, n, k))
}

/// Collect the strict upper triangle of `[n, n, k]` into `[n(n−1)/2, k]`
/// rows in row-major `(i, j)` order.
pub(crate) fn upper_triangle_rows(e: &Array3<f64>) -> Array2<f64> {
    let n = e.shape()[0];
    let k = e.shape()[2];
    let mut rows = Array2::zeros((n * (n - 1) / 2, k));
    let mut r = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            for c in 0..k {
                rows[[r, c]] = e[[i, j, c]];
            }
            r += 1;
        }
    }
    rows
}

/// Mirror upper-triangle rows back into a symmetric `[n, n, k]` tensor with
/// the diagonal one-hot at class 0 ("none").
pub(crate) fn rows_to_symmetric(rows: &Array2<f64>, n: usize, k: usize) -> Array3<f64> {
    let mut e = Array3::zeros((n, n, k));
    let mut r = 0;
    for i in 0..n {
        e[[i, i, 0]] = 1.0;
        for j in (i + 1)..n {
            for c in 0..k {
                e[[i, j, c]] = rows[[r, c]];
                e[[j, i, c]] = rows[[r, c]];
            }
            r += 1;
        }
    }
    e
}

fn one_hot_index(row: ArrayView1<f64>, what: &str) -> Result<usize> {
    let mut idx = None;
    for (c, &v) in row.iter().enumerate() {
        if v == 1.0 && idx.is_none() {
            idx = Some(c);
        } else if v != 0.0 {
            return Err(EquimolError::Contract(format!("{what} row is not one-hot")));
        }
    }
    idx.ok_or_else(|| EquimolError::Contract(format!("{what} row is not one-hot")))
}

/// Exact single-step posterior `q(c_{t−1} | c_t, c_0)` for one-hot rows:
/// `(c_t·U_tᵀ ⊙ c_0·Ū_{t−1}) / (c_0·Ū_t·c_tᵀ)`.
pub fn categorical_posterior(
    c0: ArrayView1<f64>,
    ct: ArrayView1<f64>,
    t: usize,
    kernel: &TransitionKernel,
) -> Result<Array1<f64>> {
    let i = one_hot_index(c0, "c0")?;
    let j = one_hot_index(ct, "ct")?;
    let u = kernel.u(t);
    let ubar_prev = kernel.ubar(t - 1);
    let denom = kernel.ubar(t)[[i, j]];
    if !(denom > 0.0) {
        return Err(EquimolError::Numerical(format!(
            "categorical posterior undefined: q(c_t = {j} | c_0 = {i}) = {denom}"
        )));
    }
    let k = kernel.num_classes();
    let mut out = Array1::zeros(k);
    for c in 0..k {
        out[c] = u[[c, j]] * ubar_prev[[i, c]] / denom;
    }
    Ok(out)
}

/// Reverse-transition distribution `p(c_{t_next} | c_t)` obtained by
/// marginalizing the exact strided posterior over the predicted clean-class
/// distribution `pred` (a probability vector over classes).
///
/// For each clean class `m` the posterior contributes
/// `jump[k, j] · Ū_{t_next}[m, k] / Ū_t[m, j]`, weighted by `pred[m]`.
pub fn categorical_reverse_distribution(
    pred: ArrayView1<f64>,
    ct: ArrayView1<f64>,
    t: usize,
    t_next: usize,
    kernel: &TransitionKernel,
) -> Result<Array1<f64>> {
    if pred.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(EquimolError::Numerical(
            "predicted class probabilities must be finite and non-negative".into(),
        ));
    }
    if pred.sum() <= 0.0 {
        return Err(EquimolError::Numerical(
            "predicted class probabilities are all zero".into(),
        ));
    }
    let j = one_hot_index(ct, "ct")?;
    let jump = kernel.jump(t, t_next);
    let ubar_next = kernel.ubar(t_next);
    let ubar_t = kernel.ubar(t);
    let k = kernel.num_classes();
    let mut out = Array1::<f64>::zeros(k);
    for (m, &w) in pred.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let denom = ubar_t[[m, j]];
        if !(denom > 0.0) {
            return Err(EquimolError::Numerical(format!(
                "reverse step degenerate: q(c_t = {j} | c_0 = {m}) = {denom} with weight {w}"
            )));
        }
        for c in 0..k {
            out[c] += w * jump[[c, j]] * ubar_next[[m, c]] / denom;
        }
    }
    let total = out.sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(EquimolError::Numerical(
            "reverse distribution has no probability mass".into(),
        ));
    }
    Ok(out / total)
}

/// Sample one reverse step for a matrix of class rows: `pred` holds one
/// clean-class probability vector per row, `ct` the current one-hot state.
pub fn categorical_reverse_step(
    pred: &Array2<f64>,
    ct: &Array2<f64>,
    t: usize,
    t_next: usize,
    kernel: &TransitionKernel,
    noise: &mut dyn NoiseSource,
) -> Result<Array2<f64>> {
    let n = ct.nrows();
    let k = kernel.num_classes();
    if pred.dim() != (n, k) {
        return Err(EquimolError::Contract(format!(
            "prediction shape {:?} does not match state shape ({n}, {k})",
            pred.dim()
        )));
    }
    let mut probs = Array2::zeros((n, k));
    for i in 0..n {
        let dist = categorical_reverse_distribution(pred.row(i), ct.row(i), t, t_next, kernel)?;
        probs.row_mut(i).assign(&dist);
    }
    sample_rows(&probs, noise)
}

/// Reverse step for symmetric bond tensors: upper-triangle rows are stepped
/// and mirrored, diagonal pinned to "none".
pub fn categorical_reverse_step_bonds(
    pred: &Array3<f64>,
    et: &Array3<f64>,
    t: usize,
    t_next: usize,
    kernel: &TransitionKernel,
    noise: &mut dyn NoiseSource,
) -> Result<Array3<f64>> {
    let n = et.shape()[0];
    let k = et.shape()[2];
    let pred_rows = upper_triangle_rows(pred);
    let state_rows = upper_triangle_rows(et);
    let stepped = categorical_reverse_step(&pred_rows, &state_rows, t, t_next, kernel, noise)?;
    Ok(rows_to_symmetric(&stepped, n, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::noise::RngNoise;
    use crate::schedule::make_adaptive_cosine;
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn seeded(seed: u64) -> RngNoise<ChaCha20Rng> {
        RngNoise::new(ChaCha20Rng::seed_from_u64(seed))
    }

    /// A schedule with hand-picked per-step rates, for closed-form checks.
    /// Bypasses construction-time validation on purpose: some fixtures pin
    /// degenerate rates (α = 1 or ᾱ = 0) that real schedules exclude.
    fn synthetic_schedule(alpha: Vec<f64>) -> NoiseSchedule {
        let mut alpha_bar = vec![1.0];
        for &a in &alpha {
            alpha_bar.push(alpha_bar.last().unwrap() * a);
        }
        NoiseSchedule {
            steps: alpha.len(),
            s: 1e-4,
            nu: 1.0,
            beta: alpha.iter().map(|a| 1.0 - a).collect(),
            alpha,
            alpha_bar,
        }
    }

    fn synthetic_kernel(prior: &[f64], alpha: Vec<f64>) -> TransitionKernel {
        TransitionKernel {
            prior: arr1(prior),
            schedule: synthetic_schedule(alpha),
        }
    }

    fn random_prior(k: usize, rng: &mut ChaCha20Rng) -> Array1<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.05).collect();
        let sum: f64 = raw.iter().sum();
        arr1(&raw.iter().map(|v| v / sum).collect::<Vec<_>>())
    }

    #[test]
    fn kernel_rejects_bad_priors() {
        let sched = make_adaptive_cosine(10, 1.0, 1e-4).unwrap();
        assert!(TransitionKernel::new(arr1(&[0.5, 0.6]), sched.clone()).is_err());
        assert!(TransitionKernel::new(arr1(&[1.2, -0.2]), sched.clone()).is_err());
        assert!(TransitionKernel::new(arr1(&[1.0]), sched.clone()).is_err());
        assert!(TransitionKernel::new(arr1(&[0.25; 4]), sched).is_ok());
    }

    #[test]
    fn transition_matrices_are_row_stochastic_and_satisfy_the_semigroup() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        for case in 0..100 {
            let k = 2 + (case % 4); // K in 2..=5
            let steps = 10 + (case % 3) * 5;
            let nu = [1.0, 1.5, 2.5][case % 3];
            let sched = make_adaptive_cosine(steps, nu, 1e-4).unwrap();
            let kernel = TransitionKernel::new(random_prior(k, &mut rng), sched).unwrap();
            let t = 1 + rng.gen_range(0..steps);
            let (u, ubar) = kernel.transition_matrices(t);
            for m in [&u, &ubar] {
                for row in m.axis_iter(Axis(0)) {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                    assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
            let composed = kernel.ubar(t - 1).dot(&u);
            for (a, b) in composed.iter().zip(ubar.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_step_matrix_matches_the_closed_form_by_hand() {
        // One step at rate 0.9 toward prior (0.5, 0.3, 0.2): staying
        // probability 0.9 + 0.1·0.5, leaving probabilities 0.1·prior.
        let kernel = synthetic_kernel(&[0.5, 0.3, 0.2], vec![0.9]);
        let u = kernel.u(1);
        let expect = [[0.95, 0.03, 0.02], [0.05, 0.93, 0.02], [0.05, 0.03, 0.92]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((u[[i, j]] - expect[i][j]).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn cumulative_matrix_limits_are_identity_and_prior() {
        // ᾱ = 1 at t = 0 → identity; ᾱ = 0 → every row is the prior.
        let kernel = synthetic_kernel(&[0.25; 4], vec![1.0, 0.0]);
        let id = kernel.ubar(0);
        let prior_rows = kernel.ubar(2);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(id[[i, j]], if i == j { 1.0 } else { 0.0 });
                assert!((prior_rows[[i, j]] - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn jump_matrix_equals_the_explicit_product_of_steps() {
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let sched = make_adaptive_cosine(12, 1.5, 1e-4).unwrap();
        let kernel = TransitionKernel::new(random_prior(4, &mut rng), sched).unwrap();
        for (t_from, t_to) in [(12, 9), (7, 2), (5, 4), (12, 0)] {
            let jump = kernel.jump(t_from, t_to);
            let mut product = Array2::eye(4);
            for t in (t_to + 1)..=t_from {
                product = product.dot(&kernel.u(t));
            }
            for (a, b) in jump.iter().zip(product.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Stride one is exactly the single-step matrix.
        let diff = &kernel.jump(6, 5) - &kernel.u(6);
        assert!(diff.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn forward_sample_frequency_matches_the_mixture_probability() {
        // Two classes, uniform prior, ᾱ = 0.6, clean class 0:
        // P(class 0) = 0.6 + 0.4·0.5 = 0.8.
        let kernel = synthetic_kernel(&[0.5, 0.5], vec![0.6]);
        let c0 = ndarray::arr2(&[[1.0, 0.0]]);
        let mut noise = seeded(7);
        let draws = 100_000;
        let mut hits = 0usize;
        for _ in 0..draws {
            let ct = categorical_forward_sample(&c0, 1, &kernel, &mut noise).unwrap();
            if ct[[0, 0]] == 1.0 {
                hits += 1;
            }
        }
        let freq = hits as f64 / draws as f64;
        // 4σ band around 0.8 with σ = √(0.8·0.2/draws) ≈ 0.00126.
        assert!((freq - 0.8).abs() < 0.0051, "freq = {freq}");
    }

    #[test]
    fn forward_sample_limits_identity_and_prior() {
        let sched = make_adaptive_cosine(500, 1.0, 1e-4).unwrap();
        let prior = arr1(&[0.2, 0.5, 0.3]);
        let kernel = TransitionKernel::new(prior.clone(), sched).unwrap();
        let c0 = ndarray::arr2(&[[0.0, 1.0, 0.0]]);
        let mut noise = seeded(11);

        // Near t = 1 the state keeps its class essentially always.
        let mut same = 0usize;
        for _ in 0..10_000 {
            let ct = categorical_forward_sample(&c0, 1, &kernel, &mut noise).unwrap();
            if ct[[0, 1]] == 1.0 {
                same += 1;
            }
        }
        assert!(same >= 9_990, "kept class {same}/10000 times");

        // At t = T the class frequencies converge to the prior.
        let mut counts = [0usize; 3];
        let draws = 100_000;
        for _ in 0..draws {
            let ct = categorical_forward_sample(&c0, 500, &kernel, &mut noise).unwrap();
            counts[ct.row(0).iter().position(|&v| v == 1.0).unwrap()] += 1;
        }
        for (c, &count) in counts.iter().enumerate() {
            let freq = count as f64 / draws as f64;
            assert!((freq - prior[c]).abs() < 0.01, "class {c}: {freq} vs {}", prior[c]);
        }
    }

    #[test]
    fn bond_forward_sampling_preserves_symmetry_and_none_diagonal() {
        let sched = make_adaptive_cosine(100, 1.5, 1e-4).unwrap();
        let kernel = TransitionKernel::new(arr1(&[0.6, 0.2, 0.1, 0.05, 0.05]), sched).unwrap();
        let n = 5;
        let mut e0 = Array3::zeros((n, n, 5));
        for i in 0..n {
            for j in 0..n {
                e0[[i, j, if i != j && (i + j) % 3 == 0 { 1 } else { 0 }]] = 1.0;
            }
        }
        for i in 0..n {
            for c in 0..5 {
                e0[[i, i, c]] = if c == 0 { 1.0 } else { 0.0 };
            }
        }
        let mut noise = seeded(13);
        for t in [1, 25, 50, 100] {
            let et = categorical_forward_sample_bonds(&e0, t, &kernel, &mut noise).unwrap();
            for i in 0..n {
                assert_eq!(et[[i, i, 0]], 1.0);
                for j in 0..n {
                    let row = et.slice(ndarray::s![i, j, ..]);
                    assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
                    for c in 0..5 {
                        assert_eq!(et[[i, j, c]], et[[j, i, c]]);
                    }
                }
            }
        }
    }

    /// Independent oracle: Bayes' rule with transition probabilities taken
    /// from explicit matrix chains (products of single-step matrices), never
    /// from the closed-form cumulative matrix under test.
    fn bayes_posterior_by_enumeration(
        kernel: &TransitionKernel,
        i: usize,
        j: usize,
        t: usize,
    ) -> Array1<f64> {
        let k = kernel.num_classes();
        let mut chain_prev = Array2::eye(k); // explicit product U_1···U_{t−1}
        for s in 1..t {
            chain_prev = chain_prev.dot(&kernel.u(s));
        }
        let chain_t = chain_prev.dot(&kernel.u(t));
        let mut post = Array1::zeros(k);
        for c in 0..k {
            post[c] = kernel.u(t)[[c, j]] * chain_prev[[i, c]] / chain_t[[i, j]];
        }
        post
    }

    #[test]
    fn posterior_matches_brute_force_bayes_enumeration() {
        let mut rng = ChaCha20Rng::seed_from_u64(47);
        for k in 2..=5 {
            let sched = make_adaptive_cosine(10, 1.0, 1e-4).unwrap();
            let kernel = TransitionKernel::new(random_prior(k, &mut rng), sched).unwrap();
            for t in 1..=10 {
                for i in 0..k {
                    for j in 0..k {
                        let mut c0 = Array1::zeros(k);
                        let mut ct = Array1::zeros(k);
                        c0[i] = 1.0;
                        ct[j] = 1.0;
                        let got =
                            categorical_posterior(c0.view(), ct.view(), t, &kernel).unwrap();
                        let want = bayes_posterior_by_enumeration(&kernel, i, j, t);
                        assert!((got.sum() - 1.0).abs() < 1e-10);
                        for (a, b) in got.iter().zip(want.iter()) {
                            assert!((a - b).abs() < 1e-10, "k={k} t={t} i={i} j={j}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn posterior_at_step_one_is_a_delta_at_the_clean_class() {
        let sched = make_adaptive_cosine(10, 1.5, 1e-4).unwrap();
        let kernel = TransitionKernel::new(arr1(&[0.3, 0.3, 0.4]), sched).unwrap();
        let c0 = arr1(&[0.0, 1.0, 0.0]);
        for j in 0..3 {
            let mut ct = Array1::zeros(3);
            ct[j] = 1.0;
            let post = categorical_posterior(c0.view(), ct.view(), 1, &kernel).unwrap();
            assert!((post[1] - 1.0).abs() < 1e-14);
            assert!(post[0].abs() < 1e-14 && post[2].abs() < 1e-14);
        }
    }

    #[test]
    fn posterior_with_zero_step_rate_is_a_delta_at_the_current_class() {
        // α_2 = 1 means step 2 cannot change the class, so c_{t−1} = c_t.
        let kernel = synthetic_kernel(&[0.5, 0.3, 0.2], vec![0.9, 1.0]);
        let c0 = arr1(&[1.0, 0.0, 0.0]);
        let ct = arr1(&[0.0, 0.0, 1.0]);
        let post = categorical_posterior(c0.view(), ct.view(), 2, &kernel).unwrap();
        assert!((post[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn posterior_with_impossible_pair_is_a_degeneracy_error() {
        // Prior gives class 2 zero mass, and the clean class differs, so
        // observing c_t = 2 is impossible under the kernel.
        let kernel = synthetic_kernel(&[0.5, 0.5, 0.0], vec![0.9]);
        let c0 = arr1(&[1.0, 0.0, 0.0]);
        let ct = arr1(&[0.0, 0.0, 1.0]);
        let err = categorical_posterior(c0.view(), ct.view(), 1, &kernel).unwrap_err();
        assert!(matches!(err, EquimolError::Numerical(_)));
    }

    #[test]
    fn reverse_distribution_with_delta_prediction_reduces_to_the_posterior() {
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let sched = make_adaptive_cosine(10, 1.0, 1e-4).unwrap();
        let kernel = TransitionKernel::new(random_prior(4, &mut rng), sched).unwrap();
        for t in 2..=10 {
            for m in 0..4 {
                let mut pred = Array1::zeros(4);
                pred[m] = 1.0;
                let mut ct = Array1::zeros(4);
                ct[(m + 1) % 4] = 1.0;
                let via_reverse =
                    categorical_reverse_distribution(pred.view(), ct.view(), t, t - 1, &kernel)
                        .unwrap();
                let via_posterior =
                    categorical_posterior(pred.view(), ct.view(), t, &kernel).unwrap();
                for (a, b) in via_reverse.iter().zip(via_posterior.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reverse_distribution_matches_marginalized_enumeration() {
        let mut rng = ChaCha20Rng::seed_from_u64(59);
        for k in 2..=4 {
            let sched = make_adaptive_cosine(8, 1.5, 1e-4).unwrap();
            let kernel = TransitionKernel::new(random_prior(k, &mut rng), sched).unwrap();
            for t in 1..=8 {
                let pred = random_prior(k, &mut rng);
                for j in 0..k {
                    let mut ct = Array1::zeros(k);
                    ct[j] = 1.0;
                    let got =
                        categorical_reverse_distribution(pred.view(), ct.view(), t, t - 1, &kernel)
                            .unwrap();
                    // Oracle: weight each enumeration-based posterior by the
                    // predicted clean-class probability.
                    let mut want = Array1::<f64>::zeros(k);
                    for m in 0..k {
                        let post = bayes_posterior_by_enumeration(&kernel, m, j, t);
                        want = want + post * pred[m];
                    }
                    for (a, b) in got.iter().zip(want.iter()) {
                        assert!((a - b).abs() < 1e-10, "k={k} t={t} j={j}");
                    }
                }
            }
        }
    }

    #[test]
    fn strided_reverse_distribution_matches_two_single_steps_in_law() {
        // Jumping t → t−2 in one reverse move must equal composing the exact
        // strided posterior: check against enumeration over the intermediate
        // step: p(c_{t−2} | c_t) = Σ_m pred_m · q(c_{t−2} | c_t, e_m) with
        // q computed from explicit chains.
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        let sched = make_adaptive_cosine(10, 1.0, 1e-4).unwrap();
        let kernel = TransitionKernel::new(random_prior(3, &mut rng), sched).unwrap();
        let pred = random_prior(3, &mut rng);
        let t = 7;
        let t_next = 5;
        for j in 0..3 {
            let mut ct = Array1::zeros(3);
            ct[j] = 1.0;
            let got =
                categorical_reverse_distribution(pred.view(), ct.view(), t, t_next, &kernel)
                    .unwrap();
            let k = 3;
            // chains built from explicit single-step products only
            let chain = |upto: usize| {
                let mut m = Array2::eye(k);
                for s in 1..=upto {
                    m = m.dot(&kernel.u(s));
                }
                m
            };
            let to_next = chain(t_next);
            let to_t = chain(t);
            let mut mid = Array2::eye(k); // U_{t_next+1}···U_t
            for s in (t_next + 1)..=t {
                mid = mid.dot(&kernel.u(s));
            }
            let mut want = Array1::<f64>::zeros(k);
            for m in 0..k {
                for c in 0..k {
                    want[c] += pred[m] * mid[[c, j]] * to_next[[m, c]] / to_t[[m, j]];
                }
            }
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reverse_step_at_step_one_with_delta_prediction_is_deterministic() {
        let sched = make_adaptive_cosine(10, 1.0, 1e-4).unwrap();
        let kernel = TransitionKernel::new(arr1(&[0.25; 4]), sched).unwrap();
        let pred = ndarray::arr2(&[[0.0, 0.0, 1.0, 0.0]]);
        let ct = ndarray::arr2(&[[1.0, 0.0, 0.0, 0.0]]);
        let mut noise = seeded(17);
        for _ in 0..50 {
            let c0 = categorical_reverse_step(&pred, &ct, 1, 0, &kernel, &mut noise).unwrap();
            assert_eq!(c0[[0, 2]], 1.0);
        }
    }

    #[test]
    fn reverse_step_rejects_all_zero_prediction_rows() {
        let sched = make_adaptive_cosine(10, 1.0, 1e-4).unwrap();
        let kernel = TransitionKernel::new(arr1(&[0.5, 0.5]), sched).unwrap();
        let pred = ndarray::arr2(&[[0.0, 0.0]]);
        let ct = ndarray::arr2(&[[1.0, 0.0]]);
        let mut noise = seeded(19);
        let err = categorical_reverse_step(&pred, &ct, 5, 4, &kernel, &mut noise).unwrap_err();
        assert!(matches!(err, EquimolError::Numerical(_)));
    }

    #[test]
    fn reverse_step_bonds_keeps_symmetry() {
        let sched = make_adaptive_cosine(20, 1.5, 1e-4).unwrap();
        let kernel = TransitionKernel::new(arr1(&[0.7, 0.2, 0.1]), sched).unwrap();
        let n = 4;
        let mut et = Array3::zeros((n, n, 3));
        for i in 0..n {
            for j in 0..n {
                et[[i, j, 0]] = 1.0;
            }
        }
        let pred = Array3::from_elem((n, n, 3), 1.0 / 3.0);
        let mut noise = seeded(23);
        let stepped =
            categorical_reverse_step_bonds(&pred, &et, 10, 9, &kernel, &mut noise).unwrap();
        for i in 0..n {
            assert_eq!(stepped[[i, i, 0]], 1.0);
            for j in 0..n {
                for c in 0..3 {
                    assert_eq!(stepped[[i, j, c]], stepped[[j, i, c]]);
                }
            }
        }
    }

    #[test]
    fn sampled_rows_consume_exactly_one_uniform_each() {
        // Replay a stream with a known number of uniforms: sampling n rows
        // must consume exactly n draws, no more, no fewer.
        use crate::diffusion::noise::{NoiseDraw, ReplayNoise};
        let probs = ndarray::arr2(&[[0.5, 0.5], [0.1, 0.9], [1.0, 0.0]]);
        let record = vec![
            NoiseDraw::Uniform(0.3),
            NoiseDraw::Uniform(0.05),
            NoiseDraw::Uniform(0.999),
        ];
        let mut replay = ReplayNoise::new(record);
        let out = sample_rows(&probs, &mut replay).unwrap();
        assert_eq!(out[[0, 0]], 1.0); // 0.3·1.0 ≤ 0.5 → class 0
        assert_eq!(out[[1, 0]], 1.0); // 0.05 ≤ 0.1 → class 0
        assert_eq!(out[[2, 0]], 1.0); // all mass on class 0
    }
}
