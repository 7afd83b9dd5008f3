//! Full reverse trajectories: plain generation, fixed-context generation,
//! and gradient-guided generation.
//!
//! All three entry points share the same skeleton: initialize every modality
//! from its prior at `t = T`, walk a descending timestep sequence, and at
//! each transition (a) hand the model a centered copy of each state, (b)
//! turn its outputs into clean-data estimates, and (c) advance each modality
//! with its reverse step. Noise is consumed in a fixed documented order —
//! per molecule: coordinates, atoms, charges, bonds (upper triangle,
//! row-major), then extra features (aromatic, ring, hybridization) — so a
//! recorded trajectory can be replayed draw for draw.

use crate::error::EquimolError;
use crate::molgraph::Molecule;
use crate::Result;
use ndarray::{Array2, Array3, Axis};

use super::gaussian::{
    ddim_coordinate_step, eps_to_x0, gaussian_reverse_step, guided_reverse_step,
    project_columns_zero_mean,
};
use super::kernels::{
    categorical_reverse_step, categorical_reverse_step_bonds, rows_to_symmetric,
    sample_prior_rows, upper_triangle_rows,
};
use super::noise::NoiseSource;
use super::{
    decode, encode_clean, softmax_rows, Denoiser, DiffusionProcess, ExtraChannels, NoisyMolecule, Parameterization, StateSpace,
};

/// Reverse-process flavor. `Ddpm` takes every step stochastically;
/// `Ddim { stride }` jumps `stride` steps at a time, deterministically for
/// Gaussian modalities and through the exact strided posterior for
/// categorical ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Ddpm,
    Ddim { stride: usize },
}

/// The descending `(t, t_next)` transitions a mode visits. The last
/// transition always lands on 0; the number of transitions is the number of
/// model calls (`T` for DDPM, `⌈T/stride⌉` for DDIM).
pub fn reverse_transitions(steps: usize, mode: SampleMode) -> Result<Vec<(usize, usize)>> {
    let stride = match mode {
        SampleMode::Ddpm => 1,
        SampleMode::Ddim { stride } => {
            if stride == 0 {
                return Err(EquimolError::Config("sampling stride must be at least 1".into()));
            }
            stride
        }
    };
    let mut out = Vec::new();
    let mut t = steps;
    while t > 0 {
        let t_next = t.saturating_sub(stride);
        out.push((t, t_next));
        t = t_next;
    }
    Ok(out)
}

/// Per-modality clean-data estimates derived from one model prediction, in
/// the same frame as the sampler state. Categorical entries hold class
/// probabilities in the discrete state space and value estimates in the
/// continuous one.
struct CleanEstimate {
    coords: Array2<f64>,
    atoms: Array2<f64>,
    charges: Array2<f64>,
    bonds: Array3<f64>,
    extras: Option<ExtraChannels>,
}

fn check_shape(name: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(EquimolError::Contract(format!(
            "model {name} output shape {got:?} does not match expected {want:?}"
        )));
    }
    Ok(())
}

/// Run the model on centered copies of the states and convert its outputs
/// to clean-data estimates in the original (possibly uncentered) frame.
fn predict_clean(
    model: &dyn Denoiser,
    states: &[NoisyMolecule],
    process: &DiffusionProcess,
) -> Result<Vec<CleanEstimate>> {
    let param = model.parameterization();
    let mut inputs = Vec::with_capacity(states.len());
    let mut shifts = Vec::with_capacity(states.len());
    for state in states {
        let mut input = state.clone();
        let mean = input.coords.mean_axis(Axis(0)).unwrap();
        for mut row in input.coords.axis_iter_mut(Axis(0)) {
            row -= &mean;
        }
        shifts.push(mean);
        inputs.push(input);
    }
    let preds = model.predict_batch(&inputs)?;
    if preds.len() != states.len() {
        return Err(EquimolError::Contract(format!(
            "model returned {} predictions for {} states",
            preds.len(),
            states.len()
        )));
    }

    let mut out = Vec::with_capacity(states.len());
    for ((state, pred), shift) in states.iter().zip(preds.iter()).zip(shifts.iter()) {
        let n = state.num_atoms();
        check_shape("coordinate", pred.coords.dim(), (n, 3))?;
        check_shape("atom", pred.atoms.dim(), (n, process.atoms.num_classes()))?;
        check_shape("charge", pred.charges.dim(), (n, process.charges.num_classes()))?;
        let kb = process.bonds.num_classes();
        if pred.bonds.shape() != [n, n, kb] {
            return Err(EquimolError::Contract(format!(
                "model bond output shape {:?} does not match expected [{n}, {n}, {kb}]",
                pred.bonds.shape()
            )));
        }
        if pred.extras.is_some() != state.extras.is_some() {
            return Err(EquimolError::Contract(
                "model extra-feature outputs do not match the state's extra features".into(),
            ));
        }

        let t = state.t;
        // Coordinates: convert noise predictions in the centered frame the
        // model saw, then shift back into the state's frame.
        let centered_xt = {
            let mut c = state.coords.clone();
            for mut row in c.axis_iter_mut(Axis(0)) {
                row -= shift;
            }
            c
        };
        let mut coords = match param {
            Parameterization::X0 => pred.coords.clone(),
            Parameterization::Eps => {
                eps_to_x0(&pred.coords, &centered_xt, process.coords.alpha_bar(t))
            }
        };
        for mut row in coords.axis_iter_mut(Axis(0)) {
            row += shift;
        }

        let est = match process.state_space {
            StateSpace::Discrete => {
                let upper = softmax_rows(&upper_triangle_rows(&pred.bonds));
                CleanEstimate {
                    coords,
                    atoms: softmax_rows(&pred.atoms),
                    charges: softmax_rows(&pred.charges),
                    bonds: rows_to_symmetric(&upper, n, kb),
                    extras: pred.extras.as_ref().map(|e| ExtraChannels {
                        aromatic: softmax_rows(&e.aromatic),
                        ring: softmax_rows(&e.ring),
                        hybridization: softmax_rows(&e.hybridization),
                    }),
                }
            }
            StateSpace::Continuous => {
                let value = |p: &Array2<f64>, x: &Array2<f64>, abar: f64| match param {
                    Parameterization::X0 => p.clone(),
                    Parameterization::Eps => eps_to_x0(p, x, abar),
                };
                let bonds = match param {
                    Parameterization::X0 => pred.bonds.clone(),
                    Parameterization::Eps => {
                        // Elementwise linear map, so symmetry is preserved.
                        let abar = process.bonds.schedule().alpha_bar(t);
                        (&state.bonds - &(&pred.bonds * (1.0 - abar).sqrt())) / abar.sqrt()
                    }
                };
                let extras = match (&pred.extras, &state.extras, &process.extras) {
                    (Some(p), Some(s), Some(k)) => Some(ExtraChannels {
                        aromatic: value(
                            &p.aromatic,
                            &s.aromatic,
                            k.aromatic.schedule().alpha_bar(t),
                        ),
                        ring: value(&p.ring, &s.ring, k.ring.schedule().alpha_bar(t)),
                        hybridization: value(
                            &p.hybridization,
                            &s.hybridization,
                            k.hybridization.schedule().alpha_bar(t),
                        ),
                    }),
                    _ => None,
                };
                CleanEstimate {
                    coords,
                    atoms: value(&pred.atoms, &state.atoms, process.atoms.schedule().alpha_bar(t)),
                    charges: value(
                        &pred.charges,
                        &state.charges,
                        process.charges.schedule().alpha_bar(t),
                    ),
                    bonds,
                    extras,
                }
            }
        };
        out.push(est);
    }
    Ok(out)
}

/// Draw a fresh `t = T` state: coordinates from the centered Gaussian prior,
/// categorical modalities from their priors (discrete) or from per-modality
/// Gaussian priors (continuous).
fn init_state(
    n: usize,
    process: &DiffusionProcess,
    noise: &mut dyn NoiseSource,
) -> Result<NoisyMolecule> {
    let t_max = process.steps();
    let coord_scale = (1.0 - process.coords.alpha_bar(t_max)).sqrt();
    let raw = noise
        .standard_normal(&[n, 3])
        .into_dimensionality()
        .expect("2-d draw");
    let coords = project_columns_zero_mean(&raw) * coord_scale;

    let pairs = n * (n - 1) / 2;
    let (atoms, charges, bonds, extras) = match process.state_space {
        StateSpace::Discrete => {
            let atoms = sample_prior_rows(&process.atoms, n, noise)?;
            let charges = sample_prior_rows(&process.charges, n, noise)?;
            let upper = sample_prior_rows(&process.bonds, pairs, noise)?;
            let bonds = rows_to_symmetric(&upper, n, process.bonds.num_classes());
            let extras = match &process.extras {
                Some(k) => Some(ExtraChannels {
                    aromatic: sample_prior_rows(&k.aromatic, n, noise)?,
                    ring: sample_prior_rows(&k.ring, n, noise)?,
                    hybridization: sample_prior_rows(&k.hybridization, n, noise)?,
                }),
                None => None,
            };
            (atoms, charges, bonds, extras)
        }
        StateSpace::Continuous => {
            let mut gauss = |rows: usize, kernel: &super::TransitionKernel| -> Array2<f64> {
                let scale = (1.0 - kernel.schedule().alpha_bar(t_max)).sqrt();
                let draw: Array2<f64> = noise
                    .standard_normal(&[rows, kernel.num_classes()])
                    .into_dimensionality()
                    .expect("2-d draw");
                draw * scale
            };
            let atoms = gauss(n, &process.atoms);
            let charges = gauss(n, &process.charges);
            let upper = gauss(pairs, &process.bonds);
            let bonds = rows_to_symmetric(&upper, n, process.bonds.num_classes());
            let extras = match &process.extras {
                Some(k) => Some(ExtraChannels {
                    aromatic: gauss(n, &k.aromatic),
                    ring: gauss(n, &k.ring),
                    hybridization: gauss(n, &k.hybridization),
                }),
                None => None,
            };
            (atoms, charges, bonds, extras)
        }
    };

    Ok(NoisyMolecule { t: t_max, coords, atoms, charges, bonds, extras })
}

/// Advance one molecule from `t` to `t_next` across every modality.
/// `guidance`, when present, shifts the coordinate posterior mean (DDPM
/// coordinate steps only).
#[allow(clippy::too_many_arguments)]
fn step_molecule(
    state: &NoisyMolecule,
    est: &CleanEstimate,
    t: usize,
    t_next: usize,
    mode: SampleMode,
    process: &DiffusionProcess,
    guidance: Option<(&Array2<f64>, f64)>,
    noise: &mut dyn NoiseSource,
) -> Result<NoisyMolecule> {
    let ddim = matches!(mode, SampleMode::Ddim { .. });

    let coords = if ddim {
        ddim_coordinate_step(&est.coords, &state.coords, t, t_next, &process.coords)?
    } else {
        debug_assert_eq!(t_next + 1, t, "stochastic steps move one step at a time");
        match guidance {
            Some((grad, scale)) => guided_reverse_step(
                &est.coords,
                &state.coords,
                t,
                &process.coords,
                grad,
                scale,
                noise,
            )?,
            None => gaussian_reverse_step(
                &est.coords,
                &state.coords,
                t,
                &process.coords,
                noise,
                true,
            )?,
        }
    };

    let (atoms, charges, bonds, extras) = match process.state_space {
        StateSpace::Discrete => {
            let atoms =
                categorical_reverse_step(&est.atoms, &state.atoms, t, t_next, &process.atoms, noise)?;
            let charges = categorical_reverse_step(
                &est.charges,
                &state.charges,
                t,
                t_next,
                &process.charges,
                noise,
            )?;
            let bonds = categorical_reverse_step_bonds(
                &est.bonds,
                &state.bonds,
                t,
                t_next,
                &process.bonds,
                noise,
            )?;
            let extras = match (&est.extras, &state.extras, &process.extras) {
                (Some(e), Some(s), Some(k)) => Some(ExtraChannels {
                    aromatic: categorical_reverse_step(
                        &e.aromatic,
                        &s.aromatic,
                        t,
                        t_next,
                        &k.aromatic,
                        noise,
                    )?,
                    ring: categorical_reverse_step(&e.ring, &s.ring, t, t_next, &k.ring, noise)?,
                    hybridization: categorical_reverse_step(
                        &e.hybridization,
                        &s.hybridization,
                        t,
                        t_next,
                        &k.hybridization,
                        noise,
                    )?,
                }),
                _ => None,
            };
            (atoms, charges, bonds, extras)
        }
        StateSpace::Continuous => {
            let gauss_step = |x0_hat: &Array2<f64>,
                              xt: &Array2<f64>,
                              kernel: &super::TransitionKernel,
                              noise: &mut dyn NoiseSource|
             -> Result<Array2<f64>> {
                if ddim {
                    ddim_coordinate_step(x0_hat, xt, t, t_next, kernel.schedule())
                } else {
                    gaussian_reverse_step(x0_hat, xt, t, kernel.schedule(), noise, false)
                }
            };
            let atoms = gauss_step(&est.atoms, &state.atoms, &process.atoms, noise)?;
            let charges = gauss_step(&est.charges, &state.charges, &process.charges, noise)?;
            let n = state.num_atoms();
            let kb = process.bonds.num_classes();
            let stepped_upper = gauss_step(
                &upper_triangle_rows(&est.bonds),
                &upper_triangle_rows(&state.bonds),
                &process.bonds,
                noise,
            )?;
            let bonds = rows_to_symmetric(&stepped_upper, n, kb);
            let extras = match (&est.extras, &state.extras, &process.extras) {
                (Some(e), Some(s), Some(k)) => Some(ExtraChannels {
                    aromatic: gauss_step(&e.aromatic, &s.aromatic, &k.aromatic, noise)?,
                    ring: gauss_step(&e.ring, &s.ring, &k.ring, noise)?,
                    hybridization: gauss_step(
                        &e.hybridization,
                        &s.hybridization,
                        &k.hybridization,
                        noise,
                    )?,
                }),
                _ => None,
            };
            (atoms, charges, bonds, extras)
        }
    };

    Ok(NoisyMolecule { t: t_next, coords, atoms, charges, bonds, extras })
}

fn ensure_parameterization_fits(model: &dyn Denoiser, process: &DiffusionProcess) -> Result<()> {
    if model.parameterization() == Parameterization::Eps
        && process.state_space == StateSpace::Discrete
    {
        return Err(EquimolError::Config(
            "noise parameterization requires the continuous state space; \
             categorical diffusion has no noise to predict"
                .into(),
        ));
    }
    Ok(())
}

/// Generate a batch of molecules jointly (one model call per transition for
/// the whole batch). `observer`, when given, sees the shared state list
/// after initialization and after every transition.
pub fn sample_batch_observed(
    model: &dyn Denoiser,
    sizes: &[usize],
    process: &DiffusionProcess,
    mode: SampleMode,
    noise: &mut dyn NoiseSource,
    mut observer: Option<&mut dyn FnMut(&[NoisyMolecule])>,
) -> Result<Vec<Molecule>> {
    ensure_parameterization_fits(model, process)?;
    if sizes.iter().any(|&n| n == 0) {
        return Err(EquimolError::Config("cannot sample a molecule with zero atoms".into()));
    }
    let transitions = reverse_transitions(process.steps(), mode)?;

    let mut states = Vec::with_capacity(sizes.len());
    for &n in sizes {
        states.push(init_state(n, process, noise)?);
    }
    if let Some(obs) = observer.as_deref_mut() {
        obs(&states);
    }

    for &(t, t_next) in &transitions {
        let estimates = predict_clean(model, &states, process)?;
        for (state, est) in states.iter_mut().zip(estimates.iter()) {
            *state = step_molecule(state, est, t, t_next, mode, process, None, noise)?;
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(&states);
        }
    }

    Ok(states.iter().map(|s| decode(s, process.extras.is_some())).collect())
}

/// Generate a batch of molecules with the given atom counts.
pub fn sample_batch(
    model: &dyn Denoiser,
    sizes: &[usize],
    process: &DiffusionProcess,
    mode: SampleMode,
    noise: &mut dyn NoiseSource,
) -> Result<Vec<Molecule>> {
    sample_batch_observed(model, sizes, process, mode, noise, None)
}

/// Generate a single molecule with `n_atoms` atoms.
pub fn sample(
    model: &dyn Denoiser,
    n_atoms: usize,
    process: &DiffusionProcess,
    mode: SampleMode,
    noise: &mut dyn NoiseSource,
) -> Result<Molecule> {
    Ok(sample_batch(model, &[n_atoms], process, mode, noise)?
        .pop()
        .expect("one size in, one molecule out"))
}

/// A molecule with a node mask naming which atoms are fixed context.
/// Feature entries for free (unmasked) atoms are placeholders; they are
/// regenerated from scratch.
#[derive(Debug, Clone)]
pub struct ConditioningContext {
    pub molecule: Molecule,
    pub fixed: Vec<bool>,
}

/// Generate with fixed context: masked atoms keep their clean coordinates,
/// classes, and mutual bonds at every reverse step; only free atoms (and
/// bonds with at least one free endpoint) are denoised. The fixed atoms'
/// coordinates in the result equal the input exactly.
pub fn conditioned_sample(
    model: &dyn Denoiser,
    context: &ConditioningContext,
    process: &DiffusionProcess,
    mode: SampleMode,
    noise: &mut dyn NoiseSource,
) -> Result<Molecule> {
    conditioned_sample_observed(model, context, process, mode, noise, None)
}

/// [`conditioned_sample`] with a per-transition observer (same protocol as
/// [`sample_batch_observed`]; states are in the context-centered frame).
pub fn conditioned_sample_observed(
    model: &dyn Denoiser,
    context: &ConditioningContext,
    process: &DiffusionProcess,
    mode: SampleMode,
    noise: &mut dyn NoiseSource,
    mut observer: Option<&mut dyn FnMut(&[NoisyMolecule])>,
) -> Result<Molecule> {
    ensure_parameterization_fits(model, process)?;
    let n = context.molecule.num_atoms();
    if context.fixed.len() != n {
        return Err(EquimolError::Contract(format!(
            "context mask has {} entries for {n} atoms",
            context.fixed.len()
        )));
    }
    if context.fixed.iter().all(|&f| f) {
        return Err(EquimolError::Config(
            "context mask fixes every atom; nothing to generate".into(),
        ));
    }
    if context.fixed.iter().all(|&f| !f) {
        // No context at all: this is plain sampling.
        return sample(model, n, process, mode, noise);
    }

    let scale = process.atom_scale(model.parameterization());
    let mut clean = encode_clean(&context.molecule, process, scale)?;
    // Pin the frame to the fixed atoms: center on the context centroid so
    // the clean context rows are constant for the whole trajectory.
    let ctx_rows: Vec<usize> =
        (0..n).filter(|&i| context.fixed[i]).collect();
    let mut centroid = [0.0f64; 3];
    for &i in &ctx_rows {
        for c in 0..3 {
            centroid[c] += context.molecule.positions[[i, c]];
        }
    }
    for c in centroid.iter_mut() {
        *c /= ctx_rows.len() as f64;
    }
    clean.coords = &context.molecule.positions
        - &ndarray::arr2(&[centroid]).broadcast((n, 3)).unwrap().to_owned();

    let ctx_pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .filter(|&(i, j)| context.fixed[i] && context.fixed[j])
        .collect();

    let overwrite = |state: &mut NoisyMolecule| {
        for &i in &ctx_rows {
            state.coords.row_mut(i).assign(&clean.coords.row(i));
            state.atoms.row_mut(i).assign(&clean.atoms.row(i));
            state.charges.row_mut(i).assign(&clean.charges.row(i));
            if let (Some(se), Some(ce)) = (&mut state.extras, &clean.extras) {
                se.aromatic.row_mut(i).assign(&ce.aromatic.row(i));
                se.ring.row_mut(i).assign(&ce.ring.row(i));
                se.hybridization.row_mut(i).assign(&ce.hybridization.row(i));
            }
        }
        for &(i, j) in &ctx_pairs {
            for c in 0..state.bonds.shape()[2] {
                state.bonds[[i, j, c]] = clean.bonds[[i, j, c]];
                state.bonds[[j, i, c]] = clean.bonds[[j, i, c]];
            }
        }
    };

    let transitions = reverse_transitions(process.steps(), mode)?;
    let mut state = init_state(n, process, noise)?;
    overwrite(&mut state);
    if let Some(obs) = observer.as_deref_mut() {
        obs(std::slice::from_ref(&state));
    }

    for &(t, t_next) in &transitions {
        let est = predict_clean(model, std::slice::from_ref(&state), process)?
            .pop()
            .expect("one state in, one estimate out");
        state = step_molecule(&state, &est, t, t_next, mode, process, None, noise)?;
        overwrite(&mut state);
        if let Some(obs) = observer.as_deref_mut() {
            obs(std::slice::from_ref(&state));
        }
    }

    let mut out = decode(&state, process.extras.is_some());
    // Back into the input frame. Fixed atoms take their input coordinates
    // verbatim; free atoms translate by the context centroid.
    for i in 0..n {
        if context.fixed[i] {
            out.positions.row_mut(i).assign(&context.molecule.positions.row(i));
        } else {
            for c in 0..3 {
                out.positions[[i, c]] += centroid[c];
            }
        }
    }
    Ok(out)
}

/// Generate one molecule while steering coordinates along an external
/// property gradient: at every stochastic step the posterior mean shifts by
/// `scale · var · gradient_fn(current coordinates)`. Categorical modalities
/// are unguided. DDPM only — guidance perturbs the stochastic posterior.
pub fn guided_sample(
    model: &dyn Denoiser,
    n_atoms: usize,
    process: &DiffusionProcess,
    gradient_fn: &dyn Fn(&Array2<f64>) -> Array2<f64>,
    scale: f64,
    noise: &mut dyn NoiseSource,
) -> Result<Molecule> {
    ensure_parameterization_fits(model, process)?;
    if n_atoms == 0 {
        return Err(EquimolError::Config("cannot sample a molecule with zero atoms".into()));
    }
    let transitions = reverse_transitions(process.steps(), SampleMode::Ddpm)?;
    let mut state = init_state(n_atoms, process, noise)?;
    for &(t, t_next) in &transitions {
        let est = predict_clean(model, std::slice::from_ref(&state), process)?
            .pop()
            .expect("one state in, one estimate out");
        let grad = gradient_fn(&state.coords);
        state = step_molecule(
            &state,
            &est,
            t,
            t_next,
            SampleMode::Ddpm,
            process,
            Some((&grad, scale)),
            noise,
        )?;
    }
    Ok(decode(&state, process.extras.is_some()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::noise::{RecordingNoise, ReplayNoise, RngNoise};
    use crate::diffusion::{ModalityPriors, ModelPrediction, ProcessParams};
    use crate::molgraph::{BondClass, DatasetVocabulary, Molecule};
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::cell::Cell;

    fn seeded(seed: u64) -> RngNoise<ChaCha20Rng> {
        RngNoise::new(ChaCha20Rng::seed_from_u64(seed))
    }

    fn process(steps: usize, space: StateSpace) -> DiffusionProcess {
        let priors = ModalityPriors {
            atoms: ndarray::arr1(&[0.5, 0.25, 0.15, 0.1]),
            charges: ndarray::arr1(&[0.1, 0.8, 0.1]),
            bonds: ndarray::arr1(&[0.7, 0.15, 0.08, 0.04, 0.03]),
            aromatic: None,
            ring: None,
            hybridization: None,
        };
        let params = ProcessParams { steps, state_space: space, ..ProcessParams::default() };
        DiffusionProcess::new(&params, &priors).unwrap()
    }

    /// A denoiser oracle with fixed zero outputs (uniform class logits,
    /// zero coordinates — a valid centered prediction).
    struct ZeroDenoiser {
        param: Parameterization,
        calls: Cell<usize>,
    }

    impl ZeroDenoiser {
        fn new(param: Parameterization) -> Self {
            ZeroDenoiser { param, calls: Cell::new(0) }
        }
    }

    impl Denoiser for ZeroDenoiser {
        fn parameterization(&self) -> Parameterization {
            self.param
        }

        fn predict_batch(&self, states: &[NoisyMolecule]) -> Result<Vec<ModelPrediction>> {
            self.calls.set(self.calls.get() + 1);
            Ok(states
                .iter()
                .map(|s| {
                    let n = s.num_atoms();
                    ModelPrediction {
                        coords: Array2::zeros((n, 3)),
                        atoms: Array2::zeros(s.atoms.dim()),
                        charges: Array2::zeros(s.charges.dim()),
                        bonds: Array3::zeros(s.bonds.dim()),
                        extras: s.extras.as_ref().map(|e| ExtraChannels {
                            aromatic: Array2::zeros(e.aromatic.dim()),
                            ring: Array2::zeros(e.ring.dim()),
                            hybridization: Array2::zeros(e.hybridization.dim()),
                        }),
                    }
                })
                .collect())
        }
    }

    /// An equivariant toy oracle: clean-coordinate estimate 0.9·x_t, uniform
    /// class logits. Linear in coordinates, hence exactly equivariant.
    struct ShrinkDenoiser;

    impl Denoiser for ShrinkDenoiser {
        fn parameterization(&self) -> Parameterization {
            Parameterization::X0
        }

        fn predict_batch(&self, states: &[NoisyMolecule]) -> Result<Vec<ModelPrediction>> {
            Ok(states
                .iter()
                .map(|s| ModelPrediction {
                    coords: &s.coords * 0.9,
                    atoms: Array2::zeros(s.atoms.dim()),
                    charges: Array2::zeros(s.charges.dim()),
                    bonds: Array3::zeros(s.bonds.dim()),
                    extras: None,
                })
                .collect())
        }
    }

    fn vocab4() -> DatasetVocabulary {
        DatasetVocabulary::new(vec!["C".into(), "N".into(), "O".into(), "H".into()])
    }

    #[test]
    fn transition_sequences_cover_every_mode() {
        assert_eq!(reverse_transitions(4, SampleMode::Ddpm).unwrap(), vec![
            (4, 3),
            (3, 2),
            (2, 1),
            (1, 0)
        ]);
        assert_eq!(
            reverse_transitions(500, SampleMode::Ddim { stride: 2 }).unwrap().len(),
            250
        );
        // A stride that does not divide T still ends at zero.
        let ts = reverse_transitions(10, SampleMode::Ddim { stride: 3 }).unwrap();
        assert_eq!(ts, vec![(10, 7), (7, 4), (4, 1), (1, 0)]);
        assert!(reverse_transitions(10, SampleMode::Ddim { stride: 0 }).is_err());
    }

    #[test]
    fn zero_output_model_still_yields_structurally_valid_molecules() {
        let process = process(20, StateSpace::Discrete);
        let model = ZeroDenoiser::new(Parameterization::X0);
        let mut noise = seeded(1);
        let mols =
            sample_batch(&model, &[6, 3, 1], &process, SampleMode::Ddpm, &mut noise).unwrap();
        assert_eq!(mols.len(), 3);
        let vocab = vocab4();
        for mol in &mols {
            mol.validate(&vocab).unwrap();
            assert!(mol.positions.iter().all(|v| v.is_finite()));
            for m in mol.positions.mean_axis(Axis(0)).unwrap().iter() {
                assert!(m.abs() < 1e-6);
            }
        }
        // The single-atom molecule sits at the origin: its one coordinate
        // row is its own center of mass.
        assert!(mols[2].positions.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_trajectory_state_is_centered_symmetric_and_one_hot() {
        let process = process(20, StateSpace::Discrete);
        let model = ZeroDenoiser::new(Parameterization::X0);
        let mut noise = seeded(2);
        let mut worst_com = 0.0f64;
        let mut checked = 0usize;
        {
            let mut observer = |states: &[NoisyMolecule]| {
                for s in states {
                    for m in s.coords.mean_axis(Axis(0)).unwrap().iter() {
                        worst_com = worst_com.max(m.abs());
                    }
                    let n = s.num_atoms();
                    for i in 0..n {
                        assert_eq!(s.bonds[[i, i, 0]], 1.0);
                        for j in 0..n {
                            for c in 0..s.bonds.shape()[2] {
                                assert_eq!(s.bonds[[i, j, c]], s.bonds[[j, i, c]]);
                            }
                        }
                    }
                    if s.t >= 1 {
                        s.validate(20, StateSpace::Discrete).unwrap();
                    }
                    checked += 1;
                }
            };
            sample_batch_observed(
                &model,
                &[7, 4],
                &process,
                SampleMode::Ddpm,
                &mut noise,
                Some(&mut observer),
            )
            .unwrap();
        }
        assert_eq!(checked, 2 * 21); // init + 20 transitions, 2 molecules
        assert!(worst_com < 1e-6, "worst |CoM| = {worst_com:e}");
    }

    #[test]
    fn initial_discrete_classes_follow_the_prior() {
        let process = process(4, StateSpace::Discrete);
        let model = ZeroDenoiser::new(Parameterization::X0);
        let mut noise = seeded(3);
        let mut counts = [0usize; 4];
        let mut first = true;
        {
            let mut observer = |states: &[NoisyMolecule]| {
                if first {
                    for s in states {
                        for row in s.atoms.axis_iter(Axis(0)) {
                            counts[row.iter().position(|&v| v == 1.0).unwrap()] += 1;
                        }
                    }
                    first = false;
                }
            };
            let sizes = vec![8usize; 2000];
            sample_batch_observed(
                &model,
                &sizes,
                &process,
                SampleMode::Ddpm,
                &mut noise,
                Some(&mut observer),
            )
            .unwrap();
        }
        let total: usize = counts.iter().sum();
        let prior = [0.5, 0.25, 0.15, 0.1];
        for (c, &count) in counts.iter().enumerate() {
            let freq = count as f64 / total as f64;
            assert!((freq - prior[c]).abs() < 0.01, "class {c}: {freq}");
        }
    }

    #[test]
    fn strided_sampling_makes_exactly_t_over_stride_model_calls() {
        let process = process(500, StateSpace::Discrete);
        let model = ZeroDenoiser::new(Parameterization::X0);
        let mut noise = seeded(4);
        sample_batch(&model, &[4], &process, SampleMode::Ddim { stride: 2 }, &mut noise)
            .unwrap();
        assert_eq!(model.calls.get(), 250);

        let model_full = ZeroDenoiser::new(Parameterization::X0);
        let mut noise = seeded(5);
        sample_batch(&model_full, &[4], &process, SampleMode::Ddpm, &mut noise).unwrap();
        assert_eq!(model_full.calls.get(), 500);
    }

    #[test]
    fn noise_parameterization_is_rejected_in_the_discrete_state_space() {
        let process = process(10, StateSpace::Discrete);
        let model = ZeroDenoiser::new(Parameterization::Eps);
        let mut noise = seeded(6);
        let err =
            sample_batch(&model, &[4], &process, SampleMode::Ddpm, &mut noise).unwrap_err();
        assert!(matches!(err, EquimolError::Config(_)));
    }

    #[test]
    fn rotating_the_replayed_noise_rotates_the_sampled_coordinates() {
        // Deterministic equivariance-in-law: rerunning the exact trajectory
        // with every Gaussian draw rotated must rotate the output and leave
        // all categorical draws (uniforms) untouched.
        let process = process(20, StateSpace::Discrete);
        let model = ShrinkDenoiser;

        let mut base = seeded(7);
        let mut rec = RecordingNoise::new(&mut base);
        let mols_a =
            sample_batch(&model, &[6], &process, SampleMode::Ddpm, &mut rec).unwrap();

        let (s, c) = (1.1f64.sin(), 1.1f64.cos());
        let q = arr2(&[[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]);
        let qc = q.clone();
        let mut replay = ReplayNoise::with_transform(rec.record, move |a| {
            let m: Array2<f64> = a.clone().into_dimensionality().unwrap();
            m.dot(&qc.t()).into_dyn()
        });
        let mols_b =
            sample_batch(&model, &[6], &process, SampleMode::Ddpm, &mut replay).unwrap();

        assert_eq!(mols_a[0].elements, mols_b[0].elements);
        assert_eq!(mols_a[0].charges, mols_b[0].charges);
        assert_eq!(mols_a[0].bonds, mols_b[0].bonds);
        let rotated = mols_a[0].positions.dot(&q.t());
        for (a, b) in rotated.iter().zip(mols_b[0].positions.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn noise_and_clean_parameterizations_agree_through_the_conversion() {
        // Two oracles with the same underlying clean estimate x̂0 = √ᾱ_t·x_t,
        // one expressed directly, one as the noise it implies. Identical
        // draws must give numerically matching trajectories.
        struct X0Oracle(DiffusionProcess);
        struct EpsOracle(DiffusionProcess);

        fn shrink(
            s: &NoisyMolecule,
            p: &DiffusionProcess,
            as_eps: bool,
        ) -> ModelPrediction {
            let coord_abar = p.coords.alpha_bar(s.t);
            let per = |x: &Array2<f64>, abar: f64| -> Array2<f64> {
                if as_eps {
                    // noise implied by x̂0 = √ᾱ·x_t
                    (x - &(x * (abar.sqrt() * abar.sqrt()))) / (1.0 - abar).sqrt()
                } else {
                    x * abar.sqrt()
                }
            };
            ModelPrediction {
                coords: per(&s.coords, coord_abar),
                atoms: per(&s.atoms, p.atoms.schedule().alpha_bar(s.t)),
                charges: per(&s.charges, p.charges.schedule().alpha_bar(s.t)),
                bonds: {
                    let abar = p.bonds.schedule().alpha_bar(s.t);
                    let flat: Array2<f64> = upper_triangle_rows(&s.bonds);
                    rows_to_symmetric(&per(&flat, abar), s.num_atoms(), p.bonds.num_classes())
                },
                extras: None,
            }
        }

        impl Denoiser for X0Oracle {
            fn parameterization(&self) -> Parameterization {
                Parameterization::X0
            }
            fn predict_batch(&self, states: &[NoisyMolecule]) -> Result<Vec<ModelPrediction>> {
                Ok(states.iter().map(|s| shrink(s, &self.0, false)).collect())
            }
        }
        impl Denoiser for EpsOracle {
            fn parameterization(&self) -> Parameterization {
                Parameterization::Eps
            }
            fn predict_batch(&self, states: &[NoisyMolecule]) -> Result<Vec<ModelPrediction>> {
                Ok(states.iter().map(|s| shrink(s, &self.0, true)).collect())
            }
        }

        let process_a = process(20, StateSpace::Continuous);
        let mut base = seeded(8);
        let mut rec = RecordingNoise::new(&mut base);
        let mols_a = sample_batch(
            &X0Oracle(process_a.clone()),
            &[5],
            &process_a,
            SampleMode::Ddpm,
            &mut rec,
        )
        .unwrap();

        let mut replay = ReplayNoise::new(rec.record);
        let mols_b = sample_batch(
            &EpsOracle(process_a.clone()),
            &[5],
            &process_a,
            SampleMode::Ddpm,
            &mut replay,
        )
        .unwrap();

        for (a, b) in mols_a[0].positions.iter().zip(mols_b[0].positions.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(mols_a[0].elements, mols_b[0].elements);
        assert_eq!(mols_a[0].bonds, mols_b[0].bonds);
    }

    fn context_fixture() -> ConditioningContext {
        // A rigid 3-atom fragment (fixed) plus 3 free atoms with placeholder
        // features. Coordinates are deliberately off-center to exercise the
        // frame handling.
        let pos = arr2(&[
            [10.0, 0.0, 0.0],
            [11.4, 0.0, 0.0],
            [10.7, 1.1, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
        ]);
        let mut mol = Molecule::new(vec![0, 1, 2, 0, 0, 0], vec![1, 1, 1, 1, 1, 1], pos).unwrap();
        mol.set_bond(0, 1, BondClass::Single).unwrap();
        mol.set_bond(1, 2, BondClass::Double).unwrap();
        ConditioningContext { molecule: mol, fixed: vec![true, true, true, false, false, false] }
    }

    #[test]
    fn conditioned_sampling_returns_context_coordinates_exactly() {
        let process = process(20, StateSpace::Discrete);
        let model = ZeroDenoiser::new(Parameterization::X0);
        let ctx = context_fixture();
        let mut noise = seeded(9);
        let out = conditioned_sample(&model, &ctx, &process, SampleMode::Ddpm, &mut noise)
            .unwrap();
        for i in 0..3 {
            for c in 0..3 {
                // Bitwise equality: the fixed rows are copied, never recomputed.
                assert_eq!(
                    out.positions[[i, c]].to_bits(),
                    ctx.molecule.positions[[i, c]].to_bits()
                );
            }
        }
        assert_eq!(&out.elements[..3], &ctx.molecule.elements[..3]);
        assert_eq!(&out.charges[..3], &ctx.molecule.charges[..3]);
        assert_eq!(out.bonds[[0, 1]], 1);
        assert_eq!(out.bonds[[1, 2]], 2);
        assert!(out.positions.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn conditioned_trajectory_never_touches_context_to_context_bonds() {
        let process = process(20, StateSpace::Discrete);
        let model = ZeroDenoiser::new(Parameterization::X0);
        let ctx = context_fixture();
        let mut noise = seeded(10);
        let mut seen = 0usize;
        {
            let mut observer = |states: &[NoisyMolecule]| {
                let s = &states[0];
                // Clean classes: 0–1 single (class 1), 1–2 double (class 2),
                // 0–2 none (class 0).
                assert_eq!(s.bonds[[0, 1, 1]], 1.0);
                assert_eq!(s.bonds[[1, 2, 2]], 1.0);
                assert_eq!(s.bonds[[0, 2, 0]], 1.0);
                // Context atom classes stay pinned too.
                assert_eq!(s.atoms[[0, 0]], 1.0);
                assert_eq!(s.atoms[[1, 1]], 1.0);
                assert_eq!(s.atoms[[2, 2]], 1.0);
                seen += 1;
            };
            conditioned_sample_observed(
                &model,
                &ctx,
                &process,
                SampleMode::Ddpm,
                &mut noise,
                Some(&mut observer),
            )
            .unwrap();
        }
        assert_eq!(seen, 21);
    }

    #[test]
    fn conditioned_mask_edge_cases() {
        let process = process(10, StateSpace::Discrete);
        let model = ZeroDenoiser::new(Parameterization::X0);
        let mut ctx = context_fixture();

        ctx.fixed = vec![true; 6];
        let mut noise = seeded(11);
        let err = conditioned_sample(&model, &ctx, &process, SampleMode::Ddpm, &mut noise)
            .unwrap_err();
        assert!(matches!(err, EquimolError::Config(_)));

        // An empty mask is plain sampling: with identical draws it must
        // produce the identical molecule.
        ctx.fixed = vec![false; 6];
        let mut base = seeded(12);
        let mut rec = RecordingNoise::new(&mut base);
        let via_ctx =
            conditioned_sample(&model, &ctx, &process, SampleMode::Ddpm, &mut rec).unwrap();
        let mut replay = ReplayNoise::new(rec.record);
        let via_plain = sample(&model, 6, &process, SampleMode::Ddpm, &mut replay).unwrap();
        assert_eq!(via_ctx, via_plain);
    }

    #[test]
    fn conditioned_sampling_supports_strided_mode() {
        let process = process(20, StateSpace::Discrete);
        let model = ZeroDenoiser::new(Parameterization::X0);
        let ctx = context_fixture();
        let mut noise = seeded(13);
        let out = conditioned_sample(
            &model,
            &ctx,
            &process,
            SampleMode::Ddim { stride: 4 },
            &mut noise,
        )
        .unwrap();
        assert_eq!(model.calls.get(), 5);
        for i in 0..3 {
            for c in 0..3 {
                assert_eq!(
                    out.positions[[i, c]].to_bits(),
                    ctx.molecule.positions[[i, c]].to_bits()
                );
            }
        }
    }

    #[test]
    fn guided_sampling_with_zero_scale_matches_plain_sampling() {
        let process = process(15, StateSpace::Discrete);
        let model = ZeroDenoiser::new(Parameterization::X0);

        let mut base = seeded(14);
        let mut rec = RecordingNoise::new(&mut base);
        let plain = sample(&model, 5, &process, SampleMode::Ddpm, &mut rec).unwrap();

        let grad_fn = |x: &Array2<f64>| x * 2.0;
        let mut replay = ReplayNoise::new(rec.record);
        let guided =
            guided_sample(&model, 5, &process, &grad_fn, 0.0, &mut replay).unwrap();
        assert_eq!(plain, guided);
    }

    #[test]
    fn guidance_shifts_generated_geometry_toward_the_property_target() {
        // Property: squared radius of gyration. Ascent inflates molecules,
        // descent compacts them; the two sample means must separate.
        let process = process(15, StateSpace::Discrete);
        let model = ZeroDenoiser::new(Parameterization::X0);
        let sq_radius = |m: &Molecule| -> f64 {
            m.positions.iter().map(|v| v * v).sum::<f64>() / m.num_atoms() as f64
        };
        let collect = |sign: f64, seed: u64| -> f64 {
            let grad_fn = move |x: &Array2<f64>| x * (2.0 * sign / x.nrows() as f64);
            let mut noise = seeded(seed);
            let mut acc = 0.0;
            for _ in 0..30 {
                let mol = guided_sample(&model, 6, &process, &grad_fn, 40.0, &mut noise).unwrap();
                acc += sq_radius(&mol);
            }
            acc / 30.0
        };
        let inflated = collect(1.0, 15);
        let compacted = collect(-1.0, 16);
        assert!(
            inflated > compacted * 1.2,
            "inflated {inflated} vs compacted {compacted}"
        );
    }

    #[test]
    fn model_output_shape_mismatch_is_a_contract_error() {
        struct BadShape;
        impl Denoiser for BadShape {
            fn parameterization(&self) -> Parameterization {
                Parameterization::X0
            }
            fn predict_batch(&self, states: &[NoisyMolecule]) -> Result<Vec<ModelPrediction>> {
                Ok(states
                    .iter()
                    .map(|s| ModelPrediction {
                        coords: Array2::zeros((s.num_atoms() + 1, 3)), // wrong row count
                        atoms: Array2::zeros(s.atoms.dim()),
                        charges: Array2::zeros(s.charges.dim()),
                        bonds: Array3::zeros(s.bonds.dim()),
                        extras: None,
                    })
                    .collect())
            }
        }
        let process = process(10, StateSpace::Discrete);
        let mut noise = seeded(17);
        let err =
            sample_batch(&BadShape, &[4], &process, SampleMode::Ddpm, &mut noise).unwrap_err();
        assert!(matches!(err, EquimolError::Contract(_)));
    }

    #[test]
    fn extras_enabled_process_samples_all_extra_channels() {
        let priors = ModalityPriors {
            atoms: ndarray::arr1(&[0.6, 0.4]),
            charges: ndarray::arr1(&[0.2, 0.8]),
            bonds: ndarray::arr1(&[0.8, 0.2]),
            aromatic: Some(ndarray::arr1(&[0.9, 0.1])),
            ring: Some(ndarray::arr1(&[0.7, 0.3])),
            hybridization: Some(ndarray::arr1(&[0.25, 0.25, 0.25, 0.25])),
        };
        let params = ProcessParams { steps: 10, ..ProcessParams::default() };
        let process = DiffusionProcess::new(&params, &priors).unwrap();
        let model = ZeroDenoiser::new(Parameterization::X0);
        let mut noise = seeded(18);
        let mol = sample(&model, 5, &process, SampleMode::Ddpm, &mut noise).unwrap();
        let extras = mol.extras.expect("extras requested, extras decoded");
        assert_eq!(extras.is_aromatic.len(), 5);
        assert_eq!(extras.in_ring.len(), 5);
        assert_eq!(extras.hybridization.len(), 5);
        assert!(extras.hybridization.iter().all(|&h| h < 4));
    }
}
