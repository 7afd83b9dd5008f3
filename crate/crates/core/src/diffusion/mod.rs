//! Forward noising, tractable posteriors, and reverse sampling for molecules.
//!
//! A molecule is diffused jointly across modalities: coordinates follow a
//! variance-preserving Gaussian process, while atom types, charges, bonds,
//! and optional extra atom features follow categorical processes (or, in the
//! continuous state space, Gaussian processes over their one-hot embeddings).
//! Each modality runs on its own adaptive-cosine schedule so that, e.g.,
//! bonds can stay intact longer than coordinates stay precise.
//!
//! Layout:
//! - [`noise`]: the [`NoiseSource`] abstraction (seeded, recordable, replayable);
//! - [`kernels`]: categorical transition matrices, posteriors, reverse steps;
//! - [`gaussian`]: Gaussian forward/posterior/reverse and the deterministic
//!   strided coordinate update, plus gradient-guided steps;
//! - [`sampler`]: full reverse trajectories (plain, fixed-context, guided).

pub mod gaussian;
pub mod kernels;
pub mod noise;
pub mod sampler;

pub use gaussian::{
    ddim_coordinate_step, eps_to_x0, gaussian_forward_sample, gaussian_posterior_params,
    gaussian_reverse_step, guided_reverse_step, x0_to_eps, GaussianPosteriorParams,
};
pub use kernels::{
    categorical_forward_sample, categorical_forward_sample_bonds, categorical_posterior,
    categorical_reverse_distribution, categorical_reverse_step, categorical_reverse_step_bonds,
    sample_prior_rows, TransitionKernel,
};
pub use noise::{NoiseDraw, NoiseSource, RecordingNoise, ReplayNoise, RngNoise};
pub use sampler::{
    conditioned_sample, conditioned_sample_observed, guided_sample, reverse_transitions, sample,
    sample_batch, sample_batch_observed, ConditioningContext, SampleMode,
};

use crate::error::EquimolError;
use crate::molgraph::{AtomExtras, Molecule};
use crate::schedule::{make_adaptive_cosine, NoiseSchedule};
use crate::Result;
use ndarray::{Array1, Array2, Array3, Axis};

/// What the denoiser's coordinate head means.
///
/// `X0` predicts the clean data directly; `Eps` predicts the injected noise.
/// The two are interconvertible for Gaussian modalities ([`eps_to_x0`]), so
/// `Eps` is only admissible when *every* modality is Gaussian, i.e. with
/// [`StateSpace::Continuous`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    X0,
    Eps,
}

/// How categorical modalities are diffused.
///
/// `Discrete` keeps them categorical end to end (transition-matrix forward
/// process, categorical posteriors). `Continuous` relaxes their one-hot
/// embeddings to real vectors and runs the same Gaussian process used for
/// coordinates; decoding is argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSpace {
    Discrete,
    Continuous,
}

/// Scale applied to atom-type one-hots in the continuous state space under
/// the noise parameterization, balancing their signal-to-noise against
/// coordinates. Classes are recovered by argmax, which scaling never changes.
pub const CONTINUOUS_EPS_ATOM_SCALE: f64 = 0.25;

/// Per-atom extra feature channels as class matrices (one row per atom).
///
/// Doubles as the container for model predictions over the same channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraChannels {
    /// [n, 2]: not-aromatic / aromatic.
    pub aromatic: Array2<f64>,
    /// [n, 2]: not-in-ring / in-ring.
    pub ring: Array2<f64>,
    /// [n, k_hybrid].
    pub hybridization: Array2<f64>,
}

/// A molecule's full diffusion state at one timestep.
///
/// Same layout for clean data (`t = 0`, used internally as the noising
/// input) and noised states (`t` in `1..=T`). In the discrete state space
/// the class matrices hold exact one-hot rows; in the continuous state space
/// they hold real values. `bonds` is `[n, n, k_bond]`, symmetric in its
/// first two axes with the diagonal pinned to the "no bond" class.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyMolecule {
    pub t: usize,
    /// [n, 3], zero column means (center of mass at the origin).
    pub coords: Array2<f64>,
    /// [n, k_atom].
    pub atoms: Array2<f64>,
    /// [n, k_charge].
    pub charges: Array2<f64>,
    /// [n, n, k_bond].
    pub bonds: Array3<f64>,
    pub extras: Option<ExtraChannels>,
}

impl NoisyMolecule {
    pub fn num_atoms(&self) -> usize {
        self.coords.nrows()
    }

    /// Check every structural invariant of a noised state: timestep range,
    /// centered coordinates, bond symmetry with a "none" diagonal, and (in
    /// the discrete state space) exact one-hot rows everywhere.
    pub fn validate(&self, t_max: usize, space: StateSpace) -> Result<()> {
        let n = self.num_atoms();
        if self.t < 1 || self.t > t_max {
            return Err(EquimolError::Contract(format!(
                "noisy state timestep {} outside 1..={t_max}",
                self.t
            )));
        }
        if self.atoms.nrows() != n || self.charges.nrows() != n {
            return Err(EquimolError::Contract(
                "class matrices disagree with atom count".into(),
            ));
        }
        if self.bonds.shape()[0] != n || self.bonds.shape()[1] != n {
            return Err(EquimolError::Contract(
                "bond tensor disagrees with atom count".into(),
            ));
        }
        for m in self.coords.mean_axis(Axis(0)).unwrap().iter() {
            if m.abs() > 1e-8 {
                return Err(EquimolError::Contract(format!(
                    "coordinates not centered: |column mean| = {:e}",
                    m.abs()
                )));
            }
        }
        if !self.coords.iter().all(|v| v.is_finite()) {
            return Err(EquimolError::Numerical("non-finite coordinate".into()));
        }
        let kb = self.bonds.shape()[2];
        for i in 0..n {
            for j in 0..n {
                for c in 0..kb {
                    if self.bonds[[i, j, c]] != self.bonds[[j, i, c]] {
                        return Err(EquimolError::Contract(format!(
                            "bond tensor asymmetric at ({i}, {j})"
                        )));
                    }
                }
            }
        }
        if space == StateSpace::Discrete {
            check_one_hot_rows(&self.atoms, "atoms")?;
            check_one_hot_rows(&self.charges, "charges")?;
            if let Some(e) = &self.extras {
                check_one_hot_rows(&e.aromatic, "aromatic")?;
                check_one_hot_rows(&e.ring, "ring")?;
                check_one_hot_rows(&e.hybridization, "hybridization")?;
            }
            for i in 0..n {
                for j in 0..n {
                    let row = self.bonds.slice(ndarray::s![i, j, ..]);
                    let hot = row.iter().filter(|&&v| v == 1.0).count();
                    let zero = row.iter().filter(|&&v| v == 0.0).count();
                    if hot != 1 || hot + zero != kb {
                        return Err(EquimolError::Contract(format!(
                            "bond row ({i}, {j}) is not one-hot"
                        )));
                    }
                    if i == j && row[0] != 1.0 {
                        return Err(EquimolError::Contract(format!(
                            "bond diagonal at {i} is not the \"none\" class"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_one_hot_rows(m: &Array2<f64>, what: &str) -> Result<()> {
    for (r, row) in m.axis_iter(Axis(0)).enumerate() {
        let hot = row.iter().filter(|&&v| v == 1.0).count();
        let zero = row.iter().filter(|&&v| v == 0.0).count();
        if hot != 1 || hot + zero != row.len() {
            return Err(EquimolError::Contract(format!("{what} row {r} is not one-hot")));
        }
    }
    Ok(())
}

/// Denoiser output for one molecule: a coordinate prediction (clean
/// coordinates or injected noise, per [`Parameterization`]) and per-modality
/// class scores (logits in the discrete state space, direct value
/// predictions in the continuous one). Bond scores must be symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPrediction {
    pub coords: Array2<f64>,
    pub atoms: Array2<f64>,
    pub charges: Array2<f64>,
    pub bonds: Array3<f64>,
    pub extras: Option<ExtraChannels>,
}

/// Anything that can denoise a batch of molecule states.
///
/// The sampler and trainer speak to the network only through this trait, so
/// tests can substitute fixed-output oracles and the network crate-internal
/// layout stays free to change.
pub trait Denoiser {
    fn parameterization(&self) -> Parameterization;

    /// One prediction per input state, in order.
    fn predict_batch(&self, states: &[NoisyMolecule]) -> Result<Vec<ModelPrediction>>;
}

/// Training-time marginals that define the categorical priors, one
/// probability vector per modality.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModalityPriors {
    pub atoms: Array1<f64>,
    pub charges: Array1<f64>,
    pub bonds: Array1<f64>,
    pub aromatic: Option<Array1<f64>>,
    pub ring: Option<Array1<f64>>,
    pub hybridization: Option<Array1<f64>>,
}

impl ModalityPriors {
    /// Uniform priors for the given class counts (the config-selectable
    /// alternative to training marginals).
    pub fn uniform(
        k_atoms: usize,
        k_charges: usize,
        k_bonds: usize,
        k_hybrid: Option<usize>,
    ) -> Self {
        let flat = |k: usize| Array1::from_elem(k, 1.0 / k as f64);
        ModalityPriors {
            atoms: flat(k_atoms),
            charges: flat(k_charges),
            bonds: flat(k_bonds),
            aromatic: k_hybrid.map(|_| flat(2)),
            ring: k_hybrid.map(|_| flat(2)),
            hybridization: k_hybrid.map(flat),
        }
    }
}

/// Schedule shape parameters for every modality, plus the state space.
///
/// Defaults mirror the reference setup: `T = 500`, offset `s = 1e-4`, and
/// per-modality exponents (coordinates 2.5, bonds 1.5, everything else 1)
/// so bond identity decays later than coordinate precision.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProcessParams {
    pub steps: usize,
    pub s: f64,
    pub nu_coords: f64,
    pub nu_atoms: f64,
    pub nu_charges: f64,
    pub nu_bonds: f64,
    pub nu_extras: f64,
    pub state_space: StateSpace,
}

impl Default for ProcessParams {
    fn default() -> Self {
        ProcessParams {
            steps: 500,
            s: 1e-4,
            nu_coords: 2.5,
            nu_atoms: 1.0,
            nu_charges: 1.0,
            nu_bonds: 1.5,
            nu_extras: 1.0,
            state_space: StateSpace::Discrete,
        }
    }
}

/// The complete joint diffusion process: one coordinate schedule and one
/// transition kernel (prior + schedule) per categorical modality.
#[derive(Debug, Clone)]
pub struct DiffusionProcess {
    pub coords: NoiseSchedule,
    pub atoms: TransitionKernel,
    pub charges: TransitionKernel,
    pub bonds: TransitionKernel,
    pub extras: Option<ExtraKernels>,
    pub state_space: StateSpace,
}

#[derive(Debug, Clone)]
pub struct ExtraKernels {
    pub aromatic: TransitionKernel,
    pub ring: TransitionKernel,
    pub hybridization: TransitionKernel,
}

impl DiffusionProcess {
    /// Build all schedules and kernels. Extra-feature kernels are created
    /// exactly when all three extra priors are present.
    pub fn new(params: &ProcessParams, priors: &ModalityPriors) -> Result<Self> {
        let coords = make_adaptive_cosine(params.steps, params.nu_coords, params.s)?;
        let atoms = TransitionKernel::new(
            priors.atoms.clone(),
            make_adaptive_cosine(params.steps, params.nu_atoms, params.s)?,
        )?;
        let charges = TransitionKernel::new(
            priors.charges.clone(),
            make_adaptive_cosine(params.steps, params.nu_charges, params.s)?,
        )?;
        let bonds = TransitionKernel::new(
            priors.bonds.clone(),
            make_adaptive_cosine(params.steps, params.nu_bonds, params.s)?,
        )?;
        let extras = match (&priors.aromatic, &priors.ring, &priors.hybridization) {
            (Some(a), Some(r), Some(h)) => {
                let sched = || make_adaptive_cosine(params.steps, params.nu_extras, params.s);
                Some(ExtraKernels {
                    aromatic: TransitionKernel::new(a.clone(), sched()?)?,
                    ring: TransitionKernel::new(r.clone(), sched()?)?,
                    hybridization: TransitionKernel::new(h.clone(), sched()?)?,
                })
            }
            (None, None, None) => None,
            _ => {
                return Err(EquimolError::Config(
                    "extra-feature priors must be given all together or not at all".into(),
                ))
            }
        };
        Ok(DiffusionProcess { coords, atoms, charges, bonds, extras, state_space: params.state_space })
    }

    pub fn steps(&self) -> usize {
        self.coords.steps
    }

    /// Scale applied to atom one-hot embeddings before Gaussian diffusion.
    /// Unit except in the continuous state space under noise prediction.
    pub fn atom_scale(&self, param: Parameterization) -> f64 {
        if self.state_space == StateSpace::Continuous && param == Parameterization::Eps {
            CONTINUOUS_EPS_ATOM_SCALE
        } else {
            1.0
        }
    }
}

/// One-hot rows from class indices.
pub fn one_hot_rows(classes: &[usize], k: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((classes.len(), k));
    for (i, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(EquimolError::Contract(format!(
                "class index {c} out of range for {k} classes"
            )));
        }
        m[[i, c]] = 1.0;
    }
    Ok(m)
}

/// Row-wise stable softmax (plain arrays, no tape).
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Encode a clean molecule as a `t = 0` diffusion state against the class
/// counts of `process`. Coordinates are centered; `atom_scale` (see
/// [`DiffusionProcess::atom_scale`]) multiplies the atom one-hots.
pub fn encode_clean(
    mol: &Molecule,
    process: &DiffusionProcess,
    atom_scale: f64,
) -> Result<NoisyMolecule> {
    let n = mol.num_atoms();
    let k_atom = process.atoms.num_classes();
    let k_charge = process.charges.num_classes();
    let k_bond = process.bonds.num_classes();

    let mut coords = mol.positions.clone();
    let mean = coords.mean_axis(Axis(0)).unwrap();
    for mut row in coords.axis_iter_mut(Axis(0)) {
        row -= &mean;
    }

    let atoms = one_hot_rows(&mol.elements, k_atom)? * atom_scale;
    let charges = one_hot_rows(&mol.charges, k_charge)?;

    let mut bonds = Array3::zeros((n, n, k_bond));
    for i in 0..n {
        for j in 0..n {
            let c = mol.bonds[[i, j]];
            if c >= k_bond {
                return Err(EquimolError::Contract(format!(
                    "bond class {c} out of range for {k_bond} classes"
                )));
            }
            bonds[[i, j, c]] = 1.0;
        }
    }

    let extras = match (&process.extras, &mol.extras) {
        (Some(kernels), Some(e)) => {
            let bools = |v: &[bool]| -> Vec<usize> { v.iter().map(|&b| b as usize).collect() };
            Some(ExtraChannels {
                aromatic: one_hot_rows(&bools(&e.is_aromatic), 2)?,
                ring: one_hot_rows(&bools(&e.in_ring), 2)?,
                hybridization: one_hot_rows(
                    &e.hybridization,
                    kernels.hybridization.num_classes(),
                )?,
            })
        }
        (None, _) => None,
        (Some(_), None) => {
            return Err(EquimolError::Contract(
                "process expects extra atom features but the molecule has none".into(),
            ))
        }
    };

    Ok(NoisyMolecule { t: 0, coords, atoms, charges, bonds, extras })
}

fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Decode a diffusion state back into a [`Molecule`] by row-wise argmax.
///
/// Bonds are decoded from averaged symmetric pairs (exact one-hots are
/// unchanged by the averaging) with the diagonal forced to "none".
pub fn decode(state: &NoisyMolecule, has_extras: bool) -> Molecule {
    let n = state.num_atoms();
    let elements: Vec<usize> =
        state.atoms.axis_iter(Axis(0)).map(argmax_row).collect();
    let charges: Vec<usize> =
        state.charges.axis_iter(Axis(0)).map(argmax_row).collect();

    let mut bonds = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let fwd = state.bonds.slice(ndarray::s![i, j, ..]);
            let bwd = state.bonds.slice(ndarray::s![j, i, ..]);
            let avg = (&fwd + &bwd) * 0.5;
            let c = argmax_row(avg.view());
            bonds[[i, j]] = c;
            bonds[[j, i]] = c;
        }
    }

    let extras = if has_extras {
        state.extras.as_ref().map(|e| AtomExtras {
            is_aromatic: e.aromatic.axis_iter(Axis(0)).map(|r| argmax_row(r) == 1).collect(),
            in_ring: e.ring.axis_iter(Axis(0)).map(|r| argmax_row(r) == 1).collect(),
            hybridization: e.hybridization.axis_iter(Axis(0)).map(argmax_row).collect(),
        })
    } else {
        None
    };

    Molecule {
        elements,
        charges,
        positions: state.coords.clone(),
        bonds,
        extras,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::BondClass;

    fn tiny_process(space: StateSpace) -> DiffusionProcess {
        let priors = ModalityPriors {
            atoms: ndarray::arr1(&[0.5, 0.3, 0.2]),
            charges: ndarray::arr1(&[0.1, 0.8, 0.1]),
            bonds: ndarray::arr1(&[0.7, 0.2, 0.1]),
            aromatic: None,
            ring: None,
            hybridization: None,
        };
        let params = ProcessParams { steps: 20, state_space: space, ..ProcessParams::default() };
        DiffusionProcess::new(&params, &priors).unwrap()
    }

    fn fixture_molecule() -> Molecule {
        let pos = ndarray::arr2(&[[0.0, 0.0, 0.5], [0.0, 0.0, -0.5], [1.0, 0.0, 0.0]]);
        let mut mol = Molecule::new(vec![0, 1, 2], vec![1, 1, 0], pos).unwrap();
        mol.set_bond(0, 1, BondClass::Single).unwrap();
        mol.set_bond(1, 2, BondClass::Double).unwrap();
        mol
    }

    #[test]
    fn encode_then_decode_round_trips_classes() {
        let process = tiny_process(StateSpace::Discrete);
        let mol = fixture_molecule();
        let state = encode_clean(&mol, &process, 1.0).unwrap();
        let back = decode(&state, false);
        assert_eq!(back.elements, mol.elements);
        assert_eq!(back.charges, mol.charges);
        assert_eq!(back.bonds, mol.bonds);
        // Coordinates come back centered, preserving relative geometry.
        let d_orig = (&mol.positions.row(0) - &mol.positions.row(2)).mapv(|v| v * v).sum();
        let d_back = (&back.positions.row(0) - &back.positions.row(2)).mapv(|v| v * v).sum();
        assert!((d_orig - d_back).abs() < 1e-12);
    }

    #[test]
    fn encoded_state_has_centered_coordinates_and_symmetric_bonds() {
        let process = tiny_process(StateSpace::Discrete);
        let state = encode_clean(&fixture_molecule(), &process, 1.0).unwrap();
        for m in state.coords.mean_axis(Axis(0)).unwrap().iter() {
            assert!(m.abs() < 1e-12);
        }
        for i in 0..3 {
            assert_eq!(state.bonds[[i, i, 0]], 1.0);
            for j in 0..3 {
                for c in 0..3 {
                    assert_eq!(state.bonds[[i, j, c]], state.bonds[[j, i, c]]);
                }
            }
        }
    }

    #[test]
    fn validate_rejects_out_of_range_timestep_and_uncentered_coords() {
        let process = tiny_process(StateSpace::Discrete);
        let mut state = encode_clean(&fixture_molecule(), &process, 1.0).unwrap();
        state.t = 0;
        assert!(state.validate(20, StateSpace::Discrete).is_err());
        state.t = 21;
        assert!(state.validate(20, StateSpace::Discrete).is_err());
        state.t = 5;
        assert!(state.validate(20, StateSpace::Discrete).is_ok());
        state.coords[[0, 0]] += 1.0;
        assert!(state.validate(20, StateSpace::Discrete).is_err());
    }

    #[test]
    fn validate_enforces_one_hot_rows_in_discrete_space_only() {
        let process = tiny_process(StateSpace::Discrete);
        let mut state = encode_clean(&fixture_molecule(), &process, 1.0).unwrap();
        state.t = 3;
        state.atoms[[0, 0]] = 0.4;
        state.atoms[[0, 1]] = 0.6;
        assert!(state.validate(20, StateSpace::Discrete).is_err());
        assert!(state.validate(20, StateSpace::Continuous).is_ok());
    }

    #[test]
    fn atom_scale_applies_only_to_continuous_noise_prediction() {
        let disc = tiny_process(StateSpace::Discrete);
        let cont = tiny_process(StateSpace::Continuous);
        assert_eq!(disc.atom_scale(Parameterization::X0), 1.0);
        assert_eq!(cont.atom_scale(Parameterization::X0), 1.0);
        assert_eq!(cont.atom_scale(Parameterization::Eps), CONTINUOUS_EPS_ATOM_SCALE);
    }

    #[test]
    fn softmax_rows_are_probability_vectors() {
        let logits = ndarray::arr2(&[[0.0, 0.0, 0.0], [100.0, 0.0, -100.0], [1.0, 2.0, 3.0]]);
        let p = softmax_rows(&logits);
        for row in p.axis_iter(Axis(0)) {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Uniform logits give uniform probabilities.
        for v in p.row(0).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn process_requires_all_or_no_extra_priors() {
        let mut priors = ModalityPriors::uniform(3, 3, 3, Some(4));
        priors.ring = None;
        let params = ProcessParams { steps: 10, ..ProcessParams::default() };
        assert!(DiffusionProcess::new(&params, &priors).is_err());
    }
}
