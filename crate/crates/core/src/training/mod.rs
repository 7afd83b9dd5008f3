//! Loss assembly, optimization, and the train / fine-tune workflow.
//!
//! Training follows the usual denoising recipe: draw a timestep per
//! molecule, corrupt every modality forward, run the network, and score the
//! prediction against its target — the clean data under the clean-data
//! parameterization, the drawn noise under the noise parameterization. The
//! composite loss weights coordinates, atom types, charges, bonds, and the
//! optional extra channels separately, and each molecule's total can be
//! scaled by its step's clamped signal-to-noise ratio so near-clean steps
//! dominate over near-noise ones.
//!
//! Optimization is the max-stabilized variant of adaptive moment estimation
//! with decoupled-from-nothing classic L2 weight decay folded into the
//! gradient, a global gradient-norm clip, and an exponential moving average
//! of the weights kept alongside the live ones for evaluation and sampling.

use crate::autodiff::{Tape, Var};
use crate::denoiser::{DenoiserConfig, EquivariantDenoiser, GraphBatch, ParamStore, TapeOutputs};
use crate::diffusion::kernels::{rows_to_symmetric, upper_triangle_rows};
use crate::diffusion::{
    categorical_forward_sample, encode_clean, gaussian_forward_sample, DiffusionProcess,
    ExtraChannels, NoiseSource, NoisyMolecule, Parameterization, RngNoise, StateSpace,
};
use crate::error::EquimolError;
use crate::molgraph::Molecule;
use crate::schedule::{loss_weight, LossWeighting, NoiseSchedule};
use crate::Result;
use ndarray::{Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Per-modality loss weights plus the mode switches that decide what the
/// network's outputs mean and how they are scored.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub lambda_coords: f64,
    pub lambda_atoms: f64,
    pub lambda_charges: f64,
    pub lambda_bonds: f64,
    pub lambda_extras: f64,
    pub parameterization: Parameterization,
    pub state_space: StateSpace,
    pub weighting: LossWeighting,
}

impl LossConfig {
    /// Reference weights: coordinates 3, atom types and charges 0.4,
    /// bonds 2, extra channels 0.4, with clamped-SNR step weighting.
    pub fn reference(parameterization: Parameterization, state_space: StateSpace) -> Self {
        LossConfig {
            lambda_coords: 3.0,
            lambda_atoms: 0.4,
            lambda_charges: 0.4,
            lambda_bonds: 2.0,
            lambda_extras: 0.4,
            parameterization,
            state_space,
            weighting: LossWeighting::snr_clamp_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_coords,
            self.lambda_atoms,
            self.lambda_charges,
            self.lambda_bonds,
            self.lambda_extras,
        ];
        if lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(EquimolError::Config(
                "loss weights must be positive and finite".into(),
            ));
        }
        if self.parameterization == Parameterization::Eps
            && self.state_space == StateSpace::Discrete
        {
            return Err(EquimolError::Config(
                "noise parameterization requires the continuous state space".into(),
            ));
        }
        Ok(())
    }
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 2e-4,
            weight_decay: 1e-12,
            grad_clip: 10.0,
            ema_decay: 0.999,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay >= 0.0 && self.ema_decay <= 1.0) {
            return Err(EquimolError::Config(
                "EMA decay must lie in [0, 1]".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(EquimolError::Config(
                "learning rate and gradient clip must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which way [`eps_x0_convert`] maps its first argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvertDirection {
    /// First argument is noise; recover the clean data.
    EpsToX0,
    /// First argument is clean data; recover the implied noise.
    X0ToEps,
}

/// Convert between the two Gaussian prediction targets at step `t`:
/// `x0 = (x_t − √(1−ᾱ_t)·ε)/√ᾱ_t` and `ε = (x_t − √ᾱ_t·x0)/√(1−ᾱ_t)`.
pub fn eps_x0_convert(
    x: &Array2<f64>,
    xt: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    direction: ConvertDirection,
) -> Result<Array2<f64>> {
    if t < 1 || t > schedule.steps {
        return Err(EquimolError::Contract(format!(
            "step {} outside 1..={}",
            t, schedule.steps
        )));
    }
    let abar = schedule.alpha_bar(t);
    Ok(match direction {
        ConvertDirection::EpsToX0 => crate::diffusion::eps_to_x0(x, xt, abar),
        ConvertDirection::X0ToEps => crate::diffusion::x0_to_eps(x, xt, abar),
    })
}

/// Everything one molecule's prediction is scored against, plus its
/// step weight. Targets are clean values under the clean-data
/// parameterization and the drawn noises under the noise parameterization;
/// bond targets cover the strict upper triangle in `(i<j)` row-major order
/// so each unordered pair counts exactly once.
#[derive(Debug, Clone)]
pub struct MoleculeTargets {
    pub weight: f64,
    pub coords: Array2<f64>,
    pub atoms: Array2<f64>,
    pub charges: Array2<f64>,
    pub bonds_upper: Array2<f64>,
    pub extras: Option<ExtraChannels>,
}

/// Corrupt one clean state forward to step `t` and assemble the matching
/// loss targets. Noise is drawn per modality in a fixed order (coordinates,
/// atoms, charges, bonds, then extras) so runs replay deterministically.
pub fn corrupt_for_training(
    clean: &NoisyMolecule,
    t: usize,
    process: &DiffusionProcess,
    loss: &LossConfig,
    noise: &mut dyn NoiseSource,
) -> Result<(NoisyMolecule, MoleculeTargets)> {
    loss.validate()?;
    let n = clean.num_atoms();
    let k_bonds = process.bonds.num_classes();
    let eps_mode = loss.parameterization == Parameterization::Eps;

    let (coords_t, coords_eps) =
        gaussian_forward_sample(&clean.coords, t, &process.coords, noise, true)?;

    let noisy;
    let targets;
    match process.state_space {
        StateSpace::Discrete => {
            let atoms_t = categorical_forward_sample(&clean.atoms, t, &process.atoms, noise)?;
            let charges_t =
                categorical_forward_sample(&clean.charges, t, &process.charges, noise)?;
            let bonds_t = crate::diffusion::categorical_forward_sample_bonds(
                &clean.bonds,
                t,
                &process.bonds,
                noise,
            )?;
            let extras_t = match (&process.extras, &clean.extras) {
                (Some(k), Some(e)) => Some(ExtraChannels {
                    aromatic: categorical_forward_sample(&e.aromatic, t, &k.aromatic, noise)?,
                    ring: categorical_forward_sample(&e.ring, t, &k.ring, noise)?,
                    hybridization: categorical_forward_sample(
                        &e.hybridization,
                        t,
                        &k.hybridization,
                        noise,
                    )?,
                }),
                _ => None,
            };
            noisy = NoisyMolecule {
                t,
                coords: coords_t,
                atoms: atoms_t,
                charges: charges_t,
                bonds: bonds_t,
                extras: extras_t,
            };
            targets = MoleculeTargets {
                weight: loss_weight(&loss.weighting, &process.coords, t),
                coords: coords_eps_or_clean(eps_mode, &coords_eps, &clean.coords),
                atoms: clean.atoms.clone(),
                charges: clean.charges.clone(),
                bonds_upper: upper_triangle_rows(&clean.bonds),
                extras: clean.extras.clone(),
            };
        }
        StateSpace::Continuous => {
            // Class matrices ride the Gaussian process of their own
            // schedules; bonds are noised on the upper triangle and
            // mirrored so states stay symmetric.
            let (atoms_t, atoms_eps) =
                gaussian_forward_sample(&clean.atoms, t, process.atoms.schedule(), noise, false)?;
            let (charges_t, charges_eps) = gaussian_forward_sample(
                &clean.charges,
                t,
                process.charges.schedule(),
                noise,
                false,
            )?;
            let clean_upper = upper_triangle_rows(&clean.bonds);
            let (bonds_upper_t, bonds_eps) = gaussian_forward_sample(
                &clean_upper,
                t,
                process.bonds.schedule(),
                noise,
                false,
            )?;
            let mut extras_t = None;
            let mut extras_eps = None;
            if let (Some(k), Some(e)) = (&process.extras, &clean.extras) {
                let (ar_t, ar_e) =
                    gaussian_forward_sample(&e.aromatic, t, k.aromatic.schedule(), noise, false)?;
                let (ri_t, ri_e) =
                    gaussian_forward_sample(&e.ring, t, k.ring.schedule(), noise, false)?;
                let (hy_t, hy_e) = gaussian_forward_sample(
                    &e.hybridization,
                    t,
                    k.hybridization.schedule(),
                    noise,
                    false,
                )?;
                extras_t = Some(ExtraChannels {
                    aromatic: ar_t,
                    ring: ri_t,
                    hybridization: hy_t,
                });
                extras_eps = Some(ExtraChannels {
                    aromatic: ar_e,
                    ring: ri_e,
                    hybridization: hy_e,
                });
            }
            noisy = NoisyMolecule {
                t,
                coords: coords_t,
                atoms: atoms_t,
                charges: charges_t,
                bonds: rows_to_symmetric(&bonds_upper_t, n, k_bonds),
                extras: extras_t,
            };
            targets = MoleculeTargets {
                weight: loss_weight(&loss.weighting, &process.coords, t),
                coords: coords_eps_or_clean(eps_mode, &coords_eps, &clean.coords),
                atoms: coords_eps_or_clean(eps_mode, &atoms_eps, &clean.atoms),
                charges: coords_eps_or_clean(eps_mode, &charges_eps, &clean.charges),
                bonds_upper: coords_eps_or_clean(eps_mode, &bonds_eps, &clean_upper),
                extras: match (eps_mode, extras_eps, &clean.extras) {
                    (true, Some(e), _) => Some(e),
                    (false, _, Some(e)) => Some(e.clone()),
                    _ => None,
                },
            };
        }
    }
    Ok((noisy, targets))
}

fn coords_eps_or_clean(
    eps_mode: bool,
    eps: &Array2<f64>,
    clean: &Array2<f64>,
) -> Array2<f64> {
    if eps_mode {
        eps.clone()
    } else {
        clean.clone()
    }
}

/// Additive decomposition of one batch loss; components sum to `total`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub coords: f64,
    pub atoms: f64,
    pub charges: f64,
    pub bonds: f64,
    pub extras: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.coords,
            self.atoms,
            self.charges,
            self.bonds,
            self.extras,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

fn stack_rows(parts: &[&Array2<f64>]) -> ArrayD<f64> {
    let cols = parts.first().map(|p| p.ncols()).unwrap_or(0);
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Array2::<f64>::zeros((rows, cols));
    let mut at = 0;
    for p in parts {
        for r in 0..p.nrows() {
            for c in 0..cols {
                out[[at + r, c]] = p[[r, c]];
            }
        }
        at += p.nrows();
    }
    out.into_dyn()
}

/// Score already-computed network outputs against targets.
///
/// Each molecule contributes `w·Σ_m λ_m·l_m`, where `l_m` is the mean
/// cross-entropy per atom (or unordered pair) for class modalities in the
/// discrete state space and the mean squared error per entry otherwise;
/// the batch loss is the mean over molecules. Returns the scalar loss node
/// and its evaluated additive breakdown.
pub fn batch_loss_from_outputs(
    tape: &mut Tape,
    outputs: &TapeOutputs,
    batch: &GraphBatch,
    targets: &[MoleculeTargets],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if targets.len() != batch.num_graphs() {
        return Err(EquimolError::Contract(format!(
            "{} target sets for {} molecules",
            targets.len(),
            batch.num_graphs()
        )));
    }
    for (g, tg) in targets.iter().enumerate() {
        let n = batch.sizes[g];
        let pairs = n * (n - 1) / 2;
        if tg.coords.nrows() != n || tg.atoms.nrows() != n || tg.bonds_upper.nrows() != pairs {
            return Err(EquimolError::Contract(format!(
                "target shapes for molecule {g} do not match its {n} atoms"
            )));
        }
    }
    let g_count = batch.num_graphs() as f64;
    let discrete = cfg.state_space == StateSpace::Discrete;

    // Per-graph normalizers turn row sums into per-element means.
    let per_atom: Vec<f64> = batch.sizes.iter().map(|&n| 1.0 / n as f64).collect();
    let per_entry = |width: usize| -> Vec<f64> {
        batch
            .sizes
            .iter()
            .map(|&n| 1.0 / (n * width) as f64)
            .collect()
    };
    let per_pair: Vec<f64> = batch
        .sizes
        .iter()
        .map(|&n| 1.0 / (n * (n - 1) / 2).max(1) as f64)
        .collect();
    let per_pair_entry = |width: usize| -> Vec<f64> {
        batch
            .sizes
            .iter()
            .map(|&n| 1.0 / ((n * (n - 1) / 2).max(1) * width) as f64)
            .collect()
    };
    let weights_over =
        |lambda: f64| -> Vec<f64> { targets.iter().map(|t| t.weight * lambda / g_count).collect() };

    // Node-level term: squared error (always for coordinates, and for class
    // channels in the continuous space) or cross-entropy rows, summed per
    // graph, normalized to means, then weight-averaged over the batch.
    let node_term = |tape: &mut Tape,
                     pred: Var,
                     target: ArrayD<f64>,
                     lambda: f64,
                     as_ce: bool|
     -> Var {
        let width = target.shape()[1];
        let rows = if as_ce {
            tape.ce_rows(pred, &target)
        } else {
            tape.sq_diff_rowsum(pred, &target)
        };
        let per_graph = tape.segment_sum(rows, &batch.node_graph, batch.num_graphs());
        let normalized = if as_ce {
            tape.scale_rows_const(per_graph, &per_atom)
        } else {
            tape.scale_rows_const(per_graph, &per_entry(width))
        };
        tape.dot_const(normalized, &weights_over(lambda))
    };

    let coords_target = stack_rows(&targets.iter().map(|t| &t.coords).collect::<Vec<_>>());
    let coords_scalar = {
        let rows = tape.sq_diff_rowsum(outputs.coords, &coords_target);
        let per_graph = tape.segment_sum(rows, &batch.node_graph, batch.num_graphs());
        let normalized = tape.scale_rows_const(per_graph, &per_entry(3));
        tape.dot_const(normalized, &weights_over(cfg.lambda_coords))
    };

    let atoms_target = stack_rows(&targets.iter().map(|t| &t.atoms).collect::<Vec<_>>());
    let atoms_scalar = node_term(
        tape,
        outputs.atom_logits,
        atoms_target,
        cfg.lambda_atoms,
        discrete,
    );
    let charges_target = stack_rows(&targets.iter().map(|t| &t.charges).collect::<Vec<_>>());
    let charges_scalar = node_term(
        tape,
        outputs.charge_logits,
        charges_target,
        cfg.lambda_charges,
        discrete,
    );

    // Bond term: gather one directed row per unordered pair.
    let (upper_rows, upper_graph) = upper_pair_rows(batch);
    let bonds_target = stack_rows(&targets.iter().map(|t| &t.bonds_upper).collect::<Vec<_>>());
    let bonds_scalar = {
        let picked = tape.row_gather(outputs.bond_logits, &upper_rows);
        let width = bonds_target.shape()[1];
        let rows = if discrete {
            tape.ce_rows(picked, &bonds_target)
        } else {
            tape.sq_diff_rowsum(picked, &bonds_target)
        };
        let per_graph = tape.segment_sum(rows, &upper_graph, batch.num_graphs());
        let normalized = if discrete {
            tape.scale_rows_const(per_graph, &per_pair)
        } else {
            tape.scale_rows_const(per_graph, &per_pair_entry(width))
        };
        tape.dot_const(normalized, &weights_over(cfg.lambda_bonds))
    };

    let extras_scalar = match &outputs.extra_logits {
        Some((ar, ri, hy)) => {
            let missing = targets.iter().any(|t| t.extras.is_none());
            if missing {
                return Err(EquimolError::Contract(
                    "model predicts extra channels but targets lack them".into(),
                ));
            }
            let pick = |f: fn(&ExtraChannels) -> &Array2<f64>| {
                stack_rows(
                    &targets
                        .iter()
                        .map(|t| f(t.extras.as_ref().unwrap()))
                        .collect::<Vec<_>>(),
                )
            };
            let a = node_term(tape, *ar, pick(|e| &e.aromatic), cfg.lambda_extras, discrete);
            let r = node_term(tape, *ri, pick(|e| &e.ring), cfg.lambda_extras, discrete);
            let h = node_term(
                tape,
                *hy,
                pick(|e| &e.hybridization),
                cfg.lambda_extras,
                discrete,
            );
            let ar_sum = tape.add(a, r);
            Some(tape.add(ar_sum, h))
        }
        None => None,
    };

    let mut total = tape.add(coords_scalar, atoms_scalar);
    total = tape.add(total, charges_scalar);
    total = tape.add(total, bonds_scalar);
    if let Some(ex) = extras_scalar {
        total = tape.add(total, ex);
    }

    let scalar = |tape: &Tape, v: Var| tape.value(v).sum();
    let breakdown = LossBreakdown {
        total: scalar(tape, total),
        coords: scalar(tape, coords_scalar),
        atoms: scalar(tape, atoms_scalar),
        charges: scalar(tape, charges_scalar),
        bonds: scalar(tape, bonds_scalar),
        extras: extras_scalar.map(|v| scalar(tape, v)).unwrap_or(0.0),
    };
    Ok((total, breakdown))
}

/// Row indices (into the directed pair list) covering each unordered pair
/// exactly once, with the owning molecule of each row.
fn upper_pair_rows(batch: &GraphBatch) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut graph = Vec::new();
    for (p, (&s, &d)) in batch.src.iter().zip(batch.dst.iter()).enumerate() {
        if d < s {
            rows.push(p);
            graph.push(batch.node_graph[d]);
        }
    }
    (rows, graph)
}

/// Run the model on a batch and score it: forward, then
/// [`batch_loss_from_outputs`].
pub fn batch_loss(
    tape: &mut Tape,
    model: &EquivariantDenoiser,
    states: &[NoisyMolecule],
    targets: &[MoleculeTargets],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let (batch, outputs) = model.forward_tape(tape, states)?;
    batch_loss_from_outputs(tape, &outputs, &batch, targets, cfg)
}

/// Elementwise `ema ← decay·ema + (1−decay)·params`.
pub fn ema_update(ema: &mut ArrayD<f64>, params: &ArrayD<f64>, decay: f64) -> Result<()> {
    if ema.shape() != params.shape() {
        return Err(EquimolError::Contract(format!(
            "EMA shape {:?} does not match parameter shape {:?}",
            ema.shape(),
            params.shape()
        )));
    }
    ema.zip_mut_with(params, |e, &p| *e = decay * *e + (1.0 - decay) * p);
    Ok(())
}

/// Exponential moving average of a parameter store.
#[derive(Debug, Clone)]
pub struct EmaWeights {
    pub decay: f64,
    values: Vec<ArrayD<f64>>,
}

impl EmaWeights {
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        EmaWeights {
            decay,
            values: (0..store.len()).map(|i| store.value(i).clone()).collect(),
        }
    }

    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        if self.values.len() != store.len() {
            return Err(EquimolError::Contract(
                "EMA tracks a different number of tensors than the store".into(),
            ));
        }
        for (i, ema) in self.values.iter_mut().enumerate() {
            ema_update(ema, store.value(i), self.decay)?;
        }
        Ok(())
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    /// Rebuild a tracker from persisted averages (checkpoint restore).
    pub fn from_values(decay: f64, values: Vec<ArrayD<f64>>) -> Self {
        EmaWeights { decay, values }
    }

    /// A copy of `model` carrying the averaged weights.
    pub fn materialize(&self, model: &EquivariantDenoiser) -> Result<EquivariantDenoiser> {
        if self.values.len() != model.params.len() {
            return Err(EquimolError::Contract(
                "EMA tensors do not match the model".into(),
            ));
        }
        let mut out = model.clone();
        for (i, v) in self.values.iter().enumerate() {
            *out.params.value_mut(i) = v.clone();
        }
        Ok(out)
    }
}

/// Scale `grads` in place so their global L2 norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [ArrayD<f64>], clip: f64) -> f64 {
    let norm_sq: f64 = grads
        .iter()
        .map(|g| g.iter().map(|&x| x * x).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Adaptive moment estimation with the max-stabilized second moment and
/// classic L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct AmsGrad {
    pub config: OptimConfig,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    v_max: Vec<ArrayD<f64>>,
    step: usize,
}

impl AmsGrad {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Result<AmsGrad> {
        config.validate()?;
        let zero_like = |i: usize| ArrayD::<f64>::zeros(store.value(i).raw_dim());
        Ok(AmsGrad {
            config,
            m: (0..store.len()).map(zero_like).collect(),
            v: (0..store.len()).map(zero_like).collect(),
            v_max: (0..store.len()).map(zero_like).collect(),
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Apply one update from per-tensor gradients (indexed like the store).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[ArrayD<f64>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(EquimolError::Contract(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            if grads[i].shape() != store.value(i).shape() {
                return Err(EquimolError::Contract(format!(
                    "gradient {i} shape {:?} does not match parameter shape {:?}",
                    grads[i].shape(),
                    store.value(i).shape()
                )));
            }
            let theta = store.value_mut(i);
            ndarray::Zip::from(theta)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&mut self.v_max[i])
                .and(&grads[i])
                .for_each(|t, m, v, vm, &g_raw| {
                    let g = g_raw + c.weight_decay * *t;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    if *v > *vm {
                        *vm = *v;
                    }
                    let m_hat = *m / bc1;
                    let denom = (*vm / bc2).sqrt() + c.eps;
                    *t -= c.learning_rate * m_hat / denom;
                });
        }
        Ok(())
    }
}

/// A snapshot of the optimizer's moment estimates and step counter, the
/// piece of training state that must survive a checkpoint for resumption
/// to continue the update sequence exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub v_max: Vec<ArrayD<f64>>,
}

impl AmsGrad {
    pub fn export_state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
            v_max: self.v_max.clone(),
        }
    }

    /// Replace the moment estimates and step counter with a persisted
    /// snapshot. Tensor counts and shapes must match the current model.
    pub fn restore_state(&mut self, state: OptimizerState) -> Result<()> {
        for (label, tensors) in [("m", &state.m), ("v", &state.v), ("v_max", &state.v_max)] {
            if tensors.len() != self.m.len() {
                return Err(EquimolError::Contract(format!(
                    "optimizer state {label} has {} tensors, model has {}",
                    tensors.len(),
                    self.m.len()
                )));
            }
            for (i, t) in tensors.iter().enumerate() {
                if t.shape() != self.m[i].shape() {
                    return Err(EquimolError::Contract(format!(
                        "optimizer state {label}[{i}] shape {:?} does not match {:?}",
                        t.shape(),
                        self.m[i].shape()
                    )));
                }
            }
        }
        self.step = state.step;
        self.m = state.m;
        self.v = state.v;
        self.v_max = state.v_max;
        Ok(())
    }
}

/// One optimization step's telemetry.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub mean_t: f64,
}

/// Owns the model and optimization state; drives steps over molecule
/// batches with a seeded noise stream.
pub struct Trainer {
    pub model: EquivariantDenoiser,
    pub process: DiffusionProcess,
    pub loss_config: LossConfig,
    pub optimizer: AmsGrad,
    pub ema: EmaWeights,
    rng: ChaCha20Rng,
}

impl Trainer {
    pub fn new(
        model: EquivariantDenoiser,
        process: DiffusionProcess,
        loss_config: LossConfig,
        optim_config: OptimConfig,
        seed: u64,
    ) -> Result<Trainer> {
        loss_config.validate()?;
        if model.config.parameterization != loss_config.parameterization {
            return Err(EquimolError::Config(
                "model and loss disagree on the parameterization".into(),
            ));
        }
        if process.state_space != loss_config.state_space {
            return Err(EquimolError::Config(
                "process and loss disagree on the state space".into(),
            ));
        }
        if model.config.steps != process.steps() {
            return Err(EquimolError::Config(format!(
                "model horizon {} does not match process horizon {}",
                model.config.steps,
                process.steps()
            )));
        }
        let optimizer = AmsGrad::new(optim_config, &model.params)?;
        let ema = EmaWeights::new(&model.params, optim_config.ema_decay);
        Ok(Trainer {
            model,
            process,
            loss_config,
            optimizer,
            ema,
            rng: ChaCha20Rng::seed_from_u64(seed),
        })
    }

    /// The model carrying EMA weights, for evaluation and sampling.
    pub fn ema_model(&self) -> Result<EquivariantDenoiser> {
        self.ema.materialize(&self.model)
    }

    /// One optimization step over a molecule batch: per molecule draw
    /// `t ~ U(1, T)`, corrupt, predict, score, backpropagate, clip the
    /// global gradient norm, update, and fold the weights into the EMA.
    /// A non-finite loss aborts before any state changes.
    pub fn train_step(&mut self, batch: &[Molecule]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(EquimolError::Contract("empty training batch".into()));
        }
        let steps = self.process.steps();
        let atom_scale = self.process.atom_scale(self.loss_config.parameterization);
        let mut noise = RngNoise::new(&mut self.rng);
        let mut states = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut t_sum = 0.0;
        for mol in batch {
            let clean = encode_clean(mol, &self.process, atom_scale)?;
            let t = ((noise.uniform() * steps as f64) as usize + 1).min(steps);
            t_sum += t as f64;
            let (state, target) =
                corrupt_for_training(&clean, t, &self.process, &self.loss_config, &mut noise)?;
            states.push(state);
            targets.push(target);
        }

        let mut tape = Tape::new();
        let (loss_var, breakdown) = batch_loss(
            &mut tape,
            &self.model,
            &states,
            &targets,
            &self.loss_config,
        )?;
        if !breakdown.is_finite() {
            return Err(EquimolError::Numerical(format!(
                "non-finite loss {:?}; step aborted",
                breakdown
            )));
        }
        let grad_store = tape.backward(loss_var);
        let mut grads: Vec<ArrayD<f64>> = (0..self.model.params.len())
            .map(|i| ArrayD::zeros(self.model.params.value(i).raw_dim()))
            .collect();
        for (node, pid) in tape.param_nodes() {
            if let Some(g) = grad_store.get(Var(node)) {
                grads[pid] = g.clone();
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.optimizer.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(EquimolError::Numerical(format!(
                "non-finite gradient norm {grad_norm}; step aborted"
            )));
        }
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.ema.update(&self.model.params)?;
        Ok(StepReport {
            step: self.optimizer.step_count(),
            loss: breakdown,
            grad_norm,
            mean_t: t_sum / batch.len() as f64,
        })
    }

    /// Run `n_steps` over fixed-size batches drawn from `molecules` in a
    /// seeded shuffled order that reshuffles each pass.
    pub fn fit(
        &mut self,
        molecules: &[Molecule],
        batch_size: usize,
        n_steps: usize,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        if molecules.is_empty() || batch_size == 0 {
            return Err(EquimolError::Config(
                "training needs molecules and a positive batch size".into(),
            ));
        }
        let mut reports = Vec::with_capacity(n_steps);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        for _ in 0..n_steps {
            let mut batch = Vec::with_capacity(batch_size);
            while batch.len() < batch_size {
                if cursor >= order.len() {
                    order = shuffled_indices(molecules.len(), &mut self.rng);
                    cursor = 0;
                }
                batch.push(molecules[order[cursor]].clone());
                cursor += 1;
            }
            let report = self.train_step(&batch)?;
            on_step(&report);
            reports.push(report);
        }
        Ok(reports)
    }
}

fn shuffled_indices(n: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    idx
}

/// Map a trained model into a larger vocabulary: every old class keeps its
/// rows/columns, appended classes get the fresh seeded initialization of the
/// new model. Architecture dimensions, the bond vocabulary, the horizon,
/// and the parameterization must match; classes can only be added, never
/// dropped.
pub fn extend_vocabulary(
    old: &EquivariantDenoiser,
    new_config: DenoiserConfig,
    seed: u64,
) -> Result<EquivariantDenoiser> {
    let oc = &old.config;
    let nc = &new_config;
    let same_arch = oc.scalar_dim == nc.scalar_dim
        && oc.vector_dim == nc.vector_dim
        && oc.edge_dim == nc.edge_dim
        && oc.num_layers == nc.num_layers
        && oc.steps == nc.steps
        && oc.k_bonds == nc.k_bonds
        && oc.parameterization == nc.parameterization;
    if !same_arch {
        return Err(EquimolError::Config(
            "vocabulary extension cannot change architecture, horizon, bond classes, \
             or parameterization"
                .into(),
        ));
    }
    let grows = nc.k_atoms >= oc.k_atoms && nc.k_charges >= oc.k_charges;
    let extras_ok = match (oc.k_hybrid, nc.k_hybrid) {
        (None, _) => true,
        (Some(o), Some(n)) => n >= o,
        (Some(_), None) => false,
    };
    if !grows || !extras_ok {
        return Err(EquimolError::Config(format!(
            "cannot map vocabulary ({}, {}, {:?}) into ({}, {}, {:?}): classes can only \
             be appended",
            oc.k_atoms, oc.k_charges, oc.k_hybrid, nc.k_atoms, nc.k_charges, nc.k_hybrid
        )));
    }

    // Old feature index → new feature index, for the node input row
    // [atoms | charges | (aromatic, ring, hybrid) | time] and the node
    // output row [atoms | charges | (aromatic, ring, hybrid)].
    let class_map = |with_time: bool| -> Vec<usize> {
        let mut map = Vec::new();
        for i in 0..oc.k_atoms {
            map.push(i);
        }
        for i in 0..oc.k_charges {
            map.push(nc.k_atoms + i);
        }
        if let Some(okh) = oc.k_hybrid {
            let new_base = nc.k_atoms + nc.k_charges;
            for i in 0..(4 + okh) {
                map.push(new_base + i);
            }
        }
        if with_time {
            map.push(nc.node_in_dim() - 1);
        }
        map
    };

    let mut fresh = EquivariantDenoiser::new(new_config.clone(), seed)?;
    for id in 0..old.params.len() {
        let name = old.params.name(id).to_string();
        let new_id = fresh.params.id_of(&name).ok_or_else(|| {
            EquimolError::Contract(format!("parameter {name} missing from the new model"))
        })?;
        let old_v = old.params.value(id);
        let new_v = fresh.params.value_mut(new_id);
        match name.as_str() {
            "node_embed.weight" => {
                let map = class_map(true);
                for (o, &n) in map.iter().enumerate() {
                    for c in 0..old_v.shape()[1] {
                        new_v[[n, c]] = old_v[[o, c]];
                    }
                }
            }
            "node_head.weight" => {
                let map = class_map(false);
                for r in 0..old_v.shape()[0] {
                    for (o, &n) in map.iter().enumerate() {
                        new_v[[r, n]] = old_v[[r, o]];
                    }
                }
            }
            "node_head.bias" => {
                let map = class_map(false);
                for (o, &n) in map.iter().enumerate() {
                    new_v[[n]] = old_v[[o]];
                }
            }
            _ => {
                if new_v.shape() != old_v.shape() {
                    return Err(EquimolError::Contract(format!(
                        "parameter {name} changed shape unexpectedly: {:?} vs {:?}",
                        old_v.shape(),
                        new_v.shape()
                    )));
                }
                new_v.assign(old_v);
            }
        }
    }
    Ok(fresh)
}
