//! Run configuration: a sectioned, typed key-value file that fixes every
//! axis of a training or sampling run.
//!
//! The format is TOML restricted to one level of tables — each section
//! configures one module, every key is typed, and unknown keys fail the
//! parse immediately. [`RunConfig::from_file`] additionally resolves
//! relative paths against the config file's directory and requires every
//! referenced file to exist, so a bad run dies before any compute.
//!
//! A [`RunConfig`] converts into the domain configs it describes
//! ([`ProcessParams`], [`DenoiserConfig`], [`LossConfig`], [`OptimConfig`],
//! [`SampleMode`]) and hashes to a stable hex digest that artifacts embed
//! alongside the seed, making every output traceable to its exact inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::{Parameterization, ProcessParams, SampleMode, StateSpace};
use crate::molgraph::{BondClass, DatasetVocabulary, CHARGE_CLASSES};
use crate::schedule::LossWeighting;
use crate::training::{LossConfig, OptimConfig};
use crate::{EquimolError, Result};

/// Run-wide settings: seed, output directory, feature toggles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Where checkpoints, telemetry, and reports land.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Model the extra atom channels (aromaticity, ring membership,
    /// hybridization) alongside elements, charges, and bonds.
    #[serde(default = "default_true")]
    pub extra_features: bool,
    /// Sample with part of each molecule clamped to reference atoms.
    #[serde(default)]
    pub context_conditioning: bool,
}

/// Dataset file paths. `train` is required; `val`/`test` are optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub train: PathBuf,
    #[serde(default)]
    pub val: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Smoothing floor for the categorical priors derived from `train`.
    #[serde(default = "default_prior_floor")]
    pub prior_floor: f64,
}

/// Element (and optionally hybridization) classes, in index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularySection {
    pub elements: Vec<String>,
    #[serde(default)]
    pub hybridizations: Option<Vec<String>>,
}

/// Noise-schedule shape: horizon, offset, and one exponent per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default = "default_nu_coords")]
    pub nu_coords: f64,
    #[serde(default = "default_nu_one")]
    pub nu_atoms: f64,
    #[serde(default = "default_nu_one")]
    pub nu_charges: f64,
    #[serde(default = "default_nu_bonds")]
    pub nu_bonds: f64,
    #[serde(default = "default_nu_one")]
    pub nu_extras: f64,
    #[serde(default = "default_state_space")]
    pub state_space: StateSpace,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            steps: default_steps(),
            s: default_s(),
            nu_coords: default_nu_coords(),
            nu_atoms: default_nu_one(),
            nu_charges: default_nu_one(),
            nu_bonds: default_nu_bonds(),
            nu_extras: default_nu_one(),
            state_space: default_state_space(),
        }
    }
}

/// Denoiser architecture. Class counts are not configured here — they
/// follow from the vocabulary and the extra-features toggle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_scalar_dim")]
    pub scalar_dim: usize,
    #[serde(default = "default_vector_dim")]
    pub vector_dim: usize,
    #[serde(default = "default_edge_dim")]
    pub edge_dim: usize,
    #[serde(default = "default_num_layers")]
    pub num_layers: usize,
    #[serde(default = "default_parameterization")]
    pub parameterization: Parameterization,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            scalar_dim: default_scalar_dim(),
            vector_dim: default_vector_dim(),
            edge_dim: default_edge_dim(),
            num_layers: default_num_layers(),
            parameterization: default_parameterization(),
        }
    }
}

/// Modality weights and the per-step weighting rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default = "default_lambda_coords")]
    pub lambda_coords: f64,
    #[serde(default = "default_lambda_small")]
    pub lambda_atoms: f64,
    #[serde(default = "default_lambda_small")]
    pub lambda_charges: f64,
    #[serde(default = "default_lambda_bonds")]
    pub lambda_bonds: f64,
    #[serde(default = "default_lambda_small")]
    pub lambda_extras: f64,
    /// "snr_clamp" or "uniform".
    #[serde(default = "default_weighting")]
    pub weighting: String,
    #[serde(default = "default_clamp_min")]
    pub clamp_min: f64,
    #[serde(default = "default_clamp_max")]
    pub clamp_max: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda_coords: default_lambda_coords(),
            lambda_atoms: default_lambda_small(),
            lambda_charges: default_lambda_small(),
            lambda_bonds: default_lambda_bonds(),
            lambda_extras: default_lambda_small(),
            weighting: default_weighting(),
            clamp_min: default_clamp_min(),
            clamp_max: default_clamp_max(),
        }
    }
}

/// Optimizer hyperparameters, mirroring [`OptimConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            learning_rate: default_learning_rate(),
            weight_decay: default_weight_decay(),
            grad_clip: default_grad_clip(),
            ema_decay: default_ema_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

/// Training-loop shape: batch size, step budget, artifact cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_train_steps")]
    pub steps: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            batch_size: default_batch_size(),
            steps: default_train_steps(),
            checkpoint_every: default_checkpoint_every(),
            log_every: default_log_every(),
        }
    }
}

/// Generation settings: reverse-process mode and batch shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    /// "ddpm" or "ddim".
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Which dataset file feeds the molecule-size histogram:
    /// "train", "val", or "test".
    #[serde(default = "default_size_source")]
    pub size_source: String,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            mode: default_mode(),
            stride: default_stride(),
            n_samples: default_n_samples(),
            size_source: default_size_source(),
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_true() -> bool {
    true
}
fn default_prior_floor() -> f64 {
    crate::dataset::PRIOR_FLOOR
}
fn default_steps() -> usize {
    500
}
fn default_s() -> f64 {
    1e-4
}
fn default_nu_coords() -> f64 {
    2.5
}
fn default_nu_one() -> f64 {
    1.0
}
fn default_nu_bonds() -> f64 {
    1.5
}
fn default_state_space() -> StateSpace {
    StateSpace::Discrete
}
fn default_scalar_dim() -> usize {
    128
}
fn default_vector_dim() -> usize {
    128
}
fn default_edge_dim() -> usize {
    64
}
fn default_num_layers() -> usize {
    6
}
fn default_parameterization() -> Parameterization {
    Parameterization::X0
}
fn default_lambda_coords() -> f64 {
    3.0
}
fn default_lambda_small() -> f64 {
    0.4
}
fn default_lambda_bonds() -> f64 {
    2.0
}
fn default_weighting() -> String {
    "snr_clamp".into()
}
fn default_clamp_min() -> f64 {
    0.05
}
fn default_clamp_max() -> f64 {
    1.5
}
fn default_learning_rate() -> f64 {
    2e-4
}
fn default_weight_decay() -> f64 {
    1e-12
}
fn default_grad_clip() -> f64 {
    10.0
}
fn default_ema_decay() -> f64 {
    0.999
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    32
}
fn default_train_steps() -> usize {
    2000
}
fn default_checkpoint_every() -> usize {
    500
}
fn default_log_every() -> usize {
    1
}
fn default_mode() -> String {
    "ddpm".into()
}
fn default_stride() -> usize {
    1
}
fn default_n_samples() -> usize {
    500
}
fn default_size_source() -> String {
    "train".into()
}

/// Every knob of a run, parsed from a sectioned key-value file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub vocabulary: VocabularySection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub sampling: SamplingSection,
}

impl RunConfig {
    /// Parse and statically validate config text. Does not touch the
    /// filesystem; use [`RunConfig::from_file`] for the full load.
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| EquimolError::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Load a config file: parse, resolve relative paths against the file's
    /// directory, and require every referenced file to exist.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            EquimolError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        config.check_files_exist()?;
        Ok(config)
    }

    /// Rebase every relative path in the config onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(p.as_path());
            }
        };
        rebase(&mut self.dataset.train);
        if let Some(v) = &mut self.dataset.val {
            rebase(v);
        }
        if let Some(t) = &mut self.dataset.test {
            rebase(t);
        }
        rebase(&mut self.run.out_dir);
    }

    /// Require every referenced dataset file to exist.
    pub fn check_files_exist(&self) -> Result<()> {
        let mut referenced: Vec<(&str, &Path)> = vec![("dataset.train", &self.dataset.train)];
        if let Some(v) = &self.dataset.val {
            referenced.push(("dataset.val", v));
        }
        if let Some(t) = &self.dataset.test {
            referenced.push(("dataset.test", t));
        }
        for (key, p) in referenced {
            if !p.is_file() {
                return Err(EquimolError::Config(format!(
                    "{key} references a missing file: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Field-by-field static validation, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| -> Result<()> {
            Err(EquimolError::Config(format!("config field {key}: {why}")))
        };

        if self.vocabulary.elements.is_empty() {
            return bad("vocabulary.elements", "must list at least one element");
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.vocabulary.elements {
            if !seen.insert(e.as_str()) {
                return bad("vocabulary.elements", &format!("duplicate element {e:?}"));
            }
        }
        if let Some(h) = &self.vocabulary.hybridizations {
            if h.is_empty() {
                return bad("vocabulary.hybridizations", "must be non-empty when given");
            }
        }

        if self.schedule.steps == 0 {
            return bad("schedule.steps", "must be at least 1");
        }
        if !(self.schedule.s > 0.0 && self.schedule.s < 1.0) {
            return bad("schedule.s", "must lie in (0, 1)");
        }
        for (key, nu) in [
            ("schedule.nu_coords", self.schedule.nu_coords),
            ("schedule.nu_atoms", self.schedule.nu_atoms),
            ("schedule.nu_charges", self.schedule.nu_charges),
            ("schedule.nu_bonds", self.schedule.nu_bonds),
            ("schedule.nu_extras", self.schedule.nu_extras),
        ] {
            if !(nu > 0.0 && nu.is_finite()) {
                return bad(key, "must be a positive finite exponent");
            }
        }

        if !(0.0..1.0).contains(&self.dataset.prior_floor) {
            return bad("dataset.prior_floor", "must lie in [0, 1)");
        }

        for (key, v) in [
            ("model.scalar_dim", self.model.scalar_dim),
            ("model.vector_dim", self.model.vector_dim),
            ("model.edge_dim", self.model.edge_dim),
            ("model.num_layers", self.model.num_layers),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1");
            }
        }
        if self.model.parameterization == Parameterization::Eps
            && self.schedule.state_space == StateSpace::Discrete
        {
            return bad(
                "model.parameterization",
                "noise prediction requires schedule.state_space = \"continuous\"",
            );
        }

        for (key, l) in [
            ("loss.lambda_coords", self.loss.lambda_coords),
            ("loss.lambda_atoms", self.loss.lambda_atoms),
            ("loss.lambda_charges", self.loss.lambda_charges),
            ("loss.lambda_bonds", self.loss.lambda_bonds),
            ("loss.lambda_extras", self.loss.lambda_extras),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(key, "must be finite and non-negative");
            }
        }
        match self.loss.weighting.as_str() {
            "uniform" => {}
            "snr_clamp" => {
                if !(self.loss.clamp_min > 0.0 && self.loss.clamp_max >= self.loss.clamp_min) {
                    return bad("loss.clamp_min", "need 0 < clamp_min <= clamp_max");
                }
            }
            other => {
                return bad(
                    "loss.weighting",
                    &format!("unknown value {other:?} (expected \"uniform\" or \"snr_clamp\")"),
                )
            }
        }

        for (key, v) in [
            ("optimizer.learning_rate", self.optimizer.learning_rate),
            ("optimizer.grad_clip", self.optimizer.grad_clip),
            ("optimizer.eps", self.optimizer.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, "must be positive and finite");
            }
        }
        if !(0.0..=1.0).contains(&self.optimizer.ema_decay) {
            return bad("optimizer.ema_decay", "must lie in [0, 1]");
        }
        for (key, b) in [
            ("optimizer.beta1", self.optimizer.beta1),
            ("optimizer.beta2", self.optimizer.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(key, "must lie in [0, 1)");
            }
        }
        if !(self.optimizer.weight_decay >= 0.0 && self.optimizer.weight_decay.is_finite()) {
            return bad("optimizer.weight_decay", "must be finite and non-negative");
        }

        for (key, v) in [
            ("training.batch_size", self.training.batch_size),
            ("training.steps", self.training.steps),
            ("training.checkpoint_every", self.training.checkpoint_every),
            ("training.log_every", self.training.log_every),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1");
            }
        }

        match self.sampling.mode.as_str() {
            "ddpm" | "ddim" => {}
            other => {
                return bad(
                    "sampling.mode",
                    &format!("unknown value {other:?} (expected \"ddpm\" or \"ddim\")"),
                )
            }
        }
        if self.sampling.stride == 0 {
            return bad("sampling.stride", "must be at least 1");
        }
        match self.sampling.size_source.as_str() {
            "train" | "val" | "test" => {}
            other => {
                return bad(
                    "sampling.size_source",
                    &format!("unknown value {other:?} (expected \"train\", \"val\", or \"test\")"),
                )
            }
        }
        if self.sampling.size_source == "val" && self.dataset.val.is_none() {
            return bad("sampling.size_source", "\"val\" needs dataset.val");
        }
        if self.sampling.size_source == "test" && self.dataset.test.is_none() {
            return bad("sampling.size_source", "\"test\" needs dataset.test");
        }

        Ok(())
    }

    /// The vocabulary this run fixes class indices against.
    pub fn vocabulary(&self) -> DatasetVocabulary {
        let mut vocab = DatasetVocabulary::new(self.vocabulary.elements.clone());
        if let Some(h) = &self.vocabulary.hybridizations {
            vocab.hybridizations = h.clone();
        }
        vocab
    }

    pub fn process_params(&self) -> ProcessParams {
        ProcessParams {
            steps: self.schedule.steps,
            s: self.schedule.s,
            nu_coords: self.schedule.nu_coords,
            nu_atoms: self.schedule.nu_atoms,
            nu_charges: self.schedule.nu_charges,
            nu_bonds: self.schedule.nu_bonds,
            nu_extras: self.schedule.nu_extras,
            state_space: self.schedule.state_space,
        }
    }

    /// The denoiser architecture implied by this config: class counts come
    /// from the vocabulary, the horizon from the schedule.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        let vocab = self.vocabulary();
        DenoiserConfig {
            scalar_dim: self.model.scalar_dim,
            vector_dim: self.model.vector_dim,
            edge_dim: self.model.edge_dim,
            num_layers: self.model.num_layers,
            steps: self.schedule.steps,
            k_atoms: vocab.n_elements(),
            k_charges: CHARGE_CLASSES.len(),
            k_bonds: BondClass::COUNT,
            k_hybrid: self
                .run
                .extra_features
                .then(|| vocab.hybridizations.len()),
            parameterization: self.model.parameterization,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let weighting = match self.loss.weighting.as_str() {
            "uniform" => LossWeighting::Uniform,
            _ => LossWeighting::SnrClamp {
                clamp_min: self.loss.clamp_min,
                clamp_max: self.loss.clamp_max,
            },
        };
        LossConfig {
            lambda_coords: self.loss.lambda_coords,
            lambda_atoms: self.loss.lambda_atoms,
            lambda_charges: self.loss.lambda_charges,
            lambda_bonds: self.loss.lambda_bonds,
            lambda_extras: self.loss.lambda_extras,
            parameterization: self.model.parameterization,
            state_space: self.schedule.state_space,
            weighting,
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.optimizer.learning_rate,
            weight_decay: self.optimizer.weight_decay,
            grad_clip: self.optimizer.grad_clip,
            ema_decay: self.optimizer.ema_decay,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
        }
    }

    pub fn sample_mode(&self) -> SampleMode {
        match self.sampling.mode.as_str() {
            "ddim" => SampleMode::Ddim {
                stride: self.sampling.stride,
            },
            _ => SampleMode::Ddpm,
        }
    }

    /// Stable 16-hex-digit digest of the full config, embedded in every
    /// artifact so outputs are traceable to their exact inputs.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::metrics::fingerprint::fnv1a(canon.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [run]
        seed = 7

        [dataset]
        train = "train.sdf"

        [vocabulary]
        elements = ["C", "N", "O", "H"]
    "#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.run.seed, 7);
        assert!(c.run.extra_features);
        assert!(!c.run.context_conditioning);
        assert_eq!(c.schedule.steps, 500);
        assert_eq!(c.schedule.state_space, StateSpace::Discrete);
        assert_eq!(c.model.parameterization, Parameterization::X0);
        assert_eq!(c.model.scalar_dim, 128);
        assert_eq!(c.loss.weighting, "snr_clamp");
        assert_eq!(c.sampling.mode, "ddpm");
        assert_eq!(c.training.batch_size, 32);
        assert_eq!(c.dataset.prior_floor, crate::dataset::PRIOR_FLOOR);
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let text = format!("{MINIMAL}\n[schedule]\nstepz = 100\n");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");

        let text = format!("{MINIMAL}\n[surprise]\nx = 1\n");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn type_errors_are_fatal() {
        let text = MINIMAL.replace("seed = 7", "seed = \"seven\"");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn invalid_fields_are_named() {
        let cases: &[(&str, &str)] = &[
            ("[schedule]\nsteps = 0", "schedule.steps"),
            ("[schedule]\ns = 1.5", "schedule.s"),
            ("[schedule]\nnu_bonds = -1.0", "schedule.nu_bonds"),
            ("[model]\nnum_layers = 0", "model.num_layers"),
            ("[loss]\nlambda_bonds = -2.0", "loss.lambda_bonds"),
            ("[loss]\nweighting = \"squared\"", "loss.weighting"),
            ("[optimizer]\nlearning_rate = 0.0", "optimizer.learning_rate"),
            ("[optimizer]\nema_decay = 1.5", "optimizer.ema_decay"),
            ("[training]\nbatch_size = 0", "training.batch_size"),
            ("[sampling]\nmode = \"dance\"", "sampling.mode"),
            ("[sampling]\nstride = 0", "sampling.stride"),
            ("[sampling]\nsize_source = \"val\"", "sampling.size_source"),
            ("[dataset2]\nprior_floor = 1.0", "dataset2"),
        ];
        for (extra, needle) in cases {
            let text = format!("{MINIMAL}\n{extra}\n");
            let err = RunConfig::parse(&text).unwrap_err();
            assert!(
                err.to_string().contains(needle),
                "{extra} should name {needle}, got: {err}"
            );
        }

        // prior_floor lives inside [dataset], so patch the section inline.
        let text = MINIMAL.replace("train = \"train.sdf\"", "train = \"t.sdf\"\nprior_floor = 1.0");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("dataset.prior_floor"), "{err}");
    }

    #[test]
    fn eps_parameterization_requires_continuous_state() {
        let text = format!("{MINIMAL}\n[model]\nparameterization = \"eps\"\n");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("model.parameterization"), "{err}");

        let text = format!(
            "{MINIMAL}\n[model]\nparameterization = \"eps\"\n[schedule]\nstate_space = \"continuous\"\n"
        );
        let c = RunConfig::parse(&text).unwrap();
        assert_eq!(c.loss_config().parameterization, Parameterization::Eps);
        assert_eq!(c.loss_config().state_space, StateSpace::Continuous);
    }

    #[test]
    fn conversions_agree_with_domain_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();

        let p = c.process_params();
        let d = ProcessParams::default();
        assert_eq!(p.steps, d.steps);
        assert_eq!(p.nu_coords, d.nu_coords);
        assert_eq!(p.state_space, d.state_space);

        let dc = c.denoiser_config();
        assert_eq!(dc.k_atoms, 4);
        assert_eq!(dc.k_charges, CHARGE_CLASSES.len());
        assert_eq!(dc.k_bonds, BondClass::COUNT);
        assert_eq!(dc.k_hybrid, Some(4));
        assert_eq!(dc.steps, 500);

        let lc = c.loss_config();
        assert_eq!(lc, LossConfig::reference(Parameterization::X0, StateSpace::Discrete));
        lc.validate().unwrap();

        assert_eq!(c.optim_config(), OptimConfig::default());
        assert_eq!(c.sample_mode(), SampleMode::Ddpm);

        // Extra features off → no hybridization head.
        let text = MINIMAL.replace("seed = 7", "seed = 7\nextra_features = false");
        let c = RunConfig::parse(&text).unwrap();
        assert_eq!(c.denoiser_config().k_hybrid, None);

        // DDIM mode carries its stride.
        let text = format!("{MINIMAL}\n[sampling]\nmode = \"ddim\"\nstride = 2\n");
        let c = RunConfig::parse(&text).unwrap();
        assert_eq!(c.sample_mode(), SampleMode::Ddim { stride: 2 });
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::parse(MINIMAL).unwrap();
        let b = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);

        let text = MINIMAL.replace("seed = 7", "seed = 8");
        let c = RunConfig::parse(&text).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn file_load_resolves_and_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("run.toml");
        std::fs::write(&config_path, MINIMAL).unwrap();

        // train.sdf does not exist yet: load fails naming the key.
        let err = RunConfig::from_file(&config_path).unwrap_err();
        assert!(err.to_string().contains("dataset.train"), "{err}");

        std::fs::write(dir.path().join("train.sdf"), "").unwrap();
        let c = RunConfig::from_file(&config_path).unwrap();
        assert!(c.dataset.train.is_absolute() || c.dataset.train.starts_with(dir.path()));
        assert_eq!(c.dataset.train, dir.path().join("train.sdf"));
    }

    #[test]
    fn round_trips_through_serde() {
        let text = format!(
            "{MINIMAL}\n[sampling]\nmode = \"ddim\"\nstride = 4\n[schedule]\nsteps = 50\n"
        );
        let c = RunConfig::parse(&text).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }
}
