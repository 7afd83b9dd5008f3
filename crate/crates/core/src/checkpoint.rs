//! Single-file training checkpoints: a JSON header followed by raw
//! little-endian parameter payloads.
//!
//! A checkpoint is self-describing — it carries the full run config, the
//! vocabulary, the categorical priors, and the molecule-size histogram, so
//! a model can be sampled on a machine that has never seen the dataset.
//! Serialization is canonical: structs only (stable JSON key order), fixed
//! tensor order, and bitwise `f64` payloads, so save → load → save yields
//! byte-identical files.
//!
//! Layout: an 8-byte little-endian header length, the JSON header, then
//! every tensor's elements as little-endian `f64`s — raw weights first,
//! then EMA weights, then the three optimizer moment blocks, each block
//! storing tensors in parameter-store order.

use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::denoiser::EquivariantDenoiser;
use crate::diffusion::{DiffusionProcess, ModalityPriors};
use crate::molgraph::DatasetVocabulary;
use crate::training::{AmsGrad, EmaWeights, OptimizerState, Trainer};
use crate::{EquimolError, Result};

/// Bumped whenever the container layout changes incompatibly.
pub const CHECKPOINT_VERSION: u32 = 1;

const FORMAT_TAG: &str = "equimol-checkpoint";

/// Everything needed to resume training or sample without the original
/// dataset on hand.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub vocabulary: DatasetVocabulary,
    pub priors: ModalityPriors,
    /// `(size, count)` histogram feeding the molecule-size sampler.
    pub size_counts: Vec<(usize, usize)>,
    pub epoch: usize,
    pub step: usize,
    /// Parameter names in store order; all tensor blocks share it.
    pub tensor_names: Vec<String>,
    pub raw_params: Vec<ArrayD<f64>>,
    pub ema_params: Vec<ArrayD<f64>>,
    pub optimizer: OptimizerState,
}

/// The JSON half of the container. Field order is the serialization order.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    config_hash: String,
    epoch: usize,
    step: usize,
    optimizer_step: usize,
    config: RunConfig,
    vocabulary: DatasetVocabulary,
    priors: ModalityPriors,
    size_counts: Vec<(usize, usize)>,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// Snapshot a trainer. `epoch` is the number of completed passes; the
    /// step counter comes from the optimizer.
    pub fn from_trainer(
        config: &RunConfig,
        trainer: &Trainer,
        priors: &ModalityPriors,
        size_counts: &[(usize, usize)],
        epoch: usize,
    ) -> Checkpoint {
        let store = &trainer.model.params;
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            vocabulary: config.vocabulary(),
            priors: priors.clone(),
            size_counts: size_counts.to_vec(),
            epoch,
            step: trainer.optimizer.step_count(),
            tensor_names: store.entries().map(|(n, _)| n.to_string()).collect(),
            raw_params: store.entries().map(|(_, v)| v.clone()).collect(),
            ema_params: trainer.ema.values().to_vec(),
            optimizer: trainer.optimizer.export_state(),
        }
    }

    /// Serialize to the container byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_block_consistency()?;
        let header = Header {
            format: FORMAT_TAG.into(),
            version: self.version,
            seed: self.config.run.seed,
            config_hash: self.config.hash(),
            epoch: self.epoch,
            step: self.step,
            optimizer_step: self.optimizer.step,
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            priors: self.priors.clone(),
            size_counts: self.size_counts.clone(),
            tensors: self
                .tensor_names
                .iter()
                .zip(&self.raw_params)
                .map(|(name, v)| TensorMeta {
                    name: name.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| EquimolError::Contract(format!("checkpoint header: {e}")))?;

        let n_scalars: usize = self.raw_params.iter().map(|v| v.len()).sum();
        let mut out = Vec::with_capacity(8 + header_bytes.len() + 5 * n_scalars * 8);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for block in self.blocks() {
            for tensor in block {
                for &x in tensor.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Parse the container byte layout, checking format tag and version.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let truncated = || parse_err("container", "file is truncated".into());
        if bytes.len() < 8 {
            return Err(truncated());
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(truncated)?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| parse_err("header", e.to_string()))?;
        if header.format != FORMAT_TAG {
            return Err(parse_err(
                "header",
                format!("not a checkpoint file (format tag {:?})", header.format),
            ));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(parse_err(
                "header",
                format!(
                    "version {} is not supported (expected {})",
                    header.version, CHECKPOINT_VERSION
                ),
            ));
        }

        let n_scalars: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let payload = &bytes[header_end..];
        if payload.len() != 5 * n_scalars * 8 {
            return Err(parse_err(
                "payload",
                format!(
                    "holds {} bytes, header implies {}",
                    payload.len(),
                    5 * n_scalars * 8
                ),
            ));
        }

        let mut cursor = 0usize;
        let mut read_block = || -> Result<Vec<ArrayD<f64>>> {
            let mut block = Vec::with_capacity(header.tensors.len());
            for meta in &header.tensors {
                let len: usize = meta.shape.iter().product();
                let mut data = Vec::with_capacity(len);
                for _ in 0..len {
                    let raw: [u8; 8] = payload[cursor..cursor + 8].try_into().expect("bounds checked");
                    data.push(f64::from_le_bytes(raw));
                    cursor += 8;
                }
                let arr = ArrayD::from_shape_vec(meta.shape.clone(), data)
                    .map_err(|e| parse_err(&format!("tensor {}", meta.name), e.to_string()))?;
                block.push(arr);
            }
            Ok(block)
        };

        let raw_params = read_block()?;
        let ema_params = read_block()?;
        let m = read_block()?;
        let v = read_block()?;
        let v_max = read_block()?;

        let checkpoint = Checkpoint {
            version: header.version,
            config: header.config,
            vocabulary: header.vocabulary,
            priors: header.priors,
            size_counts: header.size_counts,
            epoch: header.epoch,
            step: header.step,
            tensor_names: header.tensors.into_iter().map(|t| t.name).collect(),
            raw_params,
            ema_params,
            optimizer: OptimizerState {
                step: header.optimizer_step,
                m,
                v,
                v_max,
            },
        };
        checkpoint.check_block_consistency()?;
        Ok(checkpoint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| {
            EquimolError::Config(format!("cannot write checkpoint {}: {e}", path.display()))
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| {
            EquimolError::Config(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }

    /// The model carrying the raw (non-averaged) weights.
    pub fn raw_model(&self) -> Result<EquivariantDenoiser> {
        self.model_from(&self.raw_params)
    }

    /// The model carrying the EMA weights — the sampling weights.
    pub fn ema_model(&self) -> Result<EquivariantDenoiser> {
        self.model_from(&self.ema_params)
    }

    /// The diffusion process this run trained against.
    pub fn process(&self) -> Result<DiffusionProcess> {
        DiffusionProcess::new(&self.config.process_params(), &self.priors)
    }

    /// Rebuild a trainer that continues this run: raw weights, optimizer
    /// moments, EMA state, and step counter all restored. The noise stream
    /// is reseeded deterministically from the seed and the step counter, so
    /// resumed training does not replay the batches already consumed.
    pub fn rebuild_trainer(&self) -> Result<Trainer> {
        let model = self.raw_model()?;
        let process = self.process()?;
        let optim_config = self.config.optim_config();
        let seed = resume_seed(self.config.run.seed, self.step);
        let mut trainer = Trainer::new(
            model,
            process,
            self.config.loss_config(),
            optim_config,
            seed,
        )?;
        trainer.optimizer.restore_state(self.optimizer.clone())?;
        trainer.ema = EmaWeights::from_values(optim_config.ema_decay, self.ema_params.clone());
        Ok(trainer)
    }

    fn model_from(&self, weights: &[ArrayD<f64>]) -> Result<EquivariantDenoiser> {
        let mut model = EquivariantDenoiser::new(self.config.denoiser_config(), 0)?;
        let store = &mut model.params;
        if weights.len() != store.len() || self.tensor_names.len() != store.len() {
            return Err(EquimolError::Contract(format!(
                "checkpoint holds {} tensors, architecture defines {}",
                weights.len(),
                store.len()
            )));
        }
        for (name, value) in self.tensor_names.iter().zip(weights) {
            let id = store.id_of(name).ok_or_else(|| {
                EquimolError::Contract(format!("checkpoint tensor {name:?} is not in the model"))
            })?;
            if store.value(id).shape() != value.shape() {
                return Err(EquimolError::Contract(format!(
                    "tensor {name:?} has shape {:?} in the checkpoint, {:?} in the model",
                    value.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = value.clone();
        }
        Ok(model)
    }

    fn blocks(&self) -> [&[ArrayD<f64>]; 5] {
        [
            &self.raw_params,
            &self.ema_params,
            &self.optimizer.m,
            &self.optimizer.v,
            &self.optimizer.v_max,
        ]
    }

    fn check_block_consistency(&self) -> Result<()> {
        let n = self.tensor_names.len();
        for (label, block) in [
            ("raw", &self.raw_params),
            ("ema", &self.ema_params),
            ("optimizer m", &self.optimizer.m),
            ("optimizer v", &self.optimizer.v),
            ("optimizer v_max", &self.optimizer.v_max),
        ] {
            if block.len() != n {
                return Err(EquimolError::Contract(format!(
                    "checkpoint block {label} holds {} tensors, expected {n}",
                    block.len()
                )));
            }
            for (i, t) in block.iter().enumerate() {
                if t.shape() != self.raw_params[i].shape() {
                    return Err(EquimolError::Contract(format!(
                        "checkpoint block {label} tensor {i} shape {:?} differs from raw {:?}",
                        t.shape(),
                        self.raw_params[i].shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn parse_err(location: &str, message: String) -> EquimolError {
    EquimolError::Parse {
        what: "checkpoint".into(),
        location: location.into(),
        message,
    }
}

/// The trainer noise-stream seed used when resuming at `step`. Distinct
/// from the fresh-run stream so a resumed run does not replay batches, yet
/// fully determined by the original seed and the resume point.
pub fn resume_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{BondClass, Molecule, NEUTRAL_CHARGE_CLASS};
    use ndarray::array;

    fn toy_config() -> RunConfig {
        RunConfig::parse(
            r#"
            [run]
            seed = 11

            [dataset]
            train = "train.sdf"

            [vocabulary]
            elements = ["C", "O", "H"]

            [schedule]
            steps = 8

            [model]
            scalar_dim = 6
            vector_dim = 4
            edge_dim = 5
            num_layers = 1

            [training]
            batch_size = 2
            steps = 3
            "#,
        )
        .unwrap()
    }

    fn toy_molecules() -> Vec<Molecule> {
        let mut water = Molecule::new(
            vec![1, 2, 2],
            vec![NEUTRAL_CHARGE_CLASS; 3],
            array![[0.0, 0.0, 0.0], [0.96, 0.0, 0.0], [-0.24, 0.93, 0.0]],
        )
        .unwrap();
        water.set_bond(0, 1, BondClass::Single).unwrap();
        water.set_bond(0, 2, BondClass::Single).unwrap();

        let mut co = Molecule::new(
            vec![0, 1],
            vec![NEUTRAL_CHARGE_CLASS; 2],
            array![[0.0, 0.0, 0.0], [1.2, 0.0, 0.0]],
        )
        .unwrap();
        co.set_bond(0, 1, BondClass::Double).unwrap();
        vec![water, co]
    }

    /// A trainer advanced a few steps so every state block is non-trivial.
    fn trained_trainer(config: &RunConfig) -> (Trainer, ModalityPriors) {
        let dataset = crate::dataset::MoleculeDataset::new(toy_molecules(), config.vocabulary())
            .unwrap()
            .with_derived_extras()
            .unwrap();
        let priors = dataset.priors(true, 1e-4).unwrap();
        let process = DiffusionProcess::new(&config.process_params(), &priors).unwrap();
        let model = EquivariantDenoiser::new(config.denoiser_config(), config.run.seed).unwrap();
        let mut trainer = Trainer::new(
            model,
            process,
            config.loss_config(),
            config.optim_config(),
            config.run.seed,
        )
        .unwrap();
        trainer
            .fit(&dataset.molecules, config.training.batch_size, 3, |_| {})
            .unwrap();
        (trainer, priors)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let config = toy_config();
        let (trainer, priors) = trained_trainer(&config);
        let counts = vec![(2usize, 1usize), (3, 1)];
        let ck = Checkpoint::from_trainer(&config, &trainer, &priors, &counts, 1);

        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let bytes2 = back.to_bytes().unwrap();
        assert_eq!(bytes, bytes2, "save -> load -> save must be byte-identical");

        // File round trip too.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.eqc");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
        assert_eq!(loaded.step, 3);
        assert_eq!(loaded.epoch, 1);
        assert_eq!(loaded.size_counts, counts);
    }

    #[test]
    fn models_carry_the_right_weight_sets() {
        let config = toy_config();
        let (trainer, priors) = trained_trainer(&config);
        let ck = Checkpoint::from_trainer(&config, &trainer, &priors, &[(3, 2)], 0);

        let raw = ck.raw_model().unwrap();
        let ema = ck.ema_model().unwrap();
        for i in 0..trainer.model.params.len() {
            assert_eq!(raw.params.value(i), trainer.model.params.value(i));
            assert_eq!(ema.params.value(i), &trainer.ema.values()[i]);
        }
        // After a few optimizer steps the two sets genuinely differ.
        let differs = (0..raw.params.len()).any(|i| raw.params.value(i) != ema.params.value(i));
        assert!(differs, "EMA should lag the raw weights");
    }

    #[test]
    fn rebuilt_trainer_continues_the_step_counter() {
        let config = toy_config();
        let (trainer, priors) = trained_trainer(&config);
        let ck = Checkpoint::from_trainer(&config, &trainer, &priors, &[(3, 2)], 1);

        let mut resumed = ck.rebuild_trainer().unwrap();
        assert_eq!(resumed.optimizer.step_count(), 3);
        assert_eq!(resumed.optimizer.export_state(), trainer.optimizer.export_state());

        // It can actually keep training, and the counter advances from 3.
        let dataset = crate::dataset::MoleculeDataset::new(toy_molecules(), config.vocabulary())
            .unwrap()
            .with_derived_extras()
            .unwrap();
        let reports = resumed.fit(&dataset.molecules, 2, 2, |_| {}).unwrap();
        assert_eq!(resumed.optimizer.step_count(), 5);
        assert_eq!(reports.len(), 2);
    }

    #[test]
    fn tampered_containers_are_rejected() {
        let config = toy_config();
        let (trainer, priors) = trained_trainer(&config);
        let ck = Checkpoint::from_trainer(&config, &trainer, &priors, &[(3, 2)], 0);
        let bytes = ck.to_bytes().unwrap();

        // Truncation, both in the header and the payload.
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());

        // Wrong version is refused by name.
        let mut wrong = ck.clone();
        wrong.version = CHECKPOINT_VERSION + 1;
        let err = Checkpoint::from_bytes(&wrong.to_bytes().unwrap()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        // A different file type entirely.
        let err = Checkpoint::from_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{}{{{").unwrap_err();
        assert!(err.to_string().to_lowercase().contains("checkpoint"), "{err}");
    }

    #[test]
    fn sampling_state_is_self_contained() {
        let config = toy_config();
        let (trainer, priors) = trained_trainer(&config);
        let ck = Checkpoint::from_trainer(&config, &trainer, &priors, &[(2, 1), (3, 1)], 0);
        let bytes = ck.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();

        // Process and size sampler rebuild without touching the dataset.
        let process = loaded.process().unwrap();
        assert_eq!(process.steps(), 8);
        let sampler = crate::dataset::SizeSampler::from_counts(loaded.size_counts.iter().copied())
            .unwrap();
        assert_eq!(sampler.support(), &[2, 3]);
        // Priors survive bit-exactly.
        assert_eq!(loaded.priors.atoms, priors.atoms);
        assert_eq!(loaded.priors.hybridization, priors.hybridization);
    }

    #[test]
    fn resume_seed_is_deterministic_and_step_sensitive() {
        assert_eq!(resume_seed(7, 0), 7);
        assert_eq!(resume_seed(7, 100), resume_seed(7, 100));
        assert_ne!(resume_seed(7, 100), resume_seed(7, 200));
        assert_ne!(resume_seed(7, 100), resume_seed(8, 100));
    }
}
