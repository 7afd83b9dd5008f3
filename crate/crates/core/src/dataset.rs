//! Training-set loading and the statistics derived from it.
//!
//! A [`MoleculeDataset`] is a validated list of molecules plus the
//! vocabulary that fixes class layouts. From it come the two pieces the
//! rest of the pipeline consumes: categorical priors for the transition
//! kernels (training marginals with a smoothing floor, so no class ever
//! has exactly zero prior mass) and a [`SizeSampler`] that draws atom
//! counts for generation from the empirical size histogram.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;

use crate::diffusion::{ModalityPriors, NoiseSource};
use crate::molgraph::{
    derive_extras, read_sdf, DatasetVocabulary, Molecule, CHARGE_CLASSES,
};
use crate::{EquimolError, Result};

/// Default smoothing floor for marginal priors: small enough to leave the
/// observed distribution essentially untouched, large enough that unseen
/// classes keep a usable escape probability in the transition kernels.
pub const PRIOR_FLOOR: f64 = 1e-4;

/// A validated molecule collection tied to one vocabulary.
#[derive(Debug, Clone)]
pub struct MoleculeDataset {
    pub molecules: Vec<Molecule>,
    pub vocab: DatasetVocabulary,
}

impl MoleculeDataset {
    /// Wrap molecules after validating each against the vocabulary.
    pub fn new(molecules: Vec<Molecule>, vocab: DatasetVocabulary) -> Result<Self> {
        for (i, mol) in molecules.iter().enumerate() {
            mol.validate(&vocab).map_err(|e| {
                EquimolError::Config(format!("molecule {i} fails validation: {e}"))
            })?;
        }
        Ok(MoleculeDataset { molecules, vocab })
    }

    /// Read an SDF file and validate every record.
    pub fn from_sdf(path: &Path, vocab: DatasetVocabulary) -> Result<Self> {
        let molecules = read_sdf(path, &vocab)?;
        Self::new(molecules, vocab)
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    /// Attach derived extra features (aromaticity, ring membership,
    /// hybridization) to every molecule that lacks them.
    pub fn with_derived_extras(mut self) -> Result<Self> {
        for mol in &mut self.molecules {
            if mol.extras.is_none() {
                mol.extras = Some(derive_extras(mol, &self.vocab)?);
            }
        }
        Ok(self)
    }

    /// Training-marginal priors for every categorical modality, smoothed by
    /// `floor` (see [`PRIOR_FLOOR`]): each class probability is raised to at
    /// least the floor, then the vector is renormalized. With
    /// `include_extras`, extra-feature marginals are computed too, deriving
    /// the features on the fly where a molecule lacks them.
    pub fn priors(&self, include_extras: bool, floor: f64) -> Result<ModalityPriors> {
        if self.molecules.is_empty() {
            return Err(EquimolError::Config(
                "cannot derive priors from an empty dataset".into(),
            ));
        }
        let ne = self.vocab.n_elements();
        let kh = self.vocab.hybridizations.len();
        if !(0.0..1.0).contains(&floor) {
            return Err(EquimolError::Config(format!(
                "prior smoothing floor {floor} outside [0, 1)"
            )));
        }

        let mut atom_counts = vec![0.0; ne];
        let mut charge_counts = vec![0.0; CHARGE_CLASSES.len()];
        let mut bond_counts = vec![0.0; crate::molgraph::BondClass::COUNT];
        let mut aromatic_counts = vec![0.0; 2];
        let mut ring_counts = vec![0.0; 2];
        let mut hybrid_counts = vec![0.0; kh];

        for mol in &self.molecules {
            for &e in &mol.elements {
                atom_counts[e] += 1.0;
            }
            for &c in &mol.charges {
                charge_counts[c] += 1.0;
            }
            let n = mol.num_atoms();
            for i in 0..n {
                for j in (i + 1)..n {
                    bond_counts[mol.bonds[[i, j]]] += 1.0;
                }
            }
            if include_extras {
                let derived;
                let extras = match &mol.extras {
                    Some(e) => e,
                    None => {
                        derived = derive_extras(mol, &self.vocab)?;
                        &derived
                    }
                };
                for &a in &extras.is_aromatic {
                    aromatic_counts[a as usize] += 1.0;
                }
                for &r in &extras.in_ring {
                    ring_counts[r as usize] += 1.0;
                }
                for &h in &extras.hybridization {
                    hybrid_counts[h] += 1.0;
                }
            }
        }

        let smooth = |counts: &[f64]| -> Result<Array1<f64>> {
            let total: f64 = counts.iter().sum();
            if total <= 0.0 {
                return Err(EquimolError::Config(
                    "marginal has no observations to normalize".into(),
                ));
            }
            let floored: Vec<f64> =
                counts.iter().map(|&c| (c / total).max(floor)).collect();
            let norm: f64 = floored.iter().sum();
            Ok(Array1::from_iter(floored.into_iter().map(|p| p / norm)))
        };

        Ok(ModalityPriors {
            atoms: smooth(&atom_counts)?,
            charges: smooth(&charge_counts)?,
            bonds: smooth(&bond_counts)?,
            aromatic: include_extras.then(|| smooth(&aromatic_counts)).transpose()?,
            ring: include_extras.then(|| smooth(&ring_counts)).transpose()?,
            hybridization: include_extras.then(|| smooth(&hybrid_counts)).transpose()?,
        })
    }

    /// The empirical atom-count distribution as a sampler.
    pub fn size_sampler(&self) -> Result<SizeSampler> {
        SizeSampler::from_sizes(self.molecules.iter().map(|m| m.num_atoms()))
    }

    /// The atom-count histogram as sorted `(size, count)` pairs — the
    /// persistable form of [`MoleculeDataset::size_sampler`].
    pub fn size_counts(&self) -> Vec<(usize, usize)> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for m in &self.molecules {
            *counts.entry(m.num_atoms()).or_insert(0) += 1;
        }
        counts.into_iter().collect()
    }
}

/// Draws molecule sizes from an empirical histogram via inverse-CDF
/// lookup on a single uniform sample per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeSampler {
    sizes: Vec<usize>,
    cdf: Vec<f64>,
}

impl SizeSampler {
    /// Build from observed sizes. Zero-atom entries and an empty stream
    /// are configuration errors.
    pub fn from_sizes(observed: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::from_counts(observed.into_iter().map(|n| (n, 1)))
    }

    /// Build from a pre-tallied `(size, count)` histogram (the persisted
    /// form). Zero counts are skipped; zero-atom sizes are errors.
    pub fn from_counts(histogram: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut total = 0usize;
        for (n, count) in histogram {
            if count == 0 {
                continue;
            }
            if n == 0 {
                return Err(EquimolError::Config(
                    "size histogram cannot include zero-atom molecules".into(),
                ));
            }
            *counts.entry(n).or_insert(0) += count;
            total += count;
        }
        if total == 0 {
            return Err(EquimolError::Config(
                "size histogram needs at least one observation".into(),
            ));
        }
        let sizes: Vec<usize> = counts.keys().copied().collect();
        let mut cdf = Vec::with_capacity(sizes.len());
        let mut acc = 0.0;
        for &count in counts.values() {
            acc += count as f64 / total as f64;
            cdf.push(acc);
        }
        // Guard the top of the ladder against rounding shortfall.
        *cdf.last_mut().expect("non-empty") = 1.0;
        Ok(SizeSampler { sizes, cdf })
    }

    /// Distinct sizes in ascending order.
    pub fn support(&self) -> &[usize] {
        &self.sizes
    }

    /// Probability of each size in `support` order.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cdf
            .iter()
            .map(|&c| {
                let p = c - prev;
                prev = c;
                p
            })
            .collect()
    }

    /// Draw one size.
    pub fn sample(&self, noise: &mut dyn NoiseSource) -> usize {
        let u = noise.uniform();
        let idx = self.cdf.iter().position(|&c| u < c).unwrap_or(self.sizes.len() - 1);
        self.sizes[idx]
    }

    /// Draw a batch of sizes.
    pub fn sample_many(&self, n: usize, noise: &mut dyn NoiseSource) -> Vec<usize> {
        (0..n).map(|_| self.sample(noise)).collect()
    }
}
