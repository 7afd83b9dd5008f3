//! Generation-quality metrics comparing a sampled set to a reference set.
//!
//! The module computes per-set scores (stability, validity, connectivity),
//! set-vs-set distribution distances (total variation over atom and bond
//! marginals, weighted Wasserstein-1 over valencies, bond lengths, and bond
//! angles), graph-identity scores (uniqueness, novelty, diversity, train
//! similarity), and a descriptor-histogram KL similarity. Everything funnels
//! into [`evaluate_set`], which fills a [`MetricsReport`].
//!
//! Conventions for degenerate inputs: per-set fractions over an empty set
//! are defined as 0 with a warning; distribution metrics that would divide
//! by zero are reported as absent (`None`) rather than invented.

pub mod canonical;
pub mod distance;
pub mod fingerprint;

pub use canonical::{canonical_serialization, novelty_uniqueness, NoveltyUniqueness};
pub use distance::{histogram_kl, tv_distance, wasserstein1_1d, KL_BINS, KL_SMOOTHING};
pub use fingerprint::{
    diversity, path_fingerprint, tanimoto, train_similarity, Fingerprint, FINGERPRINT_BITS,
    MAX_PATH_BONDS,
};

use std::collections::BTreeSet;
use std::io::Write as _;
use std::process::{Command, Stdio};

use crate::molgraph::{
    sdf_to_string, BondClass, DatasetVocabulary, Molecule, ValencyTable, CHARGE_CLASSES,
};
use crate::{EquimolError, Result};

/// Name recorded in reports when the built-in validity predicate runs.
pub const TABLE_PREDICATE: &str = "largest-component-valency-table";

/// Descriptor panel order used by [`descriptor_panel`] and the KL score.
pub const DESCRIPTOR_NAMES: [&str; 5] = [
    "molecular_weight",
    "heavy_atom_count",
    "ring_count",
    "aromatic_atom_fraction",
    "mean_bond_length",
];

/// Standard atomic weights for the elements this crate expects to meet.
/// Molecular weight is a *descriptor*, compared between two sets through
/// histograms, so an element missing here (mass 0) shifts both sides the
/// same way rather than invalidating the comparison.
pub const ATOMIC_MASSES: [(&str, f64); 12] = [
    ("H", 1.008),
    ("B", 10.81),
    ("C", 12.011),
    ("N", 14.007),
    ("O", 15.999),
    ("F", 18.998403163),
    ("Si", 28.085),
    ("P", 30.973761998),
    ("S", 32.06),
    ("Cl", 35.45),
    ("Br", 79.904),
    ("I", 126.90447),
];

/// Mass of an element symbol; 0 for symbols outside [`ATOMIC_MASSES`].
pub fn atomic_mass(symbol: &str) -> f64 {
    ATOMIC_MASSES
        .iter()
        .find(|(s, _)| *s == symbol)
        .map_or(0.0, |&(_, m)| m)
}

fn symbol<'v>(vocab: &'v DatasetVocabulary, class: usize) -> Result<&'v str> {
    vocab.elements.get(class).map(|s| s.as_str()).ok_or_else(|| {
        EquimolError::Contract(format!("element class {class} outside the vocabulary"))
    })
}

// ---------------------------------------------------------------------------
// Per-set fractions
// ---------------------------------------------------------------------------

/// Fractions of atoms and molecules whose bond-order sums are allowed
/// valencies for their (element, charge). A molecule is stable when every
/// atom is. Elements with no table entry at any model charge are a
/// configuration error; an empty set scores (0, 0) with a warning.
pub fn stability(
    mols: &[Molecule],
    table: &ValencyTable,
    vocab: &DatasetVocabulary,
) -> Result<(f64, f64)> {
    if mols.is_empty() {
        log::warn!("stability of an empty molecule set is defined as (0, 0)");
        return Ok((0.0, 0.0));
    }
    let mut checked = vec![false; vocab.n_elements()];
    for mol in mols {
        for &e in &mol.elements {
            let sym = symbol(vocab, e)?;
            if !checked[e] {
                checked[e] = true;
                if CHARGE_CLASSES.iter().all(|&c| table.allowed(sym, c).is_none()) {
                    return Err(EquimolError::Config(format!(
                        "valency table has no entry for element {sym} at any charge"
                    )));
                }
            }
        }
    }

    let mut stable_atoms = 0usize;
    let mut total_atoms = 0usize;
    let mut stable_mols = 0usize;
    for mol in mols {
        let valencies = mol.atom_valencies();
        let mut all_stable = true;
        for i in 0..mol.num_atoms() {
            let sym = symbol(vocab, mol.elements[i])?;
            if table.is_allowed(sym, mol.formal_charge(i), valencies[i]) {
                stable_atoms += 1;
            } else {
                all_stable = false;
            }
        }
        total_atoms += mol.num_atoms();
        if all_stable {
            stable_mols += 1;
        }
    }
    Ok((
        stable_atoms as f64 / total_atoms.max(1) as f64,
        stable_mols as f64 / mols.len() as f64,
    ))
}

/// The built-in validity predicate: the largest connected component must
/// pass the valency check for every atom, and its aromatic bonds must all
/// lie on cycles. Unknown elements make a molecule invalid, never an error.
fn table_valid(mol: &Molecule, table: &ValencyTable, vocab: &DatasetVocabulary) -> bool {
    let lc = mol.largest_component();
    if lc.num_atoms() == 0 {
        return false;
    }
    let valencies = lc.atom_valencies();
    for i in 0..lc.num_atoms() {
        let Some(sym) = lc.elements.get(i).and_then(|&e| vocab.elements.get(e)) else {
            return false;
        };
        if !table.is_allowed(sym, lc.formal_charge(i), valencies[i]) {
            return false;
        }
    }
    let bridges: BTreeSet<(usize, usize)> = lc.bridge_bonds().into_iter().collect();
    lc.bonded_pairs()
        .into_iter()
        .all(|(i, j, class)| class != BondClass::Aromatic || !bridges.contains(&(i, j)))
}

/// Fraction of molecules valid under the built-in predicate (see
/// [`table_valid`]). Never errors; an empty set scores 0 with a warning.
pub fn validity(mols: &[Molecule], table: &ValencyTable, vocab: &DatasetVocabulary) -> f64 {
    if mols.is_empty() {
        log::warn!("validity of an empty molecule set is defined as 0");
        return 0.0;
    }
    let valid = mols.iter().filter(|m| table_valid(m, table, vocab)).count();
    valid as f64 / mols.len() as f64
}

/// Fraction of molecules forming exactly one connected component over
/// non-"none" bonds. A single-atom molecule is connected.
pub fn connected_fraction(mols: &[Molecule]) -> f64 {
    if mols.is_empty() {
        log::warn!("connectivity of an empty molecule set is defined as 0");
        return 0.0;
    }
    let connected = mols
        .iter()
        .filter(|m| m.connected_components().len() == 1)
        .count();
    connected as f64 / mols.len() as f64
}

// ---------------------------------------------------------------------------
// External sanitizer hook
// ---------------------------------------------------------------------------

/// Optional external validity oracle. The shell command receives the
/// molecules as an SDF stream on standard input and must print one verdict
/// line per record (`1`/`0`, `true`/`false`, `valid`/`invalid`, or `ok`).
/// The command must consume its whole input before emitting bulk output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalSanitizer {
    pub command: String,
}

impl ExternalSanitizer {
    pub fn new(command: impl Into<String>) -> Self {
        ExternalSanitizer { command: command.into() }
    }

    /// Run the subprocess over the set; returns one verdict per molecule.
    pub fn check(&self, mols: &[Molecule], vocab: &DatasetVocabulary) -> Result<Vec<bool>> {
        let input = sdf_to_string(mols, vocab, None)?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| EquimolError::io("external sanitizer", e))?;
        child
            .stdin
            .take()
            .expect("stdin was piped")
            .write_all(input.as_bytes())
            .map_err(|e| EquimolError::io("external sanitizer stdin", e))?;
        let output = child
            .wait_with_output()
            .map_err(|e| EquimolError::io("external sanitizer", e))?;
        if !output.status.success() {
            return Err(EquimolError::Contract(format!(
                "external sanitizer exited with {}",
                output.status
            )));
        }
        let text = String::from_utf8_lossy(&output.stdout);
        let verdicts: Vec<bool> = text
            .lines()
            .map(parse_verdict)
            .collect::<Result<_>>()?;
        if verdicts.len() != mols.len() {
            return Err(EquimolError::Contract(format!(
                "external sanitizer returned {} verdicts for {} molecules",
                verdicts.len(),
                mols.len()
            )));
        }
        Ok(verdicts)
    }
}

fn parse_verdict(line: &str) -> Result<bool> {
    match line.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "valid" | "ok" => Ok(true),
        "0" | "false" | "invalid" => Ok(false),
        other => Err(EquimolError::parse(
            "sanitizer verdict",
            "subprocess stdout",
            format!("unrecognized verdict '{other}'"),
        )),
    }
}

// ---------------------------------------------------------------------------
// Descriptors and KL similarity
// ---------------------------------------------------------------------------

fn bond_length(mol: &Molecule, i: usize, j: usize) -> f64 {
    (0..3)
        .map(|d| (mol.positions[[i, d]] - mol.positions[[j, d]]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// The fixed five-descriptor panel (see [`DESCRIPTOR_NAMES`]): molecular
/// weight, heavy-atom count, ring count (cyclomatic number), fraction of
/// atoms carrying an aromatic bond, and mean bond length (0 if bondless).
pub fn descriptor_panel(mol: &Molecule, vocab: &DatasetVocabulary) -> Result<[f64; 5]> {
    let n = mol.num_atoms();
    let mut weight = 0.0;
    let mut heavy = 0usize;
    for &e in &mol.elements {
        let sym = symbol(vocab, e)?;
        weight += atomic_mass(sym);
        if sym != "H" {
            heavy += 1;
        }
    }
    let pairs = mol.bonded_pairs();
    let rings =
        pairs.len() as f64 - n as f64 + mol.connected_components().len() as f64;
    let aromatic_atoms = (0..n)
        .filter(|&i| {
            (0..n).any(|j| j != i && mol.bonds[[i, j]] == BondClass::Aromatic as usize)
        })
        .count();
    let aromatic_fraction = if n == 0 { 0.0 } else { aromatic_atoms as f64 / n as f64 };
    let mean_length = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|&(i, j, _)| bond_length(mol, i, j)).sum::<f64>() / pairs.len() as f64
    };
    Ok([weight, heavy as f64, rings, aromatic_fraction, mean_length])
}

fn descriptor_samples(mols: &[Molecule], vocab: &DatasetVocabulary) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::with_capacity(mols.len()); DESCRIPTOR_NAMES.len()];
    for mol in mols {
        let panel = descriptor_panel(mol, vocab)?;
        for (d, &v) in panel.iter().enumerate() {
            out[d].push(v);
        }
    }
    Ok(out)
}

fn kl_similarity_from_samples(
    generated: &[Vec<f64>],
    reference: &[Vec<f64>],
) -> Result<Option<f64>> {
    if generated.iter().any(|d| d.is_empty()) || reference.iter().any(|d| d.is_empty()) {
        return Ok(None);
    }
    let mut total = 0.0;
    for (gen, refs) in generated.iter().zip(reference) {
        total += (-histogram_kl(gen, refs, KL_BINS, KL_SMOOTHING)?).exp();
    }
    Ok(Some(total / generated.len() as f64))
}

/// Mean over the descriptor panel of exp(−KL(generated‖reference)), each
/// KL taken between 50-bin Laplace-smoothed histograms over the reference
/// range. 1 means indistinguishable panels; absent when a set is empty.
pub fn kl_similarity(
    generated: &[Molecule],
    reference: &[Molecule],
    vocab: &DatasetVocabulary,
) -> Result<Option<f64>> {
    if generated.is_empty() || reference.is_empty() {
        return Ok(None);
    }
    kl_similarity_from_samples(
        &descriptor_samples(generated, vocab)?,
        &descriptor_samples(reference, vocab)?,
    )
}

// ---------------------------------------------------------------------------
// Marginals and grouped geometric samples
// ---------------------------------------------------------------------------

fn atom_marginals(mols: &[Molecule], n_elements: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_elements];
    for mol in mols {
        for &e in &mol.elements {
            *counts.get_mut(e).ok_or_else(|| {
                EquimolError::Contract(format!("element class {e} outside the vocabulary"))
            })? += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(EquimolError::Config(
            "molecule set has no atoms; marginals undefined".into(),
        ));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Bond-class marginal over all unordered atom pairs, "none" included:
/// the bond modality treats absence as a first-class category.
fn bond_pair_marginals(mols: &[Molecule]) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; BondClass::COUNT];
    for mol in mols {
        let n = mol.num_atoms();
        for i in 0..n {
            for j in (i + 1)..n {
                let b = mol.bonds[[i, j]];
                *counts.get_mut(b).ok_or_else(|| {
                    EquimolError::Contract(format!("bond class {b} out of range"))
                })? += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(EquimolError::Config(
            "molecule set has no atom pairs; bond marginals undefined".into(),
        ));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

fn valencies_by_element(mols: &[Molecule], n_elements: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); n_elements];
    for mol in mols {
        let valencies = mol.atom_valencies();
        for (i, &e) in mol.elements.iter().enumerate() {
            out.get_mut(e)
                .ok_or_else(|| {
                    EquimolError::Contract(format!("element class {e} outside the vocabulary"))
                })?
                .push(valencies[i]);
        }
    }
    Ok(out)
}

fn lengths_by_class(mols: &[Molecule]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); BondClass::COUNT];
    for mol in mols {
        for (i, j, class) in mol.bonded_pairs() {
            out[class as usize].push(bond_length(mol, i, j));
        }
    }
    out
}

fn angle_degrees(mol: &Molecule, center: usize, j: usize, k: usize) -> f64 {
    let arm = |a: usize| {
        [
            mol.positions[[a, 0]] - mol.positions[[center, 0]],
            mol.positions[[a, 1]] - mol.positions[[center, 1]],
            mol.positions[[a, 2]] - mol.positions[[center, 2]],
        ]
    };
    let u = arm(j);
    let v = arm(k);
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot / (nu * nv)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// All bond angles, grouped by the central atom's element: for every atom
/// with ≥2 bonded neighbors, every unordered neighbor pair contributes the
/// angle between the two arms, in degrees.
fn angles_by_element(mols: &[Molecule], n_elements: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); n_elements];
    for mol in mols {
        let n = mol.num_atoms();
        for i in 0..n {
            let nbrs: Vec<usize> =
                (0..n).filter(|&j| j != i && mol.bonds[[i, j]] != 0).collect();
            if nbrs.len() < 2 {
                continue;
            }
            let e = mol.elements[i];
            let bucket = out.get_mut(e).ok_or_else(|| {
                EquimolError::Contract(format!("element class {e} outside the vocabulary"))
            })?;
            for a in 0..nbrs.len() {
                for b in (a + 1)..nbrs.len() {
                    bucket.push(angle_degrees(mol, i, nbrs[a], nbrs[b]));
                }
            }
        }
    }
    Ok(out)
}

/// Counts of angle-qualifying central atoms (≥2 neighbors) per element.
fn angle_center_counts(mols: &[Molecule], n_elements: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; n_elements];
    for mol in mols {
        let n = mol.num_atoms();
        for i in 0..n {
            let degree = (0..n).filter(|&j| j != i && mol.bonds[[i, j]] != 0).count();
            if degree >= 2 {
                *counts.get_mut(mol.elements[i]).ok_or_else(|| {
                    EquimolError::Contract(format!(
                        "element class {} outside the vocabulary",
                        mol.elements[i]
                    ))
                })? += 1.0;
            }
        }
    }
    Ok(counts)
}

fn normalized_or_zeros(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter().map(|&c| c / total).collect()
    } else {
        vec![0.0; counts.len()]
    }
}

// ---------------------------------------------------------------------------
// Weighted Wasserstein-1 aggregates
// ---------------------------------------------------------------------------

/// A weighted mean of per-class W₁ terms. Classes where either side has no
/// samples are skipped; the remaining weights are renormalized so the value
/// stays a mean of distances, and the skipped mass is reported alongside.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightedW1 {
    pub value: Option<f64>,
    pub skipped_weight: f64,
}

fn weighted_w1<'a>(groups: impl Iterator<Item = (f64, &'a [f64], &'a [f64])>) -> WeightedW1 {
    let mut acc = 0.0;
    let mut used = 0.0;
    let mut skipped = 0.0;
    for (w, gen, refs) in groups {
        if w <= 0.0 {
            continue;
        }
        match wasserstein1_1d(gen, refs) {
            Some(d) => {
                acc += w * d;
                used += w;
            }
            None => skipped += w,
        }
    }
    WeightedW1 {
        value: if used > 0.0 { Some(acc / used) } else { None },
        skipped_weight: skipped,
    }
}

/// Per-element W₁ between valency distributions, weighted by `weights`
/// (training atom marginals, indexed by element class).
pub fn valency_w1(
    generated: &[Molecule],
    reference: &[Molecule],
    weights: &[f64],
) -> Result<WeightedW1> {
    let gen = valencies_by_element(generated, weights.len())?;
    let refs = valencies_by_element(reference, weights.len())?;
    Ok(weighted_w1(
        (0..weights.len()).map(|e| (weights[e], gen[e].as_slice(), refs[e].as_slice())),
    ))
}

/// Per-bond-class W₁ between Euclidean bond-length distributions, weighted
/// by `weights` (training bond-type proportions, indexed by bond class;
/// entry 0 — "none" — carries no geometry and should be zero).
pub fn bond_lengths_w1(
    generated: &[Molecule],
    reference: &[Molecule],
    weights: &[f64],
) -> Result<WeightedW1> {
    if weights.len() != BondClass::COUNT {
        return Err(EquimolError::Contract(format!(
            "expected {} bond-class weights, got {}",
            BondClass::COUNT,
            weights.len()
        )));
    }
    let gen = lengths_by_class(generated);
    let refs = lengths_by_class(reference);
    Ok(weighted_w1(
        (1..BondClass::COUNT).map(|c| (weights[c], gen[c].as_slice(), refs[c].as_slice())),
    ))
}

/// Per-central-element W₁ between bond-angle distributions (degrees),
/// weighted by `weights` (proportions among atoms with ≥2 neighbors).
pub fn bond_angles_w1(
    generated: &[Molecule],
    reference: &[Molecule],
    weights: &[f64],
) -> Result<WeightedW1> {
    let gen = angles_by_element(generated, weights.len())?;
    let refs = angles_by_element(reference, weights.len())?;
    Ok(weighted_w1(
        (0..weights.len()).map(|e| (weights[e], gen[e].as_slice(), refs[e].as_slice())),
    ))
}

// ---------------------------------------------------------------------------
// Reference statistics and the full evaluation
// ---------------------------------------------------------------------------

/// Everything the evaluation needs from the reference (training) set,
/// computed once: marginals (which double as W₁ weights), grouped
/// geometric samples, descriptor samples, canonical forms, fingerprints.
#[derive(Debug, Clone)]
pub struct ReferenceStats {
    pub n_molecules: usize,
    /// Element-class marginal over all atoms; also the valency-W₁ weights.
    pub atom_marginals: Vec<f64>,
    /// Bond-class marginal over all unordered pairs, "none" included.
    pub bond_marginals: Vec<f64>,
    /// Bond-class proportions among real bonds; weight 0 for "none".
    pub bond_type_weights: Vec<f64>,
    /// Element proportions among angle-qualifying atoms (≥2 neighbors).
    pub angle_element_weights: Vec<f64>,
    pub valencies_by_element: Vec<Vec<f64>>,
    pub lengths_by_class: Vec<Vec<f64>>,
    pub angles_by_element: Vec<Vec<f64>>,
    /// Descriptor panel samples, one vector per descriptor.
    pub descriptors: Vec<Vec<f64>>,
    pub canonical_forms: BTreeSet<String>,
    pub fingerprints: Vec<Fingerprint>,
}

impl ReferenceStats {
    pub fn from_molecules(mols: &[Molecule], vocab: &DatasetVocabulary) -> Result<Self> {
        if mols.is_empty() {
            return Err(EquimolError::Config("reference set is empty".into()));
        }
        let ne = vocab.n_elements();
        let lengths = lengths_by_class(mols);
        let mut bond_counts = vec![0.0; BondClass::COUNT];
        for (c, group) in lengths.iter().enumerate().skip(1) {
            bond_counts[c] = group.len() as f64;
        }
        let mut canonical_forms = BTreeSet::new();
        for mol in mols {
            canonical_forms.insert(canonical_serialization(mol, vocab)?);
        }
        Ok(ReferenceStats {
            n_molecules: mols.len(),
            atom_marginals: atom_marginals(mols, ne)?,
            bond_marginals: bond_pair_marginals(mols)?,
            bond_type_weights: normalized_or_zeros(&bond_counts),
            angle_element_weights: normalized_or_zeros(&angle_center_counts(mols, ne)?),
            valencies_by_element: valencies_by_element(mols, ne)?,
            lengths_by_class: lengths,
            angles_by_element: angles_by_element(mols, ne)?,
            descriptors: descriptor_samples(mols, vocab)?,
            canonical_forms,
            fingerprints: mols
                .iter()
                .map(|m| path_fingerprint(m, vocab))
                .collect::<Result<_>>()?,
        })
    }
}

/// The full evaluation summary. Fractions live in [0, 1]; distances are
/// non-negative. `Option` fields are absent when their metric is undefined
/// on the given inputs (empty groups, too few molecules, all terms skipped).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub n_generated: usize,
    pub n_reference: usize,
    pub atom_stability: f64,
    pub mol_stability: f64,
    pub validity: f64,
    /// Which validity predicate produced `validity`.
    pub validity_predicate: String,
    pub connected_components: f64,
    pub uniqueness: Option<f64>,
    pub novelty: Option<f64>,
    pub canonicalization_failures: usize,
    pub diversity: Option<f64>,
    pub train_similarity: Option<f64>,
    pub kl_divergence_similarity: Option<f64>,
    pub atoms_tv: f64,
    pub bonds_tv: f64,
    pub valency_w1: Option<f64>,
    pub valency_w1_skipped_weight: f64,
    pub bond_lengths_w1: Option<f64>,
    pub bond_lengths_w1_skipped_weight: f64,
    pub bond_angles_w1: Option<f64>,
    pub bond_angles_w1_skipped_weight: f64,
}

impl MetricsReport {
    /// Range checks: fractions in [0, 1], TVs in [0, 2], distances ≥ 0.
    pub fn validate(&self) -> Result<()> {
        let fraction = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(EquimolError::Contract(format!(
                    "{name} = {v} outside [0, 1]"
                )));
            }
            Ok(())
        };
        fraction("atom_stability", self.atom_stability)?;
        fraction("mol_stability", self.mol_stability)?;
        fraction("validity", self.validity)?;
        fraction("connected_components", self.connected_components)?;
        for (name, v) in [
            ("uniqueness", self.uniqueness),
            ("novelty", self.novelty),
            ("diversity", self.diversity),
            ("train_similarity", self.train_similarity),
            ("kl_divergence_similarity", self.kl_divergence_similarity),
        ] {
            if let Some(v) = v {
                fraction(name, v)?;
            }
        }
        for (name, v) in [("atoms_tv", self.atoms_tv), ("bonds_tv", self.bonds_tv)] {
            if !(0.0..=2.0).contains(&v) {
                return Err(EquimolError::Contract(format!(
                    "{name} = {v} outside [0, 2]"
                )));
            }
        }
        for (name, v) in [
            ("valency_w1", self.valency_w1),
            ("bond_lengths_w1", self.bond_lengths_w1),
            ("bond_angles_w1", self.bond_angles_w1),
        ] {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    return Err(EquimolError::Contract(format!(
                        "{name} = {v} is not a non-negative real"
                    )));
                }
            }
        }
        for (name, v) in [
            ("valency_w1_skipped_weight", self.valency_w1_skipped_weight),
            ("bond_lengths_w1_skipped_weight", self.bond_lengths_w1_skipped_weight),
            ("bond_angles_w1_skipped_weight", self.bond_angles_w1_skipped_weight),
        ] {
            if !(0.0..=1.0 + 1e-12).contains(&v) {
                return Err(EquimolError::Contract(format!(
                    "{name} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Evaluate a generated set against reference statistics. The vocabulary
/// must be the one the statistics were built with. When `sanitizer` is
/// given it replaces the built-in validity predicate and the report records
/// the command; everything else is unaffected.
pub fn evaluate_set(
    generated: &[Molecule],
    stats: &ReferenceStats,
    table: &ValencyTable,
    vocab: &DatasetVocabulary,
    sanitizer: Option<&ExternalSanitizer>,
) -> Result<MetricsReport> {
    if generated.is_empty() {
        return Err(EquimolError::Config("generated set is empty".into()));
    }
    let ne = vocab.n_elements();
    if stats.atom_marginals.len() != ne {
        return Err(EquimolError::Contract(format!(
            "reference statistics cover {} element classes but the vocabulary has {}",
            stats.atom_marginals.len(),
            ne
        )));
    }

    let (atom_stability, mol_stability) = stability(generated, table, vocab)?;
    let (validity_frac, validity_predicate) = match sanitizer {
        Some(s) => {
            let verdicts = s.check(generated, vocab)?;
            let valid = verdicts.iter().filter(|&&v| v).count();
            (
                valid as f64 / verdicts.len() as f64,
                format!("external:{}", s.command),
            )
        }
        None => (validity(generated, table, vocab), TABLE_PREDICATE.to_string()),
    };
    let nu = novelty_uniqueness(generated, &stats.canonical_forms, vocab);

    let gen_valencies = valencies_by_element(generated, ne)?;
    let val_w1 = weighted_w1((0..ne).map(|e| {
        (
            stats.atom_marginals[e],
            gen_valencies[e].as_slice(),
            stats.valencies_by_element[e].as_slice(),
        )
    }));
    let gen_lengths = lengths_by_class(generated);
    let len_w1 = weighted_w1((1..BondClass::COUNT).map(|c| {
        (
            stats.bond_type_weights[c],
            gen_lengths[c].as_slice(),
            stats.lengths_by_class[c].as_slice(),
        )
    }));
    let gen_angles = angles_by_element(generated, ne)?;
    let ang_w1 = weighted_w1((0..ne).map(|e| {
        (
            stats.angle_element_weights[e],
            gen_angles[e].as_slice(),
            stats.angles_by_element[e].as_slice(),
        )
    }));

    let report = MetricsReport {
        n_generated: generated.len(),
        n_reference: stats.n_molecules,
        atom_stability,
        mol_stability,
        validity: validity_frac,
        validity_predicate,
        connected_components: connected_fraction(generated),
        uniqueness: nu.uniqueness,
        novelty: nu.novelty,
        canonicalization_failures: nu.failures,
        diversity: diversity(generated, vocab)?,
        train_similarity: train_similarity(generated, &stats.fingerprints, vocab)?,
        kl_divergence_similarity: kl_similarity_from_samples(
            &descriptor_samples(generated, vocab)?,
            &stats.descriptors,
        )?,
        atoms_tv: tv_distance(&atom_marginals(generated, ne)?, &stats.atom_marginals),
        bonds_tv: tv_distance(&bond_pair_marginals(generated)?, &stats.bond_marginals),
        valency_w1: val_w1.value,
        valency_w1_skipped_weight: val_w1.skipped_weight,
        bond_lengths_w1: len_w1.value,
        bond_lengths_w1_skipped_weight: len_w1.skipped_weight,
        bond_angles_w1: ang_w1.value,
        bond_angles_w1_skipped_weight: ang_w1.skipped_weight,
    };
    report.validate()?;
    Ok(report)
}
