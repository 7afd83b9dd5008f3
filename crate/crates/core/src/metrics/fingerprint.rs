//! Hashed linear-path fingerprints and Tanimoto set similarity.
//!
//! Every simple bond path of up to [`MAX_PATH_BONDS`] bonds (including the
//! trivial single-atom path) is rendered as an element/bond-order string,
//! read in its lexicographically smaller direction, hashed, and folded into
//! a fixed 2048-bit set. Two molecules compare by the Tanimoto coefficient
//! of their bit-sets.

use crate::molgraph::{DatasetVocabulary, Molecule};
use crate::{EquimolError, Result};

/// Size of the fingerprint bit-set.
pub const FINGERPRINT_BITS: usize = 2048;
const WORDS: usize = FINGERPRINT_BITS / 64;

/// Longest path length, counted in bonds.
pub const MAX_PATH_BONDS: usize = 7;

/// A fixed-width bit-set fingerprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fingerprint {
    words: [u64; WORDS],
}

impl Fingerprint {
    pub fn empty() -> Self {
        Fingerprint { words: [0; WORDS] }
    }

    /// Build from explicit bit positions (used by tests and fixtures).
    pub fn from_bits(bits: &[usize]) -> Self {
        let mut fp = Self::empty();
        for &b in bits {
            fp.set(b % FINGERPRINT_BITS);
        }
        fp
    }

    fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1u64 << (bit % 64);
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    fn intersection_size(&self, other: &Self) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    fn union_size(&self, other: &Self) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones())
            .sum()
    }
}

/// Tanimoto similarity |A∩B| / |A∪B|; two empty sets count as identical.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> f64 {
    let union = a.union_size(b);
    if union == 0 {
        1.0
    } else {
        a.intersection_size(b) as f64 / union as f64
    }
}

/// 64-bit FNV-1a: stable across platforms and releases, unlike the standard
/// library's default hasher.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn bond_char(class: usize) -> u8 {
    match class {
        1 => b'-',
        2 => b'=',
        3 => b'#',
        4 => b':',
        _ => b'?',
    }
}

/// Hash every simple path of 0..=[`MAX_PATH_BONDS`] bonds into the bit-set.
pub fn path_fingerprint(mol: &Molecule, vocab: &DatasetVocabulary) -> Result<Fingerprint> {
    let n = mol.num_atoms();
    let symbols: Vec<&str> = mol
        .elements
        .iter()
        .map(|&e| {
            vocab
                .elements
                .get(e)
                .map(|s| s.as_str())
                .ok_or_else(|| {
                    EquimolError::Contract(format!("element class {e} outside the vocabulary"))
                })
        })
        .collect::<Result<_>>()?;
    let neighbors: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && mol.bonds[[i, j]] != 0)
                .map(|j| (j, mol.bonds[[i, j]]))
                .collect()
        })
        .collect();

    let mut fp = Fingerprint::empty();
    let mut emit = |forward: &[u8]| {
        let reversed: Vec<u8> = forward.iter().rev().copied().collect();
        let canonical = if forward <= reversed.as_slice() {
            forward
        } else {
            reversed.as_slice()
        };
        fp.set((fnv1a(canonical) % FINGERPRINT_BITS as u64) as usize);
    };

    // Depth-first over simple paths from every start atom. Each path is
    // seen from both ends; the canonical direction makes that harmless.
    let mut visited = vec![false; n];
    let mut label: Vec<u8> = Vec::new();
    for start in 0..n {
        visited[start] = true;
        label.extend_from_slice(symbols[start].as_bytes());
        emit(&label);
        // Stack of (atom, next neighbor list index, label length before it).
        let mut stack: Vec<(usize, usize, usize)> = vec![(start, 0, label.len())];
        while !stack.is_empty() {
            let depth = stack.len();
            let top = stack.last_mut().expect("loop guard");
            let (atom, idx) = (top.0, top.1);
            if idx < neighbors[atom].len() && depth <= MAX_PATH_BONDS {
                top.1 += 1;
                let (next, class) = neighbors[atom][idx];
                if visited[next] {
                    continue;
                }
                visited[next] = true;
                label.push(bond_char(class));
                label.extend_from_slice(symbols[next].as_bytes());
                emit(&label);
                stack.push((next, 0, label.len()));
            } else {
                let (atom, _, _) = stack.pop().unwrap();
                visited[atom] = false;
                if let Some(parent) = stack.last() {
                    label.truncate(parent.2);
                }
            }
        }
        label.clear();
    }
    Ok(fp)
}

/// Mean pairwise Tanimoto *distance* (1 − similarity) over all unordered
/// pairs. Undefined for fewer than two molecules.
pub fn diversity(mols: &[Molecule], vocab: &DatasetVocabulary) -> Result<Option<f64>> {
    if mols.len() < 2 {
        return Ok(None);
    }
    let fps: Vec<Fingerprint> = mols
        .iter()
        .map(|m| path_fingerprint(m, vocab))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..fps.len() {
        for j in (i + 1)..fps.len() {
            total += 1.0 - tanimoto(&fps[i], &fps[j]);
            pairs += 1;
        }
    }
    Ok(Some(total / pairs as f64))
}

/// Mean over generated molecules of their maximum Tanimoto similarity to
/// any reference fingerprint. `None` when either side is empty.
pub fn train_similarity(
    generated: &[Molecule],
    reference: &[Fingerprint],
    vocab: &DatasetVocabulary,
) -> Result<Option<f64>> {
    if generated.is_empty() || reference.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for mol in generated {
        let fp = path_fingerprint(mol, vocab)?;
        let best = reference
            .iter()
            .map(|r| tanimoto(&fp, r))
            .fold(0.0f64, f64::max);
        total += best;
    }
    Ok(Some(total / generated.len() as f64))
}
