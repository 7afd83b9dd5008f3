//! Molecules as typed graphs.
//!
//! A [`Molecule`] couples per-atom categorical state (element, formal charge,
//! optional extra features) with 3D coordinates and a dense symmetric bond
//! matrix. Categorical state is stored as class indices; the mapping from
//! indices to element symbols lives in a [`DatasetVocabulary`] so the same
//! struct serves datasets with different element sets.

mod sdf;
mod valency;
mod xyz;

pub use sdf::{
    parse_sdf_str, parse_sdf_str_lenient, read_sdf, read_sdf_lenient, sdf_to_string, write_sdf,
    SdfReadOutcome, SdfRecordMeta,
};
pub use valency::ValencyTable;
pub use xyz::{parse_xyz_str, read_xyz};

use crate::{EquimolError, Result};
use ndarray::Array2;

/// Formal charge classes supported by the charge modality, in class order.
pub const CHARGE_CLASSES: [i32; 6] = [-2, -1, 0, 1, 2, 3];

/// Class index of formal charge 0.
pub const NEUTRAL_CHARGE_CLASS: usize = 2;

/// Bond classes, in class order. `None` (index 0) means "no bond" and is a
/// first-class category: the bond modality diffuses over all five classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondClass {
    None = 0,
    Single = 1,
    Double = 2,
    Triple = 3,
    Aromatic = 4,
}

impl BondClass {
    /// Number of bond classes.
    pub const COUNT: usize = 5;

    /// Class from its index. Errors on out-of-range values.
    pub fn from_index(i: usize) -> Result<Self> {
        Ok(match i {
            0 => BondClass::None,
            1 => BondClass::Single,
            2 => BondClass::Double,
            3 => BondClass::Triple,
            4 => BondClass::Aromatic,
            _ => {
                return Err(EquimolError::Contract(format!(
                    "bond class index {i} out of range (0..{})",
                    Self::COUNT
                )))
            }
        })
    }

    /// Contribution of this bond to the valency of each endpoint.
    /// Aromatic bonds count 1.5.
    pub fn order(self) -> f64 {
        match self {
            BondClass::None => 0.0,
            BondClass::Single => 1.0,
            BondClass::Double => 2.0,
            BondClass::Triple => 3.0,
            BondClass::Aromatic => 1.5,
        }
    }
}

/// Hybridization class labels used when extra atom features are enabled.
pub const DEFAULT_HYBRIDIZATIONS: [&str; 4] = ["s", "sp", "sp2", "sp3"];

/// Optional per-atom features carried alongside element and charge.
/// Each field is a categorical modality of its own when enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomExtras {
    pub is_aromatic: Vec<bool>,
    pub in_ring: Vec<bool>,
    /// Indices into the vocabulary's hybridization list.
    pub hybridization: Vec<usize>,
}

/// Maps categorical class indices to names for one dataset.
///
/// Charge classes are fixed ([`CHARGE_CLASSES`]); element and hybridization
/// sets vary per dataset and are pinned here. Order matters: it defines the
/// one-hot layout of every model input and checkpoint.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetVocabulary {
    pub elements: Vec<String>,
    pub hybridizations: Vec<String>,
}

impl DatasetVocabulary {
    pub fn new(elements: Vec<String>) -> Self {
        DatasetVocabulary {
            elements,
            hybridizations: DEFAULT_HYBRIDIZATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Index of an element symbol, if present.
    pub fn element_index(&self, symbol: &str) -> Option<usize> {
        self.elements.iter().position(|e| e == symbol)
    }

    /// Class index for a formal charge, if representable.
    pub fn charge_class(charge: i32) -> Option<usize> {
        CHARGE_CLASSES.iter().position(|&c| c == charge)
    }

    /// True when `other` extends this vocabulary: every class of `self`
    /// appears in `other` (not necessarily at the same index).
    pub fn is_subset_of(&self, other: &DatasetVocabulary) -> bool {
        self.elements.iter().all(|e| other.element_index(e).is_some())
            && self
                .hybridizations
                .iter()
                .all(|h| other.hybridizations.iter().any(|o| o == h))
    }
}

/// A molecule: atoms with categorical state, coordinates, and a dense
/// symmetric bond-class matrix with an all-`None` diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    /// Element class indices into a [`DatasetVocabulary`].
    pub elements: Vec<usize>,
    /// Charge class indices into [`CHARGE_CLASSES`].
    pub charges: Vec<usize>,
    /// Coordinates in angstroms, shape [n_atoms, 3].
    pub positions: Array2<f64>,
    /// Bond class indices, shape [n_atoms, n_atoms]; symmetric, zero diagonal.
    pub bonds: Array2<usize>,
    /// Extra per-atom features, present only when the run uses them.
    pub extras: Option<AtomExtras>,
}

impl Molecule {
    /// A bond-free molecule from per-atom state. Bonds start all-`None`.
    pub fn new(elements: Vec<usize>, charges: Vec<usize>, positions: Array2<f64>) -> Result<Self> {
        let n = elements.len();
        if charges.len() != n || positions.nrows() != n || positions.ncols() != 3 {
            return Err(EquimolError::Contract(format!(
                "inconsistent molecule arrays: {} elements, {} charges, positions {:?}",
                n,
                charges.len(),
                positions.dim()
            )));
        }
        Ok(Molecule {
            elements,
            charges,
            positions,
            bonds: Array2::zeros((n, n)),
            extras: None,
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.elements.len()
    }

    /// Bond class between two atoms.
    pub fn bond(&self, i: usize, j: usize) -> BondClass {
        BondClass::from_index(self.bonds[[i, j]]).expect("bond matrix holds valid classes")
    }

    /// Set a bond symmetrically. The diagonal is rejected.
    pub fn set_bond(&mut self, i: usize, j: usize, class: BondClass) -> Result<()> {
        if i == j {
            return Err(EquimolError::Contract(format!(
                "self-bond on atom {i} is not representable"
            )));
        }
        self.bonds[[i, j]] = class as usize;
        self.bonds[[j, i]] = class as usize;
        Ok(())
    }

    /// Full structural validation against a vocabulary: index ranges, bond
    /// matrix symmetry, zero diagonal, extras consistency.
    pub fn validate(&self, vocab: &DatasetVocabulary) -> Result<()> {
        let n = self.num_atoms();
        if self.charges.len() != n || self.positions.nrows() != n || self.bonds.dim() != (n, n) {
            return Err(EquimolError::Contract(
                "molecule arrays disagree on atom count".into(),
            ));
        }
        for (i, &e) in self.elements.iter().enumerate() {
            if e >= vocab.n_elements() {
                return Err(EquimolError::Contract(format!(
                    "atom {i}: element class {e} outside vocabulary of {}",
                    vocab.n_elements()
                )));
            }
        }
        for (i, &c) in self.charges.iter().enumerate() {
            if c >= CHARGE_CLASSES.len() {
                return Err(EquimolError::Contract(format!(
                    "atom {i}: charge class {c} outside {} classes",
                    CHARGE_CLASSES.len()
                )));
            }
        }
        for i in 0..n {
            if self.bonds[[i, i]] != 0 {
                return Err(EquimolError::Contract(format!(
                    "bond matrix has non-empty diagonal at atom {i}"
                )));
            }
            for j in 0..n {
                let b = self.bonds[[i, j]];
                if b >= BondClass::COUNT {
                    return Err(EquimolError::Contract(format!(
                        "bond class {b} at ({i},{j}) out of range"
                    )));
                }
                if self.bonds[[i, j]] != self.bonds[[j, i]] {
                    return Err(EquimolError::Contract(format!(
                        "bond matrix asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        if !self.positions.iter().all(|v| v.is_finite()) {
            return Err(EquimolError::Contract("non-finite coordinates".into()));
        }
        if let Some(extras) = &self.extras {
            if extras.is_aromatic.len() != n
                || extras.in_ring.len() != n
                || extras.hybridization.len() != n
            {
                return Err(EquimolError::Contract(
                    "extra features disagree on atom count".into(),
                ));
            }
            for (i, &h) in extras.hybridization.iter().enumerate() {
                if h >= vocab.hybridizations.len() {
                    return Err(EquimolError::Contract(format!(
                        "atom {i}: hybridization class {h} outside vocabulary"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Centroid of the coordinates.
    pub fn centroid(&self) -> [f64; 3] {
        let n = self.num_atoms().max(1) as f64;
        let mut c = [0.0; 3];
        for row in self.positions.rows() {
            for (k, ck) in c.iter_mut().enumerate() {
                *ck += row[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Translate coordinates so their mean is the origin.
    pub fn center_positions(&mut self) {
        let c = self.centroid();
        for mut row in self.positions.rows_mut() {
            for k in 0..3 {
                row[k] -= c[k];
            }
        }
    }

    /// Per-atom valency: sum of bond orders over incident bonds, with
    /// aromatic bonds contributing 1.5.
    pub fn atom_valencies(&self) -> Vec<f64> {
        let n = self.num_atoms();
        (0..n)
            .map(|i| (0..n).map(|j| self.bond(i, j).order()).sum())
            .collect()
    }

    /// Formal charge (in electrons) of an atom, decoded from its class.
    pub fn formal_charge(&self, i: usize) -> i32 {
        CHARGE_CLASSES[self.charges[i]]
    }

    /// Connected components over non-`None` bonds, each a sorted list of
    /// atom indices. Components are ordered by their smallest member.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let n = self.num_atoms();
        let mut seen = vec![false; n];
        let mut comps = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    if !seen[j] && self.bonds[[i, j]] != 0 {
                        seen[j] = true;
                        comp.push(j);
                        stack.push(j);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    /// The sub-molecule induced by a set of atom indices (sorted order).
    pub fn induced_subgraph(&self, atoms: &[usize]) -> Molecule {
        let mut idx: Vec<usize> = atoms.to_vec();
        idx.sort_unstable();
        let n = idx.len();
        let mut positions = Array2::zeros((n, 3));
        for (r, &a) in idx.iter().enumerate() {
            positions.row_mut(r).assign(&self.positions.row(a));
        }
        let mut bonds = Array2::zeros((n, n));
        for (r, &a) in idx.iter().enumerate() {
            for (c, &b) in idx.iter().enumerate() {
                bonds[[r, c]] = self.bonds[[a, b]];
            }
        }
        Molecule {
            elements: idx.iter().map(|&a| self.elements[a]).collect(),
            charges: idx.iter().map(|&a| self.charges[a]).collect(),
            positions,
            bonds,
            extras: self.extras.as_ref().map(|e| AtomExtras {
                is_aromatic: idx.iter().map(|&a| e.is_aromatic[a]).collect(),
                in_ring: idx.iter().map(|&a| e.in_ring[a]).collect(),
                hybridization: idx.iter().map(|&a| e.hybridization[a]).collect(),
            }),
        }
    }

    /// The largest connected component as its own molecule (ties broken by
    /// smallest first atom index).
    pub fn largest_component(&self) -> Molecule {
        let comps = self.connected_components();
        let best = comps
            .iter()
            .max_by_key(|c| (c.len(), std::cmp::Reverse(c[0])))
            .cloned()
            .unwrap_or_default();
        self.induced_subgraph(&best)
    }

    /// Copy of this molecule with all hydrogens removed (element symbol "H"
    /// in `vocab`). Bonds between remaining atoms are preserved.
    pub fn remove_hydrogens(&self, vocab: &DatasetVocabulary) -> Molecule {
        match vocab.element_index("H") {
            None => self.clone(),
            Some(h) => {
                let keep: Vec<usize> = (0..self.num_atoms())
                    .filter(|&i| self.elements[i] != h)
                    .collect();
                self.induced_subgraph(&keep)
            }
        }
    }

    /// Atom pairs i < j that share a non-`None` bond.
    pub fn bonded_pairs(&self) -> Vec<(usize, usize, BondClass)> {
        let n = self.num_atoms();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let b = self.bond(i, j);
                if b != BondClass::None {
                    out.push((i, j, b));
                }
            }
        }
        out
    }

    /// Bridge bonds: bonds whose removal disconnects their component, i.e.
    /// bonds not on any cycle. Pairs are returned as (min, max), sorted.
    pub fn bridge_bonds(&self) -> Vec<(usize, usize)> {
        let n = self.num_atoms();
        let adj: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| self.bonds[[i, j]] != 0).collect())
            .collect();
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0usize; n];
        let mut timer = 0usize;
        let mut bridges = Vec::new();
        for root in 0..n {
            if disc[root] != usize::MAX {
                continue;
            }
            disc[root] = timer;
            low[root] = timer;
            timer += 1;
            // (node, parent, next neighbour index)
            let mut stack: Vec<(usize, usize, usize)> = vec![(root, usize::MAX, 0)];
            while let Some(top) = stack.last_mut() {
                let (u, parent) = (top.0, top.1);
                if top.2 < adj[u].len() {
                    let v = adj[u][top.2];
                    top.2 += 1;
                    if v == parent {
                        continue; // simple graph: single edge back to parent
                    }
                    if disc[v] == usize::MAX {
                        disc[v] = timer;
                        low[v] = timer;
                        timer += 1;
                        stack.push((v, u, 0));
                    } else {
                        low[u] = low[u].min(disc[v]);
                    }
                } else {
                    stack.pop();
                    if let Some(p) = stack.last() {
                        let pu = p.0;
                        low[pu] = low[pu].min(low[u]);
                        if low[u] > disc[pu] {
                            bridges.push((pu.min(u), pu.max(u)));
                        }
                    }
                }
            }
        }
        bridges.sort_unstable();
        bridges
    }
}

/// Derive extra per-atom features from the graph itself.
///
/// * `is_aromatic`: atom has an incident aromatic bond.
/// * `in_ring`: atom has an incident bond that lies on a cycle.
/// * `hybridization`: structural label — "s" for hydrogen, "sp" with a
///   triple bond or two doubles, "sp2" with a double or aromatic bond,
///   "sp3" otherwise. Labels are resolved against `vocab.hybridizations`.
pub fn derive_extras(mol: &Molecule, vocab: &DatasetVocabulary) -> Result<AtomExtras> {
    let n = mol.num_atoms();
    let hyb_class = |label: &str| -> Result<usize> {
        vocab
            .hybridizations
            .iter()
            .position(|h| h == label)
            .ok_or_else(|| {
                EquimolError::Contract(format!(
                    "hybridization label '{label}' missing from vocabulary"
                ))
            })
    };
    let h_elem = vocab.element_index("H");
    let bridges: std::collections::BTreeSet<(usize, usize)> =
        mol.bridge_bonds().into_iter().collect();

    let mut is_aromatic = vec![false; n];
    let mut in_ring = vec![false; n];
    let mut hybridization = Vec::with_capacity(n);
    for i in 0..n {
        let mut doubles = 0;
        let mut triples = 0;
        let mut aromatic = false;
        for j in 0..n {
            match mol.bond(i, j) {
                BondClass::None => continue,
                b => {
                    match b {
                        BondClass::Double => doubles += 1,
                        BondClass::Triple => triples += 1,
                        BondClass::Aromatic => aromatic = true,
                        _ => {}
                    }
                    if !bridges.contains(&(i.min(j), i.max(j))) {
                        in_ring[i] = true;
                    }
                }
            }
        }
        is_aromatic[i] = aromatic;
        let label = if Some(mol.elements[i]) == h_elem {
            "s"
        } else if triples > 0 || doubles >= 2 {
            "sp"
        } else if doubles == 1 || aromatic {
            "sp2"
        } else {
            "sp3"
        };
        hybridization.push(hyb_class(label)?);
    }
    Ok(AtomExtras {
        is_aromatic,
        in_ring,
        hybridization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vocab() -> DatasetVocabulary {
        DatasetVocabulary::new(vec!["H".into(), "C".into(), "O".into()])
    }

    fn water() -> Molecule {
        // O at origin, two H at unit offsets; O is element 2, H is 0.
        let mut m = Molecule::new(
            vec![2, 0, 0],
            vec![NEUTRAL_CHARGE_CLASS; 3],
            array![[0.0, 0.0, 0.0], [0.96, 0.0, 0.0], [-0.24, 0.93, 0.0]],
        )
        .unwrap();
        m.set_bond(0, 1, BondClass::Single).unwrap();
        m.set_bond(0, 2, BondClass::Single).unwrap();
        m
    }

    #[test]
    fn bond_orders_match_classes() {
        assert_eq!(BondClass::None.order(), 0.0);
        assert_eq!(BondClass::Single.order(), 1.0);
        assert_eq!(BondClass::Double.order(), 2.0);
        assert_eq!(BondClass::Triple.order(), 3.0);
        assert_eq!(BondClass::Aromatic.order(), 1.5);
        assert!(BondClass::from_index(5).is_err());
    }

    #[test]
    fn valencies_sum_bond_orders() {
        let m = water();
        assert_eq!(m.atom_valencies(), vec![2.0, 1.0, 1.0]);

        // Aromatic ring: six carbons, each with two aromatic neighbours.
        let n = 6;
        let mut ring = Molecule::new(
            vec![1; n],
            vec![NEUTRAL_CHARGE_CLASS; n],
            Array2::zeros((n, 3)),
        )
        .unwrap();
        for i in 0..n {
            ring.set_bond(i, (i + 1) % n, BondClass::Aromatic).unwrap();
        }
        for v in ring.atom_valencies() {
            assert_eq!(v, 3.0);
        }
    }

    #[test]
    fn centering_zeroes_the_centroid() {
        let mut m = water();
        m.center_positions();
        let c = m.centroid();
        for k in 0..3 {
            assert!(c[k].abs() < 1e-12, "centroid component {k} = {}", c[k]);
        }
    }

    #[test]
    fn validation_rejects_malformed_graphs() {
        let v = vocab();
        let mut m = water();
        m.validate(&v).unwrap();

        m.bonds[[0, 1]] = 2; // break symmetry behind the API's back
        assert!(m.validate(&v).is_err());

        let mut m = water();
        m.elements[0] = 7;
        assert!(m.validate(&v).is_err());

        let mut m = water();
        m.bonds[[1, 1]] = 1;
        assert!(m.validate(&v).is_err());

        let mut m = water();
        m.positions[[0, 0]] = f64::NAN;
        assert!(m.validate(&v).is_err());
    }

    #[test]
    fn set_bond_rejects_diagonal() {
        let mut m = water();
        assert!(m.set_bond(1, 1, BondClass::Single).is_err());
    }

    #[test]
    fn components_and_largest() {
        // water + a lone unbonded H
        let mut m = Molecule::new(
            vec![2, 0, 0, 0],
            vec![NEUTRAL_CHARGE_CLASS; 4],
            Array2::zeros((4, 3)),
        )
        .unwrap();
        m.set_bond(0, 1, BondClass::Single).unwrap();
        m.set_bond(0, 2, BondClass::Single).unwrap();
        let comps = m.connected_components();
        assert_eq!(comps, vec![vec![0, 1, 2], vec![3]]);
        let big = m.largest_component();
        assert_eq!(big.num_atoms(), 3);
        assert_eq!(big.elements, vec![2, 0, 0]);
    }

    #[test]
    fn hydrogen_removal_keeps_heavy_bonds() {
        let v = vocab();
        // ethanol skeleton: C-C-O with hydrogens on each
        let mut m = Molecule::new(
            vec![1, 1, 2, 0, 0, 0],
            vec![NEUTRAL_CHARGE_CLASS; 6],
            Array2::zeros((6, 3)),
        )
        .unwrap();
        m.set_bond(0, 1, BondClass::Single).unwrap();
        m.set_bond(1, 2, BondClass::Single).unwrap();
        m.set_bond(0, 3, BondClass::Single).unwrap();
        m.set_bond(0, 4, BondClass::Single).unwrap();
        m.set_bond(2, 5, BondClass::Single).unwrap();
        let heavy = m.remove_hydrogens(&v);
        assert_eq!(heavy.num_atoms(), 3);
        assert_eq!(heavy.elements, vec![1, 1, 2]);
        assert_eq!(heavy.bond(0, 1), BondClass::Single);
        assert_eq!(heavy.bond(1, 2), BondClass::Single);
        assert_eq!(heavy.bond(0, 2), BondClass::None);
    }

    #[test]
    fn bridges_separate_rings_from_chains() {
        // cyclopropane with a methyl substituent: ring bonds are not
        // bridges, the substituent bond is.
        let mut m = Molecule::new(
            vec![1; 4],
            vec![NEUTRAL_CHARGE_CLASS; 4],
            Array2::zeros((4, 3)),
        )
        .unwrap();
        m.set_bond(0, 1, BondClass::Single).unwrap();
        m.set_bond(1, 2, BondClass::Single).unwrap();
        m.set_bond(2, 0, BondClass::Single).unwrap();
        m.set_bond(2, 3, BondClass::Single).unwrap();
        assert_eq!(m.bridge_bonds(), vec![(2, 3)]);

        // A pure chain is all bridges.
        let mut chain = Molecule::new(
            vec![1; 3],
            vec![NEUTRAL_CHARGE_CLASS; 3],
            Array2::zeros((3, 3)),
        )
        .unwrap();
        chain.set_bond(0, 1, BondClass::Single).unwrap();
        chain.set_bond(1, 2, BondClass::Single).unwrap();
        assert_eq!(chain.bridge_bonds(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn derived_extras_reflect_structure() {
        let v = vocab();
        // H2C=CH-OH style fragment: C(sp2)=C(sp2)-O(sp3), plus one H.
        let mut m = Molecule::new(
            vec![1, 1, 2, 0],
            vec![NEUTRAL_CHARGE_CLASS; 4],
            Array2::zeros((4, 3)),
        )
        .unwrap();
        m.set_bond(0, 1, BondClass::Double).unwrap();
        m.set_bond(1, 2, BondClass::Single).unwrap();
        m.set_bond(2, 3, BondClass::Single).unwrap();
        let e = derive_extras(&m, &v).unwrap();
        let label = |i: usize| v.hybridizations[e.hybridization[i]].clone();
        assert_eq!(label(0), "sp2");
        assert_eq!(label(1), "sp2");
        assert_eq!(label(2), "sp3");
        assert_eq!(label(3), "s");
        assert!(e.in_ring.iter().all(|&r| !r));
        assert!(e.is_aromatic.iter().all(|&a| !a));

        // Aromatic ring: every atom aromatic, in a ring, sp2.
        let mut ring = Molecule::new(
            vec![1; 6],
            vec![NEUTRAL_CHARGE_CLASS; 6],
            Array2::zeros((6, 3)),
        )
        .unwrap();
        for i in 0..6 {
            ring.set_bond(i, (i + 1) % 6, BondClass::Aromatic).unwrap();
        }
        let e = derive_extras(&ring, &v).unwrap();
        assert!(e.is_aromatic.iter().all(|&a| a));
        assert!(e.in_ring.iter().all(|&r| r));
        assert!(e
            .hybridization
            .iter()
            .all(|&h| v.hybridizations[h] == "sp2"));
    }

    #[test]
    fn vocabulary_lookups() {
        let v = vocab();
        assert_eq!(v.element_index("O"), Some(2));
        assert_eq!(v.element_index("Zn"), None);
        assert_eq!(DatasetVocabulary::charge_class(0), Some(2));
        assert_eq!(DatasetVocabulary::charge_class(-2), Some(0));
        assert_eq!(DatasetVocabulary::charge_class(4), None);
        let bigger = DatasetVocabulary::new(vec!["H".into(), "C".into(), "O".into(), "N".into()]);
        assert!(v.is_subset_of(&bigger));
        assert!(!bigger.is_subset_of(&v));
    }
}
