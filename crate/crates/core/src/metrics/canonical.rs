//! Order-independent molecule serialization, uniqueness, and novelty.
//!
//! Identity is graph identity: two molecules serialize to the same string
//! exactly when an atom relabeling maps one onto the other preserving
//! elements, formal charges, and bond classes. Coordinates never enter.
//!
//! The string is built by iterative neighborhood color refinement followed
//! by a breadth-first relabeling from every candidate root, keeping the
//! lexicographically smallest rendering. Refinement colors resolve almost
//! all ties in chemical graphs; the residual tie-break by input index can
//! in principle distinguish refinement-equivalent but non-automorphic
//! atoms, a known limit of refinement-based canonicalization accepted here.

use std::collections::BTreeSet;

use crate::molgraph::{DatasetVocabulary, Molecule};
use crate::{EquimolError, Result};

/// Uniqueness/novelty summary for a generated set.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoveltyUniqueness {
    /// Distinct canonical forms over successfully canonicalized molecules.
    pub uniqueness: Option<f64>,
    /// Fraction of the distinct forms absent from the training set.
    pub novelty: Option<f64>,
    /// Molecules whose canonicalization failed; excluded from both ratios.
    pub failures: usize,
}

/// Stable dense colors from iterative neighborhood refinement.
///
/// Starts from (element, charge, degree) and repeatedly splits classes by
/// the multiset of (bond class, neighbor color) pairs until the partition
/// stops refining. Colors are dense and assigned in sorted key order, so
/// they depend only on the labeled graph, not on atom numbering.
fn refine_colors(mol: &Molecule) -> Vec<usize> {
    let n = mol.num_atoms();
    let neighbors: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && mol.bonds[[i, j]] != 0)
                .map(|j| (mol.bonds[[i, j]], j))
                .collect()
        })
        .collect();

    let assign = |keys: &[Vec<usize>]| -> (Vec<usize>, usize) {
        let distinct: BTreeSet<&Vec<usize>> = keys.iter().collect();
        let table: Vec<&Vec<usize>> = distinct.into_iter().collect();
        let colors = keys
            .iter()
            .map(|k| table.binary_search(&k).expect("key came from the table"))
            .collect();
        (colors, table.len())
    };

    let init: Vec<Vec<usize>> = (0..n)
        .map(|i| vec![mol.elements[i], mol.charges[i], neighbors[i].len()])
        .collect();
    let (mut colors, mut n_colors) = assign(&init);

    for _ in 0..n {
        let keys: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut pairs: Vec<(usize, usize)> =
                    neighbors[i].iter().map(|&(b, j)| (b, colors[j])).collect();
                pairs.sort_unstable();
                let mut k = vec![colors[i]];
                k.extend(pairs.into_iter().flat_map(|(b, c)| [b, c]));
                k
            })
            .collect();
        let (next, next_count) = assign(&keys);
        if next_count == n_colors {
            break;
        }
        colors = next;
        n_colors = next_count;
    }
    colors
}

/// Serialize one connected component, rooted at `root`, as atoms in
/// breadth-first canonical order plus sorted edges.
fn component_string(
    mol: &Molecule,
    vocab: &DatasetVocabulary,
    colors: &[usize],
    root: usize,
) -> Result<String> {
    let n = mol.num_atoms();
    let mut canon = vec![usize::MAX; n];
    let mut order: Vec<usize> = Vec::new();
    canon[root] = 0;
    order.push(root);
    let mut head = 0;
    while head < order.len() {
        let atom = order[head];
        head += 1;
        let mut next: Vec<(usize, usize, usize)> = (0..n)
            .filter(|&j| j != atom && mol.bonds[[atom, j]] != 0 && canon[j] == usize::MAX)
            .map(|j| (colors[j], mol.bonds[[atom, j]], j))
            .collect();
        next.sort_unstable();
        for (_, _, j) in next {
            canon[j] = order.len();
            order.push(j);
        }
    }

    let mut atoms: Vec<String> = Vec::with_capacity(order.len());
    for &a in &order {
        let sym = vocab.elements.get(mol.elements[a]).ok_or_else(|| {
            EquimolError::Contract(format!(
                "element class {} outside the vocabulary",
                mol.elements[a]
            ))
        })?;
        atoms.push(format!("{}{:+}", sym, mol.formal_charge(a)));
    }
    let mut edges: Vec<(usize, usize, usize)> = Vec::new();
    for &a in &order {
        for &b in &order {
            if canon[a] < canon[b] && mol.bonds[[a, b]] != 0 {
                edges.push((canon[a], canon[b], mol.bonds[[a, b]]));
            }
        }
    }
    edges.sort_unstable();
    let edge_str: Vec<String> = edges
        .iter()
        .map(|(i, j, c)| format!("{i}-{j}:{c}"))
        .collect();
    Ok(format!("{};{}", atoms.join(","), edge_str.join(",")))
}

/// Canonical string for a molecule: per-component lexicographic-minimum
/// breadth-first serializations, sorted and joined with '.'.
pub fn canonical_serialization(mol: &Molecule, vocab: &DatasetVocabulary) -> Result<String> {
    let colors = refine_colors(mol);
    let mut parts: Vec<String> = Vec::new();
    for component in mol.connected_components() {
        // Roots limited to the smallest color class present in the
        // component: every minimum-color atom is a candidate start.
        let best_color = component.iter().map(|&a| colors[a]).min().expect("non-empty");
        let mut best: Option<String> = None;
        for &root in component.iter().filter(|&&a| colors[a] == best_color) {
            let s = component_string(mol, vocab, &colors, root)?;
            if best.as_ref().is_none_or(|b| s < *b) {
                best = Some(s);
            }
        }
        parts.push(best.expect("component has at least one atom"));
    }
    parts.sort_unstable();
    Ok(parts.join("."))
}

/// Uniqueness and novelty of a generated set against training canonical
/// forms. Molecules that fail to canonicalize are dropped from both ratios
/// and counted in `failures`.
pub fn novelty_uniqueness(
    generated: &[Molecule],
    train: &BTreeSet<String>,
    vocab: &DatasetVocabulary,
) -> NoveltyUniqueness {
    let mut failures = 0usize;
    let mut succeeded = 0usize;
    let mut distinct: BTreeSet<String> = BTreeSet::new();
    for mol in generated {
        match canonical_serialization(mol, vocab) {
            Ok(s) => {
                succeeded += 1;
                distinct.insert(s);
            }
            Err(_) => failures += 1,
        }
    }
    if succeeded == 0 {
        return NoveltyUniqueness { uniqueness: None, novelty: None, failures };
    }
    let novel = distinct.iter().filter(|s| !train.contains(*s)).count();
    NoveltyUniqueness {
        uniqueness: Some(distinct.len() as f64 / succeeded as f64),
        novelty: Some(novel as f64 / distinct.len() as f64),
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{BondClass, NEUTRAL_CHARGE_CLASS};
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn vocab() -> DatasetVocabulary {
        DatasetVocabulary::new(vec!["C".into(), "N".into(), "O".into(), "H".into()])
    }

    fn mol(elements: &[usize], bonds: &[(usize, usize, BondClass)]) -> Molecule {
        let n = elements.len();
        let mut m = Molecule::new(
            elements.to_vec(),
            vec![NEUTRAL_CHARGE_CLASS; n],
            Array2::zeros((n, 3)),
        )
        .unwrap();
        for &(i, j, b) in bonds {
            m.set_bond(i, j, b).unwrap();
        }
        m
    }

    /// Apply an atom permutation: atom i of the result is atom perm[i] of
    /// the input.
    fn permuted(m: &Molecule, perm: &[usize]) -> Molecule {
        let n = m.num_atoms();
        let mut out = Molecule::new(
            perm.iter().map(|&p| m.elements[p]).collect(),
            perm.iter().map(|&p| m.charges[p]).collect(),
            Array2::zeros((n, 3)),
        )
        .unwrap();
        for i in 0..n {
            for j in (i + 1)..n {
                let b = m.bonds[[perm[i], perm[j]]];
                out.set_bond(i, j, BondClass::from_index(b).unwrap()).unwrap();
            }
        }
        out
    }

    #[test]
    fn relabeling_never_changes_the_serialization() {
        let v = vocab();
        let mut rng = ChaCha20Rng::seed_from_u64(1405);
        for trial in 0..40 {
            // Random connected-ish labeled graph on up to 8 atoms.
            let n = rng.gen_range(2..9);
            let mut m = Molecule::new(
                (0..n).map(|_| rng.gen_range(0..4)).collect(),
                (0..n).map(|_| rng.gen_range(0..6)).collect(),
                Array2::zeros((n, 3)),
            )
            .unwrap();
            for i in 1..n {
                // Spanning-tree edge keeps most graphs connected.
                let j = rng.gen_range(0..i);
                let cls = rng.gen_range(1..5);
                m.set_bond(i, j, BondClass::from_index(cls).unwrap()).unwrap();
            }
            for _ in 0..2 {
                let i = rng.gen_range(0..n);
                let j = rng.gen_range(0..n);
                if i != j {
                    let cls = rng.gen_range(1..5);
                    m.set_bond(i, j, BondClass::from_index(cls).unwrap()).unwrap();
                }
            }

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let shuffled = permuted(&m, &perm);
            assert_eq!(
                canonical_serialization(&m, &v).unwrap(),
                canonical_serialization(&shuffled, &v).unwrap(),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn distinct_graphs_serialize_differently() {
        let v = vocab();
        let ethanol_frag = mol(&[0, 0, 2], &[(0, 1, BondClass::Single), (1, 2, BondClass::Single)]);
        let ether_frag = mol(&[0, 2, 0], &[(0, 1, BondClass::Single), (1, 2, BondClass::Single)]);
        // C–C–O and C–O–C share a formula but not a graph.
        assert_ne!(
            canonical_serialization(&ethanol_frag, &v).unwrap(),
            canonical_serialization(&ether_frag, &v).unwrap()
        );
        // Bond class matters.
        let single = mol(&[0, 2], &[(0, 1, BondClass::Single)]);
        let double = mol(&[0, 2], &[(0, 1, BondClass::Double)]);
        assert_ne!(
            canonical_serialization(&single, &v).unwrap(),
            canonical_serialization(&double, &v).unwrap()
        );
        // Charge matters.
        let mut charged = single.clone();
        charged.charges[1] = 1; // -1 charge class
        assert_ne!(
            canonical_serialization(&single, &v).unwrap(),
            canonical_serialization(&charged, &v).unwrap()
        );
    }

    #[test]
    fn components_are_sorted_so_fragment_order_is_irrelevant() {
        let v = vocab();
        // Two disconnected fragments in either input order.
        let a = mol(&[0, 0, 2, 2], &[(0, 1, BondClass::Single), (2, 3, BondClass::Double)]);
        let b = mol(&[2, 2, 0, 0], &[(0, 1, BondClass::Double), (2, 3, BondClass::Single)]);
        let sa = canonical_serialization(&a, &v).unwrap();
        assert_eq!(sa, canonical_serialization(&b, &v).unwrap());
        assert!(sa.contains('.'), "two components join with '.': {sa}");
    }

    #[test]
    fn rings_and_chains_are_distinguished() {
        let v = vocab();
        // C6 ring vs C6 chain.
        let ring_bonds: Vec<(usize, usize, BondClass)> =
            (0..6).map(|i| (i, (i + 1) % 6, BondClass::Single)).collect();
        let chain_bonds: Vec<(usize, usize, BondClass)> =
            (0..5).map(|i| (i, i + 1, BondClass::Single)).collect();
        let ring = mol(&[0; 6], &ring_bonds);
        let chain = mol(&[0; 6], &chain_bonds);
        assert_ne!(
            canonical_serialization(&ring, &v).unwrap(),
            canonical_serialization(&chain, &v).unwrap()
        );
    }

    #[test]
    fn uniqueness_counts_distinct_forms() {
        let v = vocab();
        let a = mol(&[0, 2], &[(0, 1, BondClass::Single)]);
        let train = BTreeSet::new();

        // All-identical set: uniqueness 1/n.
        let copies = vec![a.clone(), a.clone(), a.clone(), a.clone()];
        let r = novelty_uniqueness(&copies, &train, &v);
        assert_eq!(r.uniqueness, Some(0.25));
        assert_eq!(r.failures, 0);

        // All-distinct set: uniqueness 1.
        let b = mol(&[0, 1], &[(0, 1, BondClass::Single)]);
        let c = mol(&[0, 0], &[(0, 1, BondClass::Double)]);
        let r = novelty_uniqueness(&[a, b, c], &train, &v);
        assert_eq!(r.uniqueness, Some(1.0));
    }

    #[test]
    fn novelty_compares_against_the_training_forms() {
        let v = vocab();
        let a = mol(&[0, 2], &[(0, 1, BondClass::Single)]);
        let b = mol(&[0, 1], &[(0, 1, BondClass::Single)]);
        let c = mol(&[0, 0], &[(0, 1, BondClass::Double)]);

        let mut train = BTreeSet::new();
        train.insert(canonical_serialization(&a, &v).unwrap());
        train.insert(canonical_serialization(&b, &v).unwrap());

        // Subset of training: novelty 0.
        let r = novelty_uniqueness(&[a.clone(), b.clone()], &train, &v);
        assert_eq!(r.novelty, Some(0.0));

        // Disjoint from training: novelty 1.
        let r = novelty_uniqueness(&[c.clone()], &train, &v);
        assert_eq!(r.novelty, Some(1.0));

        // One of two distinct forms is novel.
        let r = novelty_uniqueness(&[a, c], &train, &v);
        assert_eq!(r.novelty, Some(0.5));

        // Empty input: both undefined.
        let r = novelty_uniqueness(&[], &train, &v);
        assert_eq!(r.uniqueness, None);
        assert_eq!(r.novelty, None);
    }

    #[test]
    fn canonicalization_failures_are_excluded_and_counted() {
        let v = vocab();
        let good = mol(&[0, 2], &[(0, 1, BondClass::Single)]);
        // Element class 9 has no vocabulary entry.
        let bad = mol(&[9, 9], &[(0, 1, BondClass::Single)]);
        let train = BTreeSet::new();

        let r = novelty_uniqueness(&[good.clone(), bad.clone(), good], &train, &v);
        assert_eq!(r.failures, 1);
        // Two successes collapsing to one form.
        assert_eq!(r.uniqueness, Some(0.5));
        assert_eq!(r.novelty, Some(1.0));

        // Nothing but failures: ratios undefined, count kept.
        let r = novelty_uniqueness(&[bad.clone(), bad], &train, &v);
        assert_eq!(r.failures, 2);
        assert_eq!(r.uniqueness, None);
        assert_eq!(r.novelty, None);
    }
}
