//! Deterministic generator for desk-scale training sets: small organic
//! molecules with explicit hydrogens, idealized geometry, and a sprinkle
//! of aromatic rings and charged centers.
//!
//! Molecules are grown as random trees over heavy atoms under per-element
//! valence budgets (from the builtin valency table), hydrogen-completed,
//! and embedded with idealized bond lengths plus steric direction picking
//! and Gaussian jitter. A configurable fraction is built around a six-atom
//! aromatic ring instead. Every emitted molecule is connected and passes
//! the valency-table predicate, so a generated set makes a clean training
//! or reference corpus.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::metrics::validity;
use crate::molgraph::{BondClass, DatasetVocabulary, Molecule, ValencyTable, CHARGE_CLASSES};
use crate::{EquimolError, Result};

/// Generator knobs. Heavy elements are drawn by weight; hydrogens are
/// appended automatically and always sit last in the vocabulary.
#[derive(Debug, Clone)]
pub struct ToyParams {
    pub n_molecules: usize,
    pub min_heavy: usize,
    pub max_heavy: usize,
    /// Fraction of molecules built around an aromatic six-ring.
    pub aromatic_fraction: f64,
    /// Fraction of molecules given one charged center (ammonium-like N+
    /// or alkoxide-like terminal O-).
    pub charged_fraction: f64,
    /// Standard deviation of the Gaussian positional jitter, in the same
    /// unit as bond lengths.
    pub jitter: f64,
    /// Heavy-element symbols with draw weights. Symbols must have a
    /// neutral entry in the builtin valency table.
    pub element_weights: Vec<(String, f64)>,
    pub seed: u64,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            n_molecules: 1500,
            min_heavy: 2,
            max_heavy: 9,
            aromatic_fraction: 0.04,
            charged_fraction: 0.03,
            jitter: 0.02,
            element_weights: vec![
                ("C".into(), 0.60),
                ("N".into(), 0.18),
                ("O".into(), 0.17),
                ("F".into(), 0.05),
            ],
            seed: 0,
        }
    }
}

impl ToyParams {
    /// The vocabulary generated molecules are indexed against: the heavy
    /// elements in declaration order, then hydrogen.
    pub fn vocabulary(&self) -> DatasetVocabulary {
        let mut elements: Vec<String> =
            self.element_weights.iter().map(|(s, _)| s.clone()).collect();
        elements.push("H".into());
        DatasetVocabulary::new(elements)
    }

    fn validate(&self) -> Result<()> {
        if self.n_molecules == 0 {
            return Err(EquimolError::Config("n_molecules must be positive".into()));
        }
        if self.min_heavy == 0 || self.min_heavy > self.max_heavy {
            return Err(EquimolError::Config(format!(
                "need 1 <= min_heavy <= max_heavy, got {}..{}",
                self.min_heavy, self.max_heavy
            )));
        }
        if self.element_weights.is_empty()
            || self.element_weights.iter().any(|(_, w)| !(*w >= 0.0) )
            || self.element_weights.iter().map(|(_, w)| w).sum::<f64>() <= 0.0
        {
            return Err(EquimolError::Config(
                "element_weights must be non-empty with non-negative total weight".into(),
            ));
        }
        if self.element_weights.iter().any(|(s, _)| s == "H") {
            return Err(EquimolError::Config(
                "hydrogen is appended automatically; list heavy elements only".into(),
            ));
        }
        let table = ValencyTable::builtin();
        for (s, _) in &self.element_weights {
            if table.allowed(s, 0).is_none() {
                return Err(EquimolError::Config(format!(
                    "element {s:?} has no neutral valency-table entry"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.aromatic_fraction)
            || !(0.0..=1.0).contains(&self.charged_fraction)
        {
            return Err(EquimolError::Config(
                "aromatic_fraction and charged_fraction must lie in [0, 1]".into(),
            ));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(EquimolError::Config("jitter must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Index of a charge value in [`CHARGE_CLASSES`].
fn charge_class_of(charge: i32) -> usize {
    CHARGE_CLASSES
        .iter()
        .position(|&c| c == charge)
        .expect("charge value is a known class")
}

/// Idealized bond length between two element symbols at a bond order.
/// Aromatic pairs use intermediate values; unknown pairs fall back to a
/// generic single-bond length.
fn bond_length(a: &str, b: &str, class: BondClass) -> f64 {
    let (x, y) = if a <= b { (a, b) } else { (b, a) };
    let table: &[(&str, &str, BondClass, f64)] = &[
        ("C", "C", BondClass::Single, 1.54),
        ("C", "C", BondClass::Double, 1.34),
        ("C", "C", BondClass::Triple, 1.20),
        ("C", "C", BondClass::Aromatic, 1.39),
        ("C", "N", BondClass::Single, 1.47),
        ("C", "N", BondClass::Double, 1.28),
        ("C", "N", BondClass::Triple, 1.15),
        ("C", "N", BondClass::Aromatic, 1.34),
        ("C", "O", BondClass::Single, 1.43),
        ("C", "O", BondClass::Double, 1.22),
        ("C", "F", BondClass::Single, 1.35),
        ("N", "N", BondClass::Single, 1.45),
        ("N", "N", BondClass::Double, 1.25),
        ("N", "O", BondClass::Single, 1.40),
        ("N", "O", BondClass::Double, 1.21),
        ("O", "O", BondClass::Single, 1.48),
        ("F", "N", BondClass::Single, 1.36),
        ("F", "O", BondClass::Single, 1.42),
        ("C", "H", BondClass::Single, 1.09),
        ("H", "N", BondClass::Single, 1.01),
        ("H", "O", BondClass::Single, 0.96),
        ("F", "H", BondClass::Single, 0.92),
        ("H", "H", BondClass::Single, 0.74),
    ];
    for &(ta, tb, tc, l) in table {
        if ta == x && tb == y && tc == class {
            return l;
        }
    }
    1.45
}

fn random_unit(rng: &mut ChaCha20Rng) -> [f64; 3] {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    loop {
        let v = [
            normal.sample(rng),
            normal.sample(rng),
            normal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// A direction from `origin_dirs`'s base point that stays clear of the
/// existing neighbor directions: best of `K` random candidates by minimax
/// cosine similarity.
fn steric_direction(rng: &mut ChaCha20Rng, neighbor_dirs: &[[f64; 3]]) -> [f64; 3] {
    const K: usize = 24;
    let mut best = random_unit(rng);
    if neighbor_dirs.is_empty() {
        return best;
    }
    let score = |d: &[f64; 3]| -> f64 {
        neighbor_dirs
            .iter()
            .map(|n| n[0] * d[0] + n[1] * d[1] + n[2] * d[2])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut best_score = score(&best);
    for _ in 1..K {
        let cand = random_unit(rng);
        let s = score(&cand);
        if s < best_score {
            best_score = s;
            best = cand;
        }
    }
    best
}

/// Working state while one molecule is assembled.
struct Builder {
    elements: Vec<usize>,
    charges: Vec<usize>,
    positions: Vec<[f64; 3]>,
    bonds: Vec<(usize, usize, BondClass)>,
    /// Remaining valence budget per atom.
    free: Vec<f64>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            elements: Vec::new(),
            charges: Vec::new(),
            positions: Vec::new(),
            bonds: Vec::new(),
            free: Vec::new(),
        }
    }

    fn add_atom(&mut self, class: usize, charge: i32, pos: [f64; 3], capacity: f64) -> usize {
        self.elements.push(class);
        self.charges.push(charge_class_of(charge));
        self.positions.push(pos);
        self.free.push(capacity);
        self.elements.len() - 1
    }

    fn add_bond(&mut self, i: usize, j: usize, class: BondClass) {
        self.bonds.push((i, j, class));
        self.free[i] -= class.order();
        self.free[j] -= class.order();
    }

    fn neighbor_dirs(&self, atom: usize) -> Vec<[f64; 3]> {
        let p = self.positions[atom];
        self.bonds
            .iter()
            .filter_map(|&(i, j, _)| {
                let other = if i == atom {
                    Some(j)
                } else if j == atom {
                    Some(i)
                } else {
                    None
                }?;
                let q = self.positions[other];
                let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                (n > 1e-9).then(|| [d[0] / n, d[1] / n, d[2] / n])
            })
            .collect()
    }

    fn into_molecule(self, jitter: f64, rng: &mut ChaCha20Rng) -> Result<Molecule> {
        let n = self.elements.len();
        let normal = Normal::new(0.0, jitter.max(f64::MIN_POSITIVE)).expect("valid normal");
        let mut pos = Array2::zeros((n, 3));
        for (i, p) in self.positions.iter().enumerate() {
            for k in 0..3 {
                let noise = if jitter > 0.0 { normal.sample(rng) } else { 0.0 };
                pos[[i, k]] = p[k] + noise;
            }
        }
        let mut mol = Molecule::new(self.elements, self.charges, pos)?;
        for (i, j, class) in self.bonds {
            mol.set_bond(i, j, class)?;
        }
        Ok(mol)
    }
}

struct Generator<'a> {
    params: &'a ToyParams,
    vocab: DatasetVocabulary,
    /// Neutral valence capacity per heavy element, aligned with
    /// `params.element_weights`.
    capacities: Vec<f64>,
    h_class: usize,
    total_weight: f64,
}

impl<'a> Generator<'a> {
    fn new(params: &'a ToyParams) -> Result<Self> {
        params.validate()?;
        let vocab = params.vocabulary();
        let table = ValencyTable::builtin();
        let capacities = params
            .element_weights
            .iter()
            .map(|(s, _)| {
                let allowed = table.allowed(s, 0).expect("validated above");
                // Grow against the smallest allowed valence so hydrogen
                // completion always lands on a legal total.
                allowed.iter().copied().fold(f64::INFINITY, f64::min)
            })
            .collect();
        Ok(Generator {
            total_weight: params.element_weights.iter().map(|(_, w)| w).sum(),
            h_class: vocab.n_elements() - 1,
            vocab,
            capacities,
            params,
        })
    }

    fn draw_element(&self, rng: &mut ChaCha20Rng) -> usize {
        let mut u = rng.gen_range(0.0..self.total_weight);
        for (i, (_, w)) in self.params.element_weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        self.params.element_weights.len() - 1
    }

    fn symbol(&self, class: usize) -> &str {
        &self.vocab.elements[class]
    }

    /// Grow a random tree of heavy atoms.
    fn build_tree(&self, rng: &mut ChaCha20Rng, n_heavy: usize, b: &mut Builder) {
        let first = self.draw_element(rng);
        b.add_atom(first, 0, [0.0; 3], self.capacities[first]);
        for _ in 1..n_heavy {
            let open: Vec<usize> = (0..b.elements.len()).filter(|&i| b.free[i] >= 1.0).collect();
            let Some(&parent) = open.get(rng.gen_range(0..open.len().max(1))) else {
                break; // fully saturated: the molecule stays smaller
            };
            let child_class = self.draw_element(rng);
            let child_cap = self.capacities[child_class];

            // Bond order limited by both endpoints' remaining budgets.
            let max_order = b.free[parent].min(child_cap).floor() as usize;
            let order = if max_order >= 3 && rng.gen_bool(0.05) {
                BondClass::Triple
            } else if max_order >= 2 && rng.gen_bool(0.20) {
                BondClass::Double
            } else {
                BondClass::Single
            };

            let dir = steric_direction(rng, &b.neighbor_dirs(parent));
            let length = bond_length(
                self.symbol(b.elements[parent]),
                self.symbol(child_class),
                order,
            );
            let p = b.positions[parent];
            let pos = [
                p[0] + dir[0] * length,
                p[1] + dir[1] * length,
                p[2] + dir[2] * length,
            ];
            let child = b.add_atom(child_class, 0, pos, child_cap);
            b.add_bond(parent, child, order);
        }
    }

    /// A six-atom aromatic ring (benzene- or pyridine-like) with a few
    /// single-bonded heavy substituents.
    fn build_aromatic(&self, rng: &mut ChaCha20Rng, b: &mut Builder) {
        let carbon = self
            .params
            .element_weights
            .iter()
            .position(|(s, _)| s == "C");
        let nitrogen = self
            .params
            .element_weights
            .iter()
            .position(|(s, _)| s == "N");
        let Some(c) = carbon else {
            // No carbon in the element set: fall back to a plain tree.
            self.build_tree(rng, self.params.max_heavy.min(6), b);
            return;
        };

        let radius = bond_length("C", "C", BondClass::Aromatic);
        let axis = random_unit(rng);
        let (u, v) = orthonormal_pair(&axis);
        let mut ring = Vec::with_capacity(6);
        for k in 0..6 {
            // At most one ring nitrogen keeps the構 ring chemistry simple.
            let class = if k == 0 && nitrogen.is_some() && rng.gen_bool(0.3) {
                nitrogen.expect("checked")
            } else {
                c
            };
            let th = std::f64::consts::PI / 3.0 * k as f64;
            let pos = [
                radius * (th.cos() * u[0] + th.sin() * v[0]),
                radius * (th.cos() * u[1] + th.sin() * v[1]),
                radius * (th.cos() * u[2] + th.sin() * v[2]),
            ];
            // Aromatic members budget 3 of their valence for the ring;
            // carbon keeps one slot for a substituent or hydrogen.
            ring.push(b.add_atom(class, 0, pos, self.capacities[class]));
        }
        for k in 0..6 {
            b.add_bond(ring[k], ring[(k + 1) % 6], BondClass::Aromatic);
        }

        // Radial substituents on a few ring carbons, within the heavy cap.
        let mut budget = self.params.max_heavy.saturating_sub(6);
        for &atom in &ring {
            if budget == 0 {
                break;
            }
            if b.free[atom] >= 1.0 && rng.gen_bool(0.3) {
                let sub_class = self.draw_element(rng);
                let p = b.positions[atom];
                let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                let dir = [p[0] / norm, p[1] / norm, p[2] / norm];
                let length = bond_length(
                    self.symbol(b.elements[atom]),
                    self.symbol(sub_class),
                    BondClass::Single,
                );
                let pos = [
                    p[0] + dir[0] * length,
                    p[1] + dir[1] * length,
                    p[2] + dir[2] * length,
                ];
                let sub = b.add_atom(sub_class, 0, pos, self.capacities[sub_class]);
                b.add_bond(atom, sub, BondClass::Single);
                budget -= 1;
            }
        }
    }

    /// Give one atom a charge where the table sanctions it: N with a free
    /// slot becomes ammonium-like N+ (gains capacity for one more bond),
    /// or a terminal O becomes alkoxide-like O- (loses its hydrogen slot).
    fn add_charge(&self, rng: &mut ChaCha20Rng, b: &mut Builder) {
        let candidates: Vec<usize> = (0..b.elements.len())
            .filter(|&i| {
                let sym = self.symbol(b.elements[i]);
                (sym == "N" && b.free[i] >= 0.0) || (sym == "O" && b.free[i] >= 1.0)
            })
            .collect();
        if candidates.is_empty() {
            return;
        }
        let atom = candidates[rng.gen_range(0..candidates.len())];
        if self.symbol(b.elements[atom]) == "N" {
            b.charges[atom] = charge_class_of(1);
            b.free[atom] += 1.0; // N+ carries four bonds
        } else {
            b.charges[atom] = charge_class_of(-1);
            b.free[atom] -= 1.0; // O- keeps a lone pair instead of an H
        }
    }

    /// Complete every remaining valence slot with an explicit hydrogen.
    fn fill_hydrogens(&self, rng: &mut ChaCha20Rng, b: &mut Builder) {
        for atom in 0..b.elements.len() {
            while b.free[atom] >= 1.0 {
                let dir = steric_direction(rng, &b.neighbor_dirs(atom));
                let length =
                    bond_length(self.symbol(b.elements[atom]), "H", BondClass::Single);
                let p = b.positions[atom];
                let pos = [
                    p[0] + dir[0] * length,
                    p[1] + dir[1] * length,
                    p[2] + dir[2] * length,
                ];
                let h = b.add_atom(self.h_class, 0, pos, 1.0);
                b.add_bond(atom, h, BondClass::Single);
            }
        }
    }

    fn build_one(&self, rng: &mut ChaCha20Rng) -> Result<Molecule> {
        let mut b = Builder::new();
        if rng.gen_bool(self.params.aromatic_fraction) {
            self.build_aromatic(rng, &mut b);
        } else {
            let n_heavy = rng.gen_range(self.params.min_heavy..=self.params.max_heavy);
            self.build_tree(rng, n_heavy, &mut b);
        }
        if rng.gen_bool(self.params.charged_fraction) {
            self.add_charge(rng, &mut b);
        }
        self.fill_hydrogens(rng, &mut b);
        b.into_molecule(self.params.jitter, rng)
    }
}

/// Orthonormal vectors spanning the plane perpendicular to `axis`.
fn orthonormal_pair(axis: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    let pick = if axis[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    // u = normalize(pick × axis), v = axis × u.
    let mut u = [
        pick[1] * axis[2] - pick[2] * axis[1],
        pick[2] * axis[0] - pick[0] * axis[2],
        pick[0] * axis[1] - pick[1] * axis[0],
    ];
    let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    u = [u[0] / n, u[1] / n, u[2] / n];
    let v = [
        axis[1] * u[2] - axis[2] * u[1],
        axis[2] * u[0] - axis[0] * u[2],
        axis[0] * u[1] - axis[1] * u[0],
    ];
    (u, v)
}

/// Generate a deterministic molecule set. Every molecule is connected and
/// passes the valency-table predicate against the builtin table.
pub fn generate(params: &ToyParams) -> Result<Vec<Molecule>> {
    let generator = Generator::new(params)?;
    let table = ValencyTable::builtin();
    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
    let mut out = Vec::with_capacity(params.n_molecules);
    let mut rejected = 0usize;
    while out.len() < params.n_molecules {
        let mol = generator.build_one(&mut rng)?;
        // Construction should always satisfy the predicate; the filter is
        // insurance against an unforeseen combination, with a hard cap so
        // a systematic failure surfaces instead of looping forever.
        if validity(std::slice::from_ref(&mol), &table, &generator.vocab) == 1.0 {
            out.push(mol);
        } else {
            rejected += 1;
            if rejected > params.n_molecules {
                return Err(EquimolError::Contract(
                    "toy generator keeps producing invalid molecules".into(),
                ));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::connected_fraction;
    use crate::molgraph::derive_extras;

    fn small_params(seed: u64) -> ToyParams {
        ToyParams {
            n_molecules: 120,
            seed,
            ..ToyParams::default()
        }
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let a = generate(&small_params(5)).unwrap();
        let b = generate(&small_params(5)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.elements, y.elements);
            assert_eq!(x.charges, y.charges);
            assert_eq!(x.bonds, y.bonds);
            assert_eq!(x.positions, y.positions);
        }

        let c = generate(&small_params(6)).unwrap();
        let same = a.iter().zip(&c).all(|(x, y)| x.positions == y.positions);
        assert!(!same, "different seeds should differ");
    }

    #[test]
    fn every_molecule_is_valid_and_connected() {
        let params = small_params(11);
        let mols = generate(&params).unwrap();
        let vocab = params.vocabulary();
        let table = ValencyTable::builtin();
        assert_eq!(mols.len(), 120);
        assert_eq!(validity(&mols, &table, &vocab), 1.0);
        assert_eq!(connected_fraction(&mols), 1.0);

        for mol in &mols {
            let heavy = mol
                .elements
                .iter()
                .filter(|&&e| vocab.elements[e] != "H")
                .count();
            assert!(heavy <= params.max_heavy, "{heavy} heavy atoms");
            assert!(heavy >= 1);
            mol.validate(&vocab).unwrap();
        }
    }

    #[test]
    fn feature_classes_are_all_represented() {
        let params = ToyParams {
            n_molecules: 400,
            seed: 23,
            ..ToyParams::default()
        };
        let mols = generate(&params).unwrap();
        let vocab = params.vocabulary();

        let mut any_aromatic = false;
        let mut any_ring = false;
        let mut hybrid_seen = [false; 4];
        let mut charged_molecules = 0usize;
        for mol in &mols {
            let extras = derive_extras(mol, &vocab).unwrap();
            any_aromatic |= extras.is_aromatic.iter().any(|&a| a);
            any_ring |= extras.in_ring.iter().any(|&r| r);
            for &h in &extras.hybridization {
                hybrid_seen[h] = true;
            }
            if mol.charges.iter().any(|&c| CHARGE_CLASSES[c] != 0) {
                charged_molecules += 1;
            }
        }
        assert!(any_aromatic, "no aromatic molecules in 400 draws");
        assert!(any_ring);
        assert!(hybrid_seen.iter().all(|&s| s), "{hybrid_seen:?}");
        assert!(
            charged_molecules > 0 && charged_molecules < 40,
            "{charged_molecules} charged molecules"
        );

        // The aromatic share is in the vicinity of the requested 4%.
        let aromatic_count = mols
            .iter()
            .filter(|m| {
                m.bonded_pairs()
                    .iter()
                    .any(|&(_, _, c)| c == BondClass::Aromatic)
            })
            .count();
        assert!(
            (1..=50).contains(&aromatic_count),
            "{aromatic_count} aromatic molecules in 400"
        );
    }

    #[test]
    fn molecules_survive_an_sdf_round_trip() {
        let params = small_params(31);
        let mols = generate(&params).unwrap();
        let vocab = params.vocabulary();
        let text = crate::molgraph::sdf_to_string(&mols, &vocab, None).unwrap();
        let back = crate::molgraph::parse_sdf_str(&text, &vocab).unwrap();
        assert_eq!(back.len(), mols.len());
        for (x, y) in mols.iter().zip(&back) {
            assert_eq!(x.elements, y.elements);
            assert_eq!(x.bonds, y.bonds);
            assert_eq!(x.charges, y.charges);
        }
    }

    #[test]
    fn bad_parameter_combinations_are_rejected() {
        let bad = ToyParams {
            n_molecules: 0,
            ..ToyParams::default()
        };
        assert!(generate(&bad).is_err());

        let bad = ToyParams {
            min_heavy: 5,
            max_heavy: 3,
            ..ToyParams::default()
        };
        assert!(generate(&bad).is_err());

        let bad = ToyParams {
            element_weights: vec![("H".into(), 1.0)],
            ..ToyParams::default()
        };
        assert!(generate(&bad).is_err());

        let bad = ToyParams {
            element_weights: vec![("Xx".into(), 1.0)],
            ..ToyParams::default()
        };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn geometry_uses_idealized_bond_lengths() {
        let params = ToyParams {
            jitter: 0.0,
            n_molecules: 60,
            seed: 47,
            ..ToyParams::default()
        };
        let mols = generate(&params).unwrap();
        let vocab = params.vocabulary();
        for mol in &mols {
            for (i, j, class) in mol.bonded_pairs() {
                let d = {
                    let a = mol.positions.row(i);
                    let b = mol.positions.row(j);
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                };
                let expected = bond_length(
                    &vocab.elements[mol.elements[i]],
                    &vocab.elements[mol.elements[j]],
                    class,
                );
                assert!(
                    (d - expected).abs() < 1e-9,
                    "bond {i}-{j} ({class:?}) length {d}, expected {expected}"
                );
            }
        }
    }
}
