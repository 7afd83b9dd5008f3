//! SDF (MDL V2000) reading and writing.
//!
//! The dialect covered is the one that matters for datasets and sampler
//! output: counts line, atom block (coordinates + symbol), bond block
//! (classes 1/2/3 and 4 = aromatic), `M  CHG` charge properties, optional
//! data items, `$$$$` record separator. Formal charges come from `M  CHG`
//! lines only; the legacy atom-block charge column is ignored. Output is
//! deterministic: no timestamps, stable float formatting.

use super::{BondClass, DatasetVocabulary, Molecule, NEUTRAL_CHARGE_CLASS};
use crate::{EquimolError, Result};
use ndarray::Array2;
use std::path::Path;

/// Per-record name and data items attached when writing.
#[derive(Debug, Clone, Default)]
pub struct SdfRecordMeta {
    pub name: String,
    /// Data items written as `> <key>` / value blocks after `M  END`.
    pub fields: Vec<(String, String)>,
}

/// Result of a lenient read: good molecules plus a per-record error log.
#[derive(Debug)]
pub struct SdfReadOutcome {
    pub molecules: Vec<Molecule>,
    /// (record index in file, reason) for every skipped record.
    pub skipped: Vec<(usize, String)>,
}

/// Read an SDF file, failing on the first malformed record.
pub fn read_sdf(path: &Path, vocab: &DatasetVocabulary) -> Result<Vec<Molecule>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EquimolError::io(path.display().to_string(), e))?;
    parse_sdf_str(&text, vocab)
}

/// Read an SDF file, skipping malformed records and reporting them.
pub fn read_sdf_lenient(path: &Path, vocab: &DatasetVocabulary) -> Result<SdfReadOutcome> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EquimolError::io(path.display().to_string(), e))?;
    Ok(parse_sdf_str_lenient(&text, vocab))
}

/// Parse SDF text, failing on the first malformed record.
pub fn parse_sdf_str(text: &str, vocab: &DatasetVocabulary) -> Result<Vec<Molecule>> {
    let mut out = Vec::new();
    for (idx, record) in split_records(text).into_iter().enumerate() {
        let mol = parse_record(&record, vocab)
            .map_err(|e| annotate_record(e, idx))?;
        out.push(mol);
    }
    Ok(out)
}

/// Parse SDF text, skipping malformed records.
pub fn parse_sdf_str_lenient(text: &str, vocab: &DatasetVocabulary) -> SdfReadOutcome {
    let mut molecules = Vec::new();
    let mut skipped = Vec::new();
    for (idx, record) in split_records(text).into_iter().enumerate() {
        match parse_record(&record, vocab) {
            Ok(m) => molecules.push(m),
            Err(e) => skipped.push((idx, e.to_string())),
        }
    }
    SdfReadOutcome { molecules, skipped }
}

/// Serialize molecules to SDF text. `meta`, when given, must be parallel to
/// `mols`; otherwise records are named `mol_<index>` with no data items.
pub fn sdf_to_string(
    mols: &[Molecule],
    vocab: &DatasetVocabulary,
    meta: Option<&[SdfRecordMeta]>,
) -> Result<String> {
    if let Some(m) = meta {
        if m.len() != mols.len() {
            return Err(EquimolError::Contract(format!(
                "metadata length {} does not match molecule count {}",
                m.len(),
                mols.len()
            )));
        }
    }
    let mut s = String::new();
    for (i, mol) in mols.iter().enumerate() {
        mol.validate(vocab)?;
        let default_meta;
        let rec_meta = match meta {
            Some(m) => &m[i],
            None => {
                default_meta = SdfRecordMeta {
                    name: format!("mol_{i}"),
                    fields: Vec::new(),
                };
                &default_meta
            }
        };
        write_record(&mut s, mol, vocab, rec_meta)?;
    }
    Ok(s)
}

/// Write molecules to an SDF file.
pub fn write_sdf(
    path: &Path,
    mols: &[Molecule],
    vocab: &DatasetVocabulary,
    meta: Option<&[SdfRecordMeta]>,
) -> Result<()> {
    let s = sdf_to_string(mols, vocab, meta)?;
    std::fs::write(path, s).map_err(|e| EquimolError::io(path.display().to_string(), e))
}

fn annotate_record(e: EquimolError, record: usize) -> EquimolError {
    match e {
        EquimolError::Parse {
            what,
            location,
            message,
        } => EquimolError::Parse {
            what,
            location: format!("record {record}, {location}"),
            message,
        },
        other => other,
    }
}

/// Split file text into records at `$$$$` lines. A trailing fragment made
/// only of blank lines is not a record.
fn split_records(text: &str) -> Vec<Vec<String>> {
    let mut records = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for line in text.lines() {
        if line.trim_end() == "$$$$" {
            records.push(std::mem::take(&mut current));
        } else {
            current.push(line.to_string());
        }
    }
    if current.iter().any(|l| !l.trim().is_empty()) {
        records.push(current);
    }
    records
}

fn perr(location: impl Into<String>, message: impl Into<String>) -> EquimolError {
    EquimolError::parse("sdf", location, message)
}

/// Fixed-column integer field with whitespace-split fallback for files that
/// do not honour V2000 column widths.
fn counts_field(line: &str, lo: usize, hi: usize) -> Option<usize> {
    if line.len() >= hi {
        if let Ok(v) = line[lo..hi].trim().parse() {
            return Some(v);
        }
    }
    None
}

fn parse_record(lines: &[String], vocab: &DatasetVocabulary) -> Result<Molecule> {
    if lines.len() < 4 {
        return Err(perr("header", "record shorter than the 4 header lines"));
    }
    // lines[0..3]: name, program, comment — content unused.
    let counts = &lines[3];
    let (natoms, nbonds) = parse_counts(counts)?;
    let atom_end = 4 + natoms;
    let bond_end = atom_end + nbonds;
    if lines.len() < bond_end {
        return Err(perr(
            "counts line",
            format!(
                "counts promise {natoms} atoms / {nbonds} bonds but record has {} lines",
                lines.len()
            ),
        ));
    }

    let mut elements = Vec::with_capacity(natoms);
    let mut positions = Array2::zeros((natoms, 3));
    for (i, line) in lines[4..atom_end].iter().enumerate() {
        let loc = format!("atom {}", i + 1);
        let (x, y, z, symbol) = parse_atom_line(line, &loc)?;
        let e = vocab.element_index(&symbol).ok_or_else(|| {
            perr(&loc, format!("element '{symbol}' not in vocabulary"))
        })?;
        elements.push(e);
        positions[[i, 0]] = x;
        positions[[i, 1]] = y;
        positions[[i, 2]] = z;
    }

    let mut mol = Molecule::new(elements, vec![NEUTRAL_CHARGE_CLASS; natoms], positions)?;

    for (k, line) in lines[atom_end..bond_end].iter().enumerate() {
        let loc = format!("bond {}", k + 1);
        let (a1, a2, ty) = parse_bond_line(line, &loc)?;
        if a1 == 0 || a2 == 0 || a1 > natoms || a2 > natoms {
            return Err(perr(&loc, format!("atom index out of range: {a1}-{a2}")));
        }
        if a1 == a2 {
            return Err(perr(&loc, format!("self-bond on atom {a1}")));
        }
        let class = match ty {
            1 => BondClass::Single,
            2 => BondClass::Double,
            3 => BondClass::Triple,
            4 => BondClass::Aromatic,
            other => return Err(perr(&loc, format!("unsupported bond type {other}"))),
        };
        if mol.bond(a1 - 1, a2 - 1) != BondClass::None {
            return Err(perr(&loc, format!("duplicate bond {a1}-{a2}")));
        }
        mol.set_bond(a1 - 1, a2 - 1, class)?;
    }

    // Property block: only `M  CHG` is interpreted; anything else up to
    // `M  END` is ignored, as are data items after it.
    for (off, line) in lines[bond_end..].iter().enumerate() {
        let loc = format!("property line {}", bond_end + off + 1);
        let t = line.trim_end();
        if t.starts_with("M  CHG") {
            apply_charges(&mut mol, t, &loc)?;
        } else if t == "M  END" {
            break;
        }
    }
    Ok(mol)
}

fn parse_counts(line: &str) -> Result<(usize, usize)> {
    if !line.contains("V2000") {
        return Err(perr("counts line", format!("not a V2000 counts line: '{line}'")));
    }
    let fixed = (counts_field(line, 0, 3), counts_field(line, 3, 6));
    if let (Some(a), Some(b)) = fixed {
        return Ok((a, b));
    }
    let mut it = line.split_whitespace();
    let a = it
        .next()
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| perr("counts line", "unreadable atom count"))?;
    let b = it
        .next()
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| perr("counts line", "unreadable bond count"))?;
    Ok((a, b))
}

fn parse_atom_line(line: &str, loc: &str) -> Result<(f64, f64, f64, String)> {
    // Fixed V2000 columns first: x[0..10) y[10..20) z[20..30) symbol[31..34).
    if line.len() >= 34 {
        let x = line[0..10].trim().parse::<f64>();
        let y = line[10..20].trim().parse::<f64>();
        let z = line[20..30].trim().parse::<f64>();
        let sym = line[31..34].trim();
        if let (Ok(x), Ok(y), Ok(z)) = (x, y, z) {
            if !sym.is_empty() {
                return Ok((x, y, z, sym.to_string()));
            }
        }
    }
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 4 {
        return Err(perr(loc, format!("unreadable atom line: '{line}'")));
    }
    let x = fields[0]
        .parse()
        .map_err(|e| perr(loc, format!("bad x coordinate: {e}")))?;
    let y = fields[1]
        .parse()
        .map_err(|e| perr(loc, format!("bad y coordinate: {e}")))?;
    let z = fields[2]
        .parse()
        .map_err(|e| perr(loc, format!("bad z coordinate: {e}")))?;
    Ok((x, y, z, fields[3].to_string()))
}

fn parse_bond_line(line: &str, loc: &str) -> Result<(usize, usize, usize)> {
    // Fixed columns handle atom indices >= 100, where fields fuse together.
    if line.len() >= 9 {
        let a = line[0..3].trim().parse::<usize>();
        let b = line[3..6].trim().parse::<usize>();
        let t = line[6..9].trim().parse::<usize>();
        if let (Ok(a), Ok(b), Ok(t)) = (a, b, t) {
            return Ok((a, b, t));
        }
    }
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 3 {
        return Err(perr(loc, format!("unreadable bond line: '{line}'")));
    }
    let a = fields[0]
        .parse()
        .map_err(|e| perr(loc, format!("bad atom index: {e}")))?;
    let b = fields[1]
        .parse()
        .map_err(|e| perr(loc, format!("bad atom index: {e}")))?;
    let t = fields[2]
        .parse()
        .map_err(|e| perr(loc, format!("bad bond type: {e}")))?;
    Ok((a, b, t))
}

fn apply_charges(mol: &mut Molecule, line: &str, loc: &str) -> Result<()> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    // "M CHG n a1 c1 a2 c2 ..."
    if fields.len() < 3 {
        return Err(perr(loc, "truncated M  CHG line"));
    }
    let n: usize = fields[2]
        .parse()
        .map_err(|e| perr(loc, format!("bad M  CHG count: {e}")))?;
    if fields.len() != 3 + 2 * n {
        return Err(perr(
            loc,
            format!("M  CHG promises {n} pairs but line has {} fields", fields.len() - 3),
        ));
    }
    for pair in fields[3..].chunks(2) {
        let atom: usize = pair[0]
            .parse()
            .map_err(|e| perr(loc, format!("bad atom index: {e}")))?;
        let charge: i32 = pair[1]
            .parse()
            .map_err(|e| perr(loc, format!("bad charge: {e}")))?;
        if atom == 0 || atom > mol.num_atoms() {
            return Err(perr(loc, format!("M  CHG atom index {atom} out of range")));
        }
        let class = DatasetVocabulary::charge_class(charge).ok_or_else(|| {
            perr(loc, format!("formal charge {charge} outside supported classes"))
        })?;
        mol.charges[atom - 1] = class;
    }
    Ok(())
}

/// `-0.0` prints as `-0.0000`; collapse it so output is sign-stable.
fn clean_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

fn write_record(
    s: &mut String,
    mol: &Molecule,
    vocab: &DatasetVocabulary,
    meta: &SdfRecordMeta,
) -> Result<()> {
    use std::fmt::Write;
    let bonds = mol.bonded_pairs();
    writeln!(s, "{}", meta.name).unwrap();
    writeln!(s, "  equimol3D").unwrap();
    writeln!(s).unwrap();
    writeln!(
        s,
        "{:3}{:3}  0  0  0  0  0  0  0  0999 V2000",
        mol.num_atoms(),
        bonds.len()
    )
    .unwrap();
    for i in 0..mol.num_atoms() {
        let p = mol.positions.row(i);
        writeln!(
            s,
            "{:10.4}{:10.4}{:10.4} {:<3}0  0  0  0  0  0  0  0  0  0  0  0",
            clean_zero(p[0]),
            clean_zero(p[1]),
            clean_zero(p[2]),
            vocab.elements[mol.elements[i]]
        )
        .unwrap();
    }
    for (i, j, class) in &bonds {
        let ty = match class {
            BondClass::Single => 1,
            BondClass::Double => 2,
            BondClass::Triple => 3,
            BondClass::Aromatic => 4,
            BondClass::None => unreachable!("bonded_pairs never yields None"),
        };
        writeln!(s, "{:3}{:3}{:3}  0  0  0  0", i + 1, j + 1, ty).unwrap();
    }
    let charged: Vec<(usize, i32)> = (0..mol.num_atoms())
        .filter_map(|i| {
            let c = mol.formal_charge(i);
            (c != 0).then_some((i + 1, c))
        })
        .collect();
    for chunk in charged.chunks(8) {
        write!(s, "M  CHG{:3}", chunk.len()).unwrap();
        for (atom, charge) in chunk {
            write!(s, "{:4}{:4}", atom, charge).unwrap();
        }
        writeln!(s).unwrap();
    }
    writeln!(s, "M  END").unwrap();
    for (key, value) in &meta.fields {
        writeln!(s, "> <{key}>").unwrap();
        writeln!(s, "{value}").unwrap();
        writeln!(s).unwrap();
    }
    writeln!(s, "$$$$").unwrap();
    Ok(())
}
