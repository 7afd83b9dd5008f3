//! XYZ reading.
//!
//! XYZ files carry element symbols and coordinates only, so every record
//! becomes a bond-free, neutral molecule. Multi-frame files (concatenated
//! records) are supported.

use super::{DatasetVocabulary, Molecule, NEUTRAL_CHARGE_CLASS};
use crate::{EquimolError, Result};
use ndarray::Array2;
use std::path::Path;

/// Read all frames of an XYZ file as bond-free molecules.
pub fn read_xyz(path: &Path, vocab: &DatasetVocabulary) -> Result<Vec<Molecule>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EquimolError::io(path.display().to_string(), e))?;
    parse_xyz_str(&text, vocab)
}

/// Parse XYZ text (one or more concatenated frames).
pub fn parse_xyz_str(text: &str, vocab: &DatasetVocabulary) -> Result<Vec<Molecule>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut mols = Vec::new();
    let mut pos = 0;
    while pos < lines.len() {
        if lines[pos].trim().is_empty() {
            pos += 1;
            continue;
        }
        let loc = |line: usize| format!("line {}", line + 1);
        let n: usize = lines[pos].trim().parse().map_err(|e| {
            EquimolError::parse("xyz", loc(pos), format!("bad atom count: {e}"))
        })?;
        if pos + 2 + n > lines.len() {
            return Err(EquimolError::parse(
                "xyz",
                loc(pos),
                format!("frame promises {n} atoms but file ends early"),
            ));
        }
        let mut elements = Vec::with_capacity(n);
        let mut positions = Array2::zeros((n, 3));
        for i in 0..n {
            let line_no = pos + 2 + i;
            let fields: Vec<&str> = lines[line_no].split_whitespace().collect();
            if fields.len() < 4 {
                return Err(EquimolError::parse(
                    "xyz",
                    loc(line_no),
                    format!("unreadable atom line: '{}'", lines[line_no]),
                ));
            }
            let e = vocab.element_index(fields[0]).ok_or_else(|| {
                EquimolError::parse(
                    "xyz",
                    loc(line_no),
                    format!("element '{}' not in vocabulary", fields[0]),
                )
            })?;
            elements.push(e);
            for k in 0..3 {
                positions[[i, k]] = fields[1 + k].parse().map_err(|err| {
                    EquimolError::parse("xyz", loc(line_no), format!("bad coordinate: {err}"))
                })?;
            }
        }
        mols.push(Molecule::new(
            elements,
            vec![NEUTRAL_CHARGE_CLASS; n],
            positions,
        )?);
        pos += 2 + n;
    }
    Ok(mols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::BondClass;

    fn vocab() -> DatasetVocabulary {
        DatasetVocabulary::new(vec!["H".into(), "C".into(), "O".into()])
    }

    #[test]
    fn parses_two_frames() {
        let text = "\
3
water
O 0.0 0.0 0.0
H 0.96 0.0 0.0
H -0.24 0.93 0.0
1
lone carbon
C 1.0 2.0 3.0
";
        let mols = parse_xyz_str(text, &vocab()).unwrap();
        assert_eq!(mols.len(), 2);
        assert_eq!(mols[0].num_atoms(), 3);
        assert_eq!(mols[0].elements, vec![2, 0, 0]);
        // XYZ molecules are bond-free and neutral.
        assert_eq!(mols[0].bond(0, 1), BondClass::None);
        assert_eq!(mols[0].formal_charge(0), 0);
        assert_eq!(mols[1].positions[[0, 2]], 3.0);
    }

    #[test]
    fn rejects_truncated_and_malformed_frames() {
        let v = vocab();
        assert!(parse_xyz_str("2\nc\nO 0 0 0\n", &v).is_err());
        assert!(parse_xyz_str("1\nc\nO 0 zero 0\n", &v).is_err());
        assert!(parse_xyz_str("1\nc\nQq 0 0 0\n", &v).is_err());
        assert!(parse_xyz_str("one\nc\n", &v).is_err());
    }
}
