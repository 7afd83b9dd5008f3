//! Allowed-valency lookup table.
//!
//! Stability checks ask "is this atom's bond-order sum an allowed valency for
//! its element and formal charge?". The table answers that. A curated default
//! ships with the crate; deployments can load an edited copy from disk.

use crate::{EquimolError, Result};
use std::collections::BTreeMap;

/// Text of the built-in table (see `data/valency_table.txt`).
const BUILTIN: &str = include_str!("../../data/valency_table.txt");

/// Map from (element symbol, formal charge) to the sorted list of allowed
/// valencies. Valencies are f64 because aromatic bonds contribute 1.5;
/// every physically complete system still sums to a multiple of 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct ValencyTable {
    entries: BTreeMap<(String, i32), Vec<f64>>,
}

/// Sums are multiples of 0.5, so exact comparison up to rounding noise.
const VALENCY_EPS: f64 = 1e-9;

impl ValencyTable {
    /// The table shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("built-in valency table parses")
    }

    /// Parse the `ELEMENT CHARGE v1,v2,...` text format. `#`-prefixed and
    /// blank lines are ignored. Duplicate (element, charge) keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = format!("line {}", lineno + 1);
            let mut fields = line.split_whitespace();
            let element = fields
                .next()
                .ok_or_else(|| EquimolError::parse("valency table", &loc, "missing element"))?
                .to_string();
            let charge: i32 = fields
                .next()
                .ok_or_else(|| EquimolError::parse("valency table", &loc, "missing charge"))?
                .parse()
                .map_err(|e| {
                    EquimolError::parse("valency table", &loc, format!("bad charge: {e}"))
                })?;
            let list = fields
                .next()
                .ok_or_else(|| EquimolError::parse("valency table", &loc, "missing valencies"))?;
            if fields.next().is_some() {
                return Err(EquimolError::parse(
                    "valency table",
                    &loc,
                    "trailing fields after valency list",
                ));
            }
            let mut valencies = Vec::new();
            for v in list.split(',') {
                let val: f64 = v.trim().parse().map_err(|e| {
                    EquimolError::parse("valency table", &loc, format!("bad valency '{v}': {e}"))
                })?;
                if !val.is_finite() || val < 0.0 {
                    return Err(EquimolError::parse(
                        "valency table",
                        &loc,
                        format!("valency {val} out of range"),
                    ));
                }
                valencies.push(val);
            }
            valencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if entries.insert((element.clone(), charge), valencies).is_some() {
                return Err(EquimolError::parse(
                    "valency table",
                    &loc,
                    format!("duplicate entry for ({element}, {charge})"),
                ));
            }
        }
        if entries.is_empty() {
            return Err(EquimolError::parse(
                "valency table",
                "end of input",
                "table has no entries",
            ));
        }
        Ok(ValencyTable { entries })
    }

    /// Load a table from a file.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EquimolError::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Allowed valencies for an element/charge pair, if listed.
    pub fn allowed(&self, element: &str, charge: i32) -> Option<&[f64]> {
        self.entries
            .get(&(element.to_string(), charge))
            .map(|v| v.as_slice())
    }

    /// Whether `valency` is an allowed value for this element and charge.
    /// Unknown (element, charge) pairs are never allowed.
    pub fn is_allowed(&self, element: &str, charge: i32, valency: f64) -> bool {
        self.allowed(element, charge)
            .map(|vs| vs.iter().any(|&v| (v - valency).abs() < VALENCY_EPS))
            .unwrap_or(false)
    }
}
