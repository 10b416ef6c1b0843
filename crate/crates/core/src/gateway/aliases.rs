//! Country-name normalization for the open-label attribute.
//!
//! Country prediction is open-ended generation, so equality against survey
//! answers needs normalization: aliases are applied after
//! [`crate::corpus::canonicalize_label`]. The bundled
//! table ships as a data file (`alias<TAB>canonical`, one per line) and can
//! be replaced at runtime.

use std::collections::BTreeMap;

use crate::corpus::canonicalize_label;

const BUNDLED: &str = include_str!("../../assets/country_aliases.tsv");

#[derive(Debug, Clone)]
pub struct CountryAliases {
    map: BTreeMap<String, String>,
}

impl CountryAliases {
    /// The table shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED).expect("bundled alias table is well-formed")
    }

    /// Parse a `alias<TAB>canonical` table; blank lines and `#` comments
    /// are skipped. Both columns are canonicalized on load.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (alias, canonical) = line.split_once('\t').ok_or_else(|| {
                format!("alias table line {}: expected alias<TAB>canonical", i + 1)
            })?;
            map.insert(canonicalize_label(alias), canonicalize_label(canonical));
        }
        Ok(CountryAliases { map })
    }

    /// Resolve an already-canonicalized label to its canonical country name;
    /// unknown labels pass through unchanged.
    pub fn resolve(&self, canonical_label: &str) -> String {
        self.map
            .get(canonical_label)
            .cloned()
            .unwrap_or_else(|| canonical_label.to_string())
    }

    /// Canonicalize then resolve in one step.
    pub fn normalize(&self, raw: &str) -> String {
        self.resolve(&canonicalize_label(raw))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
