use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    Numeric,
    String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    #[serde(rename = "type")]
    pub value_type: ValueType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(rename = "distinct")]
    pub distinct_count: u64,
}

impl ColumnStats {
    /// `(min, max)` of a numeric column.
    pub fn range(&self) -> Option<(f64, f64)> {
        match (self.value_type, self.min, self.max) {
            (ValueType::Numeric, Some(lo), Some(hi)) => Some((lo, hi)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    pub name: String,
    pub row_count: u64,
    pub columns: Vec<ColumnStats>,
}

/// Table and column statistics plus the operator vocabulary. Table,
/// column and operator order is significant: it fixes encoding positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub operators: Vec<String>,
    pub tables: Vec<TableStats>,
}

/// Resolved location of a qualified `table.column` name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ColumnRef {
    pub table: usize,
    pub column: usize,
    /// Position in the catalog-wide column order.
    pub global: usize,
}

impl Catalog {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let catalog: Catalog = serde_json::from_slice(bytes)?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("catalog serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut ops = HashSet::new();
        for (i, op) in self.operators.iter().enumerate() {
            if !ops.insert(op.as_str()) {
                return Err(Error::validation(format!("$.operators[{i}]"), format!("duplicate operator `{op}`")));
            }
            if crate::plan::is_reserved_operator(op) {
                return Err(Error::validation(format!("$.operators[{i}]"), format!("`{op}` is reserved")));
            }
        }
        let mut names = HashSet::new();
        for (ti, t) in self.tables.iter().enumerate() {
            let path = format!("$.tables[{ti}]");
            if !names.insert(t.name.as_str()) {
                return Err(Error::validation(path, format!("duplicate table `{}`", t.name)));
            }
            if t.row_count == 0 {
                return Err(Error::validation(format!("{path}.row_count"), "must be positive"));
            }
            let mut cols = HashSet::new();
            for (ci, c) in t.columns.iter().enumerate() {
                let cpath = format!("{path}.columns[{ci}]");
                if !cols.insert(c.name.as_str()) {
                    return Err(Error::validation(cpath, format!("duplicate column `{}`", c.name)));
                }
                if c.distinct_count == 0 {
                    return Err(Error::validation(format!("{cpath}.distinct"), "must be positive"));
                }
                if c.value_type == ValueType::Numeric {
                    match (c.min, c.max) {
                        (Some(lo), Some(hi)) if lo.is_finite() && hi.is_finite() && lo <= hi => {}
                        (Some(_), Some(_)) => {
                            return Err(Error::validation(cpath, "numeric column needs finite min <= max"))
                        }
                        _ => return Err(Error::validation(cpath, "numeric column needs min and max")),
                    }
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical (compact) JSON encoding.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("catalog serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn operator_index(&self, name: &str) -> Option<usize> {
        self.operators.iter().position(|o| o == name)
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    pub fn num_columns(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    /// Global index of the first column of each table.
    pub fn column_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.tables.len());
        let mut acc = 0;
        for t in &self.tables {
            offsets.push(acc);
            acc += t.columns.len();
        }
        offsets
    }

    /// Resolves `table.column`.
    pub fn resolve_column(&self, qualified: &str) -> Option<ColumnRef> {
        let (table, column) = qualified.split_once('.')?;
        let ti = self.table_index(table)?;
        let ci = self.tables[ti].columns.iter().position(|c| c.name == column)?;
        let global = self.tables[..ti].iter().map(|t| t.columns.len()).sum::<usize>() + ci;
        Some(ColumnRef {
            table: ti,
            column: ci,
            global,
        })
    }

    pub fn column(&self, r: ColumnRef) -> &ColumnStats {
        &self.tables[r.table].columns[r.column]
    }

    /// Every column in global order as `(table index, stats)`.
    pub fn columns(&self) -> impl Iterator<Item = (usize, &ColumnStats)> {
        self.tables
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| t.columns.iter().map(move |c| (ti, c)))
    }
}
