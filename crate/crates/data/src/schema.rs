use crate::stablehash;
use crate::{DataError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numerical,
    Categorical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    /// Category names in code order; empty for numerical columns. An open
    /// categorical column (no names listed) is dictionary-encoded at load
    /// time in order of first appearance.
    #[serde(default)]
    pub categories: Vec<String>,
    /// Code range for categorical columns; grows by one when a missing
    /// sentinel category is allocated. Zero for numerical columns.
    #[serde(default)]
    pub category_count: usize,
}

impl Column {
    pub fn numerical(name: &str) -> Self {
        Column { name: name.to_string(), kind: ColumnKind::Numerical, categories: Vec::new(), category_count: 0 }
    }

    pub fn categorical(name: &str, categories: Vec<String>) -> Self {
        let category_count = categories.len();
        Column { name: name.to_string(), kind: ColumnKind::Categorical, categories, category_count }
    }
}

/// Column and target metadata shared by every dataset of one family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<Column>,
    pub targets: Vec<String>,
}

impl Schema {
    pub fn new(columns: Vec<Column>, targets: Vec<String>) -> Result<Self> {
        let mut names: Vec<&str> =
            columns.iter().map(|c| c.name.as_str()).chain(targets.iter().map(|t| t.as_str())).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::Schema("duplicate column or target name".into()));
        }
        Ok(Schema { columns, targets })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let schema: Schema = serde_json::from_str(&text)?;
        Schema::new(schema.columns, schema.targets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn numerical_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == ColumnKind::Numerical)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn categorical_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == ColumnKind::Categorical)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn target_index(&self, name: &str) -> Option<usize> {
        self.targets.iter().position(|t| t == name)
    }

    /// Stable hash of the feature layout (names, kinds, code ranges).
    /// Targets are excluded: upstream and downstream task views of the same
    /// features share one fingerprint, which is what checkpoint transfer
    /// validates against.
    pub fn fingerprint(&self) -> String {
        let mut desc = String::new();
        for c in &self.columns {
            let kind = match c.kind {
                ColumnKind::Numerical => "num",
                ColumnKind::Categorical => "cat",
            };
            desc.push_str(&format!("{}:{}:{};", c.name, kind, c.category_count));
        }
        stablehash::hash_str(&desc)
    }
}
