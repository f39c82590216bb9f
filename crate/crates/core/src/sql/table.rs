use std::collections::HashSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{SqlError, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ColumnKind {
    Text,
    Number,
}

impl ColumnKind {
    pub fn admits(self, value: &Value) -> bool {
        match self {
            ColumnKind::Number => value.is_number(),
            ColumnKind::Text => !value.is_number(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColumnKind::Text => "TEXT",
            ColumnKind::Number => "NUMBER",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Column { name: name.into(), kind }
    }

    /// Lowercased alphanumeric pieces of the name (`School/Club Team` ->
    /// `school`, `club`, `team`).
    pub fn name_tokens(&self) -> Vec<String> {
        self.name
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect()
    }
}

/// An in-memory relational table. Rows hold exactly one value per column.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Value>>,
    #[serde(skip)]
    vocab: OnceLock<Vec<HashSet<Value>>>,
}

impl PartialEq for Table {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.columns == other.columns && self.rows == other.rows
    }
}

impl Table {
    pub fn new(id: impl Into<String>, columns: Vec<Column>, rows: Vec<Vec<Value>>) -> Result<Self, SqlError> {
        let table = Table { id: id.into(), columns, rows, vocab: OnceLock::new() };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<(), SqlError> {
        let mut seen = HashSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return Err(SqlError::DuplicateColumn(col.name.clone()));
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            if row.len() != self.columns.len() {
                return Err(SqlError::RowArity { table: self.id.clone(), row: r, expected: self.columns.len(), found: row.len() });
            }
            for (value, col) in row.iter().zip(&self.columns) {
                if !col.kind.admits(value) {
                    return Err(SqlError::TypeMismatch(format!(
                        "row {r} of table {} holds {value:?} in {} column {:?}",
                        self.id,
                        col.kind.as_str(),
                        col.name
                    )));
                }
                if let Value::Number(n) = value {
                    if !n.is_finite() {
                        return Err(SqlError::TypeMismatch(format!("non-finite number in column {:?}", col.name)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Result<(usize, &Column), SqlError> {
        self.column_index(name)
            .map(|i| (i, &self.columns[i]))
            .ok_or_else(|| SqlError::UnknownColumn { table: self.id.clone(), column: name.to_owned() })
    }

    /// Distinct cell values of column `idx`.
    pub fn vocabulary(&self, idx: usize) -> &HashSet<Value> {
        &self.vocab.get_or_init(|| {
            (0..self.columns.len())
                .map(|c| self.rows.iter().map(|row| row[c].clone()).collect())
                .collect()
        })[idx]
    }
}
