use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ColumnKind, SqlError, Table, Value};

/// Upper bound on WHERE conditions in a sketch query.
pub const MAX_CONDITIONS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Agg {
    None,
    Count,
    Max,
    Min,
    Sum,
    Avg,
}

impl Agg {
    pub const ALL: [Agg; 6] = [Agg::None, Agg::Count, Agg::Max, Agg::Min, Agg::Sum, Agg::Avg];

    /// Aggregators that need a NUMBER select column.
    pub fn requires_number(self) -> bool {
        matches!(self, Agg::Max | Agg::Min | Agg::Sum | Agg::Avg)
    }

    pub fn admits(self, kind: ColumnKind) -> bool {
        !self.requires_number() || kind == ColumnKind::Number
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Agg::None => "NONE",
            Agg::Count => "COUNT",
            Agg::Max => "MAX",
            Agg::Min => "MIN",
            Agg::Sum => "SUM",
            Agg::Avg => "AVG",
        }
    }
}

impl fmt::Display for Agg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Op {
    Eq,
    Gt,
    Lt,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Eq, Op::Gt, Op::Lt];

    pub fn admits(self, kind: ColumnKind) -> bool {
        self == Op::Eq || kind == ColumnKind::Number
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Eq => "=",
            Op::Gt => ">",
            Op::Lt => "<",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Eq => "EQ",
            Op::Gt => "GT",
            Op::Lt => "LT",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// One `WHERE col op value` conjunct. Serialized as `[col, op, value]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(String, Op, Value)", into = "(String, Op, Value)")]
pub struct Condition {
    pub column: String,
    pub op: Op,
    pub value: Value,
}

impl Condition {
    pub fn new(column: impl Into<String>, op: Op, value: impl Into<Value>) -> Self {
        Condition { column: column.into(), op, value: value.into() }
    }
}

impl From<(String, Op, Value)> for Condition {
    fn from((column, op, value): (String, Op, Value)) -> Self {
        Condition { column, op, value }
    }
}

impl From<Condition> for (String, Op, Value) {
    fn from(c: Condition) -> Self {
        (c.column, c.op, c.value)
    }
}

/// `SELECT agg(sel_col) WHERE c1 AND c2 ...` with conditions in canonical
/// (column index) order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SqlQuery {
    #[serde(rename = "sel")]
    pub sel_col: String,
    pub agg: Agg,
    pub conds: Vec<Condition>,
}

impl SqlQuery {
    pub fn new(sel_col: impl Into<String>, agg: Agg, conds: Vec<Condition>) -> Self {
        SqlQuery { sel_col: sel_col.into(), agg, conds }
    }

    /// Number of parsing decisions: select column, aggregator, three per
    /// condition and the closing end-of-conditions decision.
    pub fn trajectory_len(&self) -> usize {
        3 + 3 * self.conds.len()
    }

    pub fn validate(&self, table: &Table) -> Result<(), SqlError> {
        let (_, sel) = table.column(&self.sel_col)?;
        if !self.agg.admits(sel.kind) {
            return Err(SqlError::TypeMismatch(format!("{} over {} column {:?}", self.agg, sel.kind.as_str(), sel.name)));
        }
        if self.conds.len() > MAX_CONDITIONS {
            return Err(SqlError::TooManyConditions(self.conds.len()));
        }
        let mut last: Option<usize> = None;
        for cond in &self.conds {
            let (idx, col) = table.column(&cond.column)?;
            if last.is_some_and(|l| idx <= l) {
                return Err(SqlError::NonCanonical(cond.column.clone()));
            }
            last = Some(idx);
            if !cond.op.admits(col.kind) {
                return Err(SqlError::TypeMismatch(format!("{} on {} column {:?}", cond.op.as_str(), col.kind.as_str(), col.name)));
            }
            if !col.kind.admits(&cond.value) {
                return Err(SqlError::TypeMismatch(format!("literal {:?} for {} column {:?}", cond.value, col.kind.as_str(), col.name)));
            }
        }
        Ok(())
    }

    /// Canonical textual form, e.g. `SELECT COUNT(School/Club Team) WHERE Player = "jalen rose"`.
    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for SqlQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.agg {
            Agg::None => write!(f, "SELECT {}", self.sel_col)?,
            agg => write!(f, "SELECT {agg}({})", self.sel_col)?,
        }
        for (i, c) in self.conds.iter().enumerate() {
            f.write_str(if i == 0 { " WHERE " } else { " AND " })?;
            match &c.value {
                Value::Number(n) => write!(f, "{} {} {n}", c.column, c.op)?,
                Value::Text(s) => write!(f, "{} {} \"{s}\"", c.column, c.op)?,
            }
        }
        Ok(())
    }
}
