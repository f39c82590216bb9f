use serde::{Deserialize, Serialize};

use super::{Agg, Op, SqlError, SqlQuery, Table, Value};

/// Absolute tolerance for comparing scalar results.
pub const SCALAR_TOLERANCE: f64 = 1e-9;

/// Denotation of a query.
///
/// Aggregates produce `Scalar` (or `Empty` when no row survives, except
/// COUNT which yields `Scalar(0)`); a bare select produces the `Bag` of
/// selected values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExecResult {
    Scalar(f64),
    Bag(Vec<Value>),
    Empty,
}

pub fn execute(query: &SqlQuery, table: &Table) -> Result<ExecResult, SqlError> {
    query.validate(table)?;
    let sel = table.column_index(&query.sel_col).expect("validated");
    let filters: Vec<(usize, Op, &Value)> = query
        .conds
        .iter()
        .map(|c| (table.column_index(&c.column).expect("validated"), c.op, &c.value))
        .collect();
    let selected: Vec<&Value> = table
        .rows
        .iter()
        .filter(|row| filters.iter().all(|&(i, op, v)| matches(&row[i], op, v)))
        .map(|row| &row[sel])
        .collect();

    if query.agg == Agg::Count {
        return Ok(ExecResult::Scalar(selected.len() as f64));
    }
    if selected.is_empty() {
        return Ok(ExecResult::Empty);
    }
    let numbers = || selected.iter().map(|v| v.as_number().expect("numeric aggregate validated"));
    Ok(match query.agg {
        Agg::None => ExecResult::Bag(selected.into_iter().cloned().collect()),
        Agg::Count => unreachable!(),
        Agg::Max => ExecResult::Scalar(numbers().fold(f64::NEG_INFINITY, f64::max)),
        Agg::Min => ExecResult::Scalar(numbers().fold(f64::INFINITY, f64::min)),
        Agg::Sum => ExecResult::Scalar(numbers().sum()),
        Agg::Avg => ExecResult::Scalar(numbers().sum::<f64>() / selected.len() as f64),
    })
}

fn matches(cell: &Value, op: Op, literal: &Value) -> bool {
    match op {
        Op::Eq => cell == literal,
        Op::Gt | Op::Lt => match (cell.as_number(), literal.as_number()) {
            (Some(c), Some(l)) if op == Op::Gt => c > l,
            (Some(c), Some(l)) => c < l,
            _ => false,
        },
    }
}

/// Denotation equality: scalars within [`SCALAR_TOLERANCE`], bags as
/// multisets, `Empty` only equal to itself.
pub fn results_equal(a: &ExecResult, b: &ExecResult) -> bool {
    match (a, b) {
        (ExecResult::Scalar(x), ExecResult::Scalar(y)) => (x - y).abs() <= SCALAR_TOLERANCE,
        (ExecResult::Bag(x), ExecResult::Bag(y)) => {
            if x.len() != y.len() {
                return false;
            }
            let mut x: Vec<&Value> = x.iter().collect();
            let mut y: Vec<&Value> = y.iter().collect();
            x.sort();
            y.sort();
            x == y
        }
        (ExecResult::Empty, ExecResult::Empty) => true,
        _ => false,
    }
}
