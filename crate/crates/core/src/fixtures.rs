//! Small hand-built scenarios: the "jalen rose" table with a policy that is
//! unsure about its first condition column, and a policy whose confident
//! mistake executes to the gold answer.

use std::sync::Arc;

use crate::corpus::CorpusItem;
use crate::policy::Policy;
use crate::sql::{tokenize, Agg, Column, ColumnKind, Condition, Op, SqlQuery, Table};

pub const FIGURE_QUESTION: &str = "how many schools or teams had jalen rose";

pub fn figure_table() -> Table {
    let columns = vec![
        Column::new("Player", ColumnKind::Text),
        Column::new("No.", ColumnKind::Number),
        Column::new("Position", ColumnKind::Text),
        Column::new("School/Club Team", ColumnKind::Text),
    ];
    let rows = vec![
        vec!["jalen rose".into(), 5.0.into(), "guard".into(), "michigan".into()],
        vec!["terry porter".into(), 30.0.into(), "guard".into(), "wisconsin stevens point".into()],
        vec!["rod strickland".into(), 1.0.into(), "guard".into(), "depaul".into()],
        vec!["malik rose".into(), 31.0.into(), "forward".into(), "drexel".into()],
    ];
    Table::new("figure-1", columns, rows).expect("fixture table is well-formed")
}

pub fn figure_gold() -> SqlQuery {
    SqlQuery::new("School/Club Team", Agg::Count, vec![Condition::new("Player", Op::Eq, "jalen rose")])
}

/// Same count, wrong select column.
pub fn spurious_query() -> SqlQuery {
    SqlQuery::new("Position", Agg::Count, vec![Condition::new("Player", Op::Eq, "jalen rose")])
}

pub fn figure_item() -> CorpusItem {
    CorpusItem {
        id: "figure-1".into(),
        question: FIGURE_QUESTION.into(),
        table_id: "figure-1".into(),
        gold: figure_gold(),
    }
}

pub fn figure_tokens() -> Arc<[String]> {
    tokenize(FIGURE_QUESTION).into()
}

fn lex_weight(score: f64) -> f64 {
    // Lexical features carry 1/sqrt(question length).
    score * (tokenize(FIGURE_QUESTION).len() as f64).sqrt()
}

/// Weights shared by both fixture policies: COUNT, the "jalen rose" value
/// and stopping after one condition are all confident.
fn base_policy() -> Policy {
    let mut p = Policy::zeros();
    p.bump(&["agg.uni", "COUNT", "many"], 10.0);
    p.bump(&["val.in_vocab"], 10.0);
    p.bump(&["bias", "END"], -1.0);
    p.bump(&["end.hits", "1", "0"], 10.0);
    p
}

/// Confident on the select column and aggregator, then prefers a condition
/// on the select column itself with probability about 0.47, "Player" second.
pub fn figure_policy() -> Policy {
    let mut p = base_policy();
    p.bump(&["col.lex", "SELECT_COL", "school", "schools"], lex_weight(7.0));
    p.bump(&["col.is_sel", "WHERE_COL"], 1.0);
    p.bump(&["col.vocab_hit", "WHERE_COL"], 0.5);
    p
}

/// Picks "Position" as the select column with probability about 0.59
/// ("School/Club Team" about 0.36); everything after is confident and
/// correct, so the parse executes to the gold answer.
pub fn spurious_policy() -> Policy {
    let mut p = base_policy();
    p.bump(&["col.lex", "SELECT_COL", "position", "many"], lex_weight(3.0));
    p.bump(&["col.lex", "SELECT_COL", "school", "schools"], lex_weight(2.5));
    p.bump(&["col.vocab_hit", "WHERE_COL"], 6.0);
    p
}
