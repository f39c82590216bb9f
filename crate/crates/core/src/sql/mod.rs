//! Sketch-SQL parses, the decision-level state/action model, and an
//! in-memory executor.
//!
//! A query is produced by filling the sketch
//! `SELECT Agg SCol WHERE WCol OP VAL (AND ...)` one decision at a time. The
//! number of conditions is itself a decision (`EndWhere`), so a query with
//! `k` conditions takes `3 + 3k` decisions.

mod action;
mod exec;
mod query;
mod table;
mod value;

pub use action::{actions_to_query, Action, Stage, State, Trajectory};
pub use exec::{execute, results_equal, ExecResult, SCALAR_TOLERANCE};
pub use query::{Agg, Condition, Op, SqlQuery, MAX_CONDITIONS};
pub use table::{Column, ColumnKind, Table};
pub use value::Value;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SqlError {
    #[error("table {table} has no column {column:?}")]
    UnknownColumn { table: String, column: String },
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("row {row} of table {table} has {found} values, expected {expected}")]
    RowArity { table: String, row: usize, expected: usize, found: usize },
    #[error("type error: {0}")]
    TypeMismatch(String),
    #[error("{0} conditions exceed the sketch limit")]
    TooManyConditions(usize),
    #[error("condition on {0:?} breaks canonical column order")]
    NonCanonical(String),
    #[error("stage error: {0}")]
    Stage(String),
    #[error("trajectory is incomplete (stopped at stage {0:?})")]
    Incomplete(Stage),
}

/// Whitespace tokenization used for every question in the workbench.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    fn figure_table() -> Table {
        let cols = vec![
            Column::new("Player", ColumnKind::Text),
            Column::new("No.", ColumnKind::Number),
            Column::new("Position", ColumnKind::Text),
            Column::new("School/Club Team", ColumnKind::Text),
        ];
        let rows = vec![
            vec!["jalen rose".into(), 5.0.into(), "guard".into(), "michigan".into()],
            vec!["terrence ross".into(), 31.0.into(), "guard".into(), "washington".into()],
            vec!["carlos rogers".into(), 34.0.into(), "forward".into(), "tennessee state".into()],
        ];
        Table::new("t1", cols, rows).unwrap()
    }

    fn figure_query() -> SqlQuery {
        SqlQuery::new("School/Club Team", Agg::Count, vec![Condition::new("Player", Op::Eq, "jalen rose")])
    }

    fn question() -> Arc<[String]> {
        tokenize("how many school club teams did jalen rose play for").into()
    }

    #[test]
    fn figure_query_trajectory_shape() {
        let traj = figure_query().to_trajectory(question(), "t1".into());
        let kinds: Vec<_> = traj.actions.iter().map(|a| std::mem::discriminant(a)).collect();
        let expected = [
            Action::SelectCol(String::new()),
            Action::SetAgg(Agg::None),
            Action::WhereCol(String::new()),
            Action::WhereOp(Op::Eq),
            Action::WhereVal(Value::Number(0.0)),
            Action::EndWhere,
        ];
        assert_eq!(kinds, expected.iter().map(std::mem::discriminant).collect::<Vec<_>>());
        assert!(traj.complete);
        assert_eq!(traj.to_query(&figure_table()).unwrap(), figure_query());
    }

    #[test]
    fn zero_condition_query_has_three_actions() {
        let q = SqlQuery::new("Player", Agg::None, vec![]);
        let traj = q.to_trajectory(question(), "t1".into());
        assert_eq!(traj.len(), 3);
        assert_eq!(traj.actions[2], Action::EndWhere);
    }

    #[test]
    fn incomplete_trajectory_is_rejected() {
        let mut actions = figure_query().actions();
        actions.pop();
        let traj = Trajectory::from_actions(State::initial(question(), "t1".into()), actions);
        assert!(!traj.complete);
        assert!(matches!(traj.to_query(&figure_table()), Err(SqlError::Incomplete(Stage::WhereCol))));
    }

    #[test]
    fn stage_is_a_function_of_prefix() {
        let actions = figure_query().actions();
        let stages: Vec<Stage> = (0..=actions.len()).map(|i| Stage::after(&actions[..i]).unwrap()).collect();
        use Stage::*;
        assert_eq!(stages, vec![SelectCol, Agg, WhereCol, Op, Val, WhereCol, Done]);
    }

    #[test]
    fn stage_machine_rejects_out_of_order_actions() {
        let bad = [Action::SetAgg(Agg::Count)];
        assert!(Stage::after(&bad).is_err());
        let bad = [Action::SelectCol("Player".into()), Action::EndWhere];
        assert!(Stage::after(&bad).is_err());
    }

    #[test]
    fn schema_rules_are_enforced() {
        let t = figure_table();
        let sum_text = [Action::SelectCol("Player".into()), Action::SetAgg(Agg::Sum), Action::EndWhere];
        assert!(matches!(actions_to_query(&sum_text, &t), Err(SqlError::TypeMismatch(_))));
        let gt_text = [
            Action::SelectCol("Player".into()),
            Action::SetAgg(Agg::None),
            Action::WhereCol("Position".into()),
            Action::WhereOp(Op::Gt),
        ];
        assert!(matches!(actions_to_query(&gt_text, &t), Err(SqlError::TypeMismatch(_))));
        let out_of_order = [
            Action::SelectCol("Player".into()),
            Action::SetAgg(Agg::None),
            Action::WhereCol("Position".into()),
            Action::WhereOp(Op::Eq),
            Action::WhereVal("guard".into()),
            Action::WhereCol("Player".into()),
        ];
        assert!(matches!(actions_to_query(&out_of_order, &t), Err(SqlError::NonCanonical(_))));
    }

    #[test]
    fn count_with_no_match_is_zero() {
        let q = SqlQuery::new("Player", Agg::Count, vec![Condition::new("Player", Op::Eq, "nobody")]);
        assert_eq!(execute(&q, &figure_table()).unwrap(), ExecResult::Scalar(0.0));
        let q = SqlQuery::new("No.", Agg::Max, vec![Condition::new("Player", Op::Eq, "nobody")]);
        assert_eq!(execute(&q, &figure_table()).unwrap(), ExecResult::Empty);
    }

    #[test]
    fn bare_select_returns_whole_column() {
        let q = SqlQuery::new("Position", Agg::None, vec![]);
        assert_eq!(
            execute(&q, &figure_table()).unwrap(),
            ExecResult::Bag(vec!["guard".into(), "guard".into(), "forward".into()])
        );
    }

    #[test]
    fn sum_over_text_is_a_type_error() {
        let q = SqlQuery::new("Player", Agg::Sum, vec![]);
        assert!(matches!(execute(&q, &figure_table()), Err(SqlError::TypeMismatch(_))));
    }

    #[test]
    fn numeric_filters() {
        let q = SqlQuery::new("No.", Agg::Avg, vec![Condition::new("No.", Op::Gt, 10.0)]);
        assert_eq!(execute(&q, &figure_table()).unwrap(), ExecResult::Scalar(32.5));
        let q = SqlQuery::new("Player", Agg::Count, vec![Condition::new("No.", Op::Lt, 31.0)]);
        assert_eq!(execute(&q, &figure_table()).unwrap(), ExecResult::Scalar(1.0));
    }

    #[test]
    fn result_equality() {
        use ExecResult::*;
        assert!(results_equal(&Scalar(3.0), &Scalar(3.0)));
        assert!(results_equal(&Scalar(3.0), &Scalar(3.0 + 1e-10)));
        assert!(results_equal(&Bag(vec!["a".into(), "a".into(), "b".into()]), &Bag(vec!["a".into(), "b".into(), "a".into()])));
        assert!(!results_equal(&Bag(vec!["a".into(), "a".into(), "b".into()]), &Bag(vec!["a".into(), "b".into(), "b".into()])));
        assert!(!results_equal(&Scalar(0.0), &Empty));
        assert!(results_equal(&Empty, &Empty));
    }

    #[test]
    fn rendering() {
        assert_eq!(figure_query().render(), "SELECT COUNT(School/Club Team) WHERE Player = \"jalen rose\"");
        let q = SqlQuery::new("Player", Agg::None, vec![Condition::new("No.", Op::Gt, 10.0), Condition::new("Position", Op::Eq, "guard")]);
        assert_eq!(q.render(), "SELECT Player WHERE No. > 10 AND Position = \"guard\"");
    }

    #[test]
    fn gold_json_shape() {
        let json = serde_json::to_string(&figure_query()).unwrap();
        assert_eq!(json, r#"{"sel":"School/Club Team","agg":"COUNT","conds":[["Player","EQ","jalen rose"]]}"#);
        let back: SqlQuery = serde_json::from_str(&json).unwrap();
        assert_eq!(back, figure_query());
    }

    #[test]
    fn spurious_program_exists() {
        // Any COUNT query denotes the same number regardless of its select column.
        let t = figure_table();
        let wrong = SqlQuery::new("Player", Agg::Count, vec![Condition::new("Player", Op::Eq, "jalen rose")]);
        assert_ne!(wrong, figure_query());
        assert!(results_equal(&execute(&wrong, &t).unwrap(), &execute(&figure_query(), &t).unwrap()));
    }
}
