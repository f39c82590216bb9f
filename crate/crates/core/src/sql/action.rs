use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Agg, Condition, Op, SqlError, SqlQuery, Table, Value, MAX_CONDITIONS};

/// A single parsing decision of the sketch decoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    SelectCol(String),
    SetAgg(Agg),
    WhereCol(String),
    WhereOp(Op),
    WhereVal(Value),
    EndWhere,
}

impl Action {
    /// Human-readable option label.
    pub fn label(&self) -> String {
        match self {
            Action::SelectCol(c) => format!("column \"{c}\""),
            Action::SetAgg(Agg::None) => "no aggregation".to_owned(),
            Action::SetAgg(a) => a.as_str().to_owned(),
            Action::WhereCol(c) => format!("a condition on column \"{c}\""),
            Action::WhereOp(op) => format!("\"{}\"", op.symbol()),
            Action::WhereVal(v) => format!("the value \"{v}\""),
            Action::EndWhere => "no further conditions".to_owned(),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::SelectCol(c) => write!(f, "SCol={c}"),
            Action::SetAgg(a) => write!(f, "Agg={a}"),
            Action::WhereCol(c) => write!(f, "WCol={c}"),
            Action::WhereOp(o) => write!(f, "OP={o}"),
            Action::WhereVal(v) => write!(f, "VAL={v}"),
            Action::EndWhere => f.write_str("END"),
        }
    }
}

/// Decode stage; also the slot kind a clarification question is about.
///
/// `SCol -> Agg -> {WhereCol | EndWhere} -> Op -> Val -> {WhereCol | EndWhere}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    SelectCol,
    Agg,
    WhereCol,
    Op,
    Val,
    Done,
}

impl Stage {
    /// Stage reached after the structural action sequence `prefix`.
    pub fn after(prefix: &[Action]) -> Result<Stage, SqlError> {
        prefix.iter().try_fold(Stage::SelectCol, |stage, action| stage.step(action))
    }

    pub fn step(self, action: &Action) -> Result<Stage, SqlError> {
        use Action as A;
        match (self, action) {
            (Stage::SelectCol, A::SelectCol(_)) => Ok(Stage::Agg),
            (Stage::Agg, A::SetAgg(_)) => Ok(Stage::WhereCol),
            (Stage::WhereCol, A::WhereCol(_)) => Ok(Stage::Op),
            (Stage::WhereCol, A::EndWhere) => Ok(Stage::Done),
            (Stage::Op, A::WhereOp(_)) => Ok(Stage::Val),
            (Stage::Val, A::WhereVal(_)) => Ok(Stage::WhereCol),
            (stage, action) => Err(SqlError::Stage(format!("{action} is not legal at stage {stage:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::SelectCol => "SELECT_COL",
            Stage::Agg => "AGG",
            Stage::WhereCol => "WHERE_COL",
            Stage::Op => "OP",
            Stage::Val => "VAL",
            Stage::Done => "DONE",
        }
    }
}

/// Decoding position `(question, a_1..a_{t-1})`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub question: Arc<[String]>,
    pub table_id: Arc<str>,
    pub prefix: Vec<Action>,
}

impl State {
    pub fn initial(question: Arc<[String]>, table_id: Arc<str>) -> Self {
        State { question, table_id, prefix: Vec::new() }
    }

    pub fn stage(&self) -> Result<Stage, SqlError> {
        Stage::after(&self.prefix)
    }

    pub fn child(&self, action: Action) -> State {
        let mut prefix = Vec::with_capacity(self.prefix.len() + 1);
        prefix.extend_from_slice(&self.prefix);
        prefix.push(action);
        State { question: Arc::clone(&self.question), table_id: Arc::clone(&self.table_id), prefix }
    }

    pub fn sel_col(&self) -> Option<&str> {
        match self.prefix.first() {
            Some(Action::SelectCol(c)) => Some(c),
            _ => None,
        }
    }

    /// Number of WhereCol decisions already taken.
    pub fn num_conditions(&self) -> usize {
        self.prefix.iter().filter(|a| matches!(a, Action::WhereCol(_))).count()
    }

    /// Column of the most recent condition, if any.
    pub fn last_where_col(&self) -> Option<&str> {
        self.prefix.iter().rev().find_map(|a| match a {
            Action::WhereCol(c) => Some(c.as_str()),
            _ => None,
        })
    }

    pub fn last_op(&self) -> Option<Op> {
        self.prefix.iter().rev().find_map(|a| match a {
            Action::WhereOp(o) => Some(*o),
            _ => None,
        })
    }
}

/// Checks `actions` against the stage machine and the table schema and
/// returns the query it denotes.
///
/// Beyond the stage order this enforces: columns exist, aggregators and
/// operators fit the column type, condition literals fit their column,
/// condition columns strictly increase in table order, and at most
/// [`MAX_CONDITIONS`] conditions.
pub fn actions_to_query(actions: &[Action], table: &Table) -> Result<SqlQuery, SqlError> {
    let mut stage = Stage::SelectCol;
    let mut sel: Option<(String, super::ColumnKind)> = None;
    let mut agg = Agg::None;
    let mut conds: Vec<Condition> = Vec::new();
    let mut pending: Option<(usize, String, Option<Op>)> = None;
    let mut last_idx: Option<usize> = None;
    for action in actions {
        if stage == Stage::Done {
            return Err(SqlError::Stage(format!("{action} after END")));
        }
        let next = stage.step(action)?;
        match action {
            Action::SelectCol(c) => {
                let (_, col) = table.column(c)?;
                sel = Some((c.clone(), col.kind));
            }
            Action::SetAgg(a) => {
                let kind = sel.as_ref().map(|s| s.1).expect("stage machine orders SCol first");
                if !a.admits(kind) {
                    return Err(SqlError::TypeMismatch(format!("{a} over {} column", kind.as_str())));
                }
                agg = *a;
            }
            Action::WhereCol(c) => {
                if conds.len() >= MAX_CONDITIONS {
                    return Err(SqlError::TooManyConditions(conds.len() + 1));
                }
                let (idx, _) = table.column(c)?;
                if last_idx.is_some_and(|l| idx <= l) {
                    return Err(SqlError::NonCanonical(c.clone()));
                }
                last_idx = Some(idx);
                pending = Some((idx, c.clone(), None));
            }
            Action::WhereOp(op) => {
                let p = pending.as_mut().expect("stage machine orders WCol before OP");
                if !op.admits(table.columns[p.0].kind) {
                    return Err(SqlError::TypeMismatch(format!("{} on {} column", op.as_str(), table.columns[p.0].kind.as_str())));
                }
                p.2 = Some(*op);
            }
            Action::WhereVal(v) => {
                let (idx, column, op) = pending.take().expect("stage machine orders OP before VAL");
                if !table.columns[idx].kind.admits(v) {
                    return Err(SqlError::TypeMismatch(format!("literal {v:?} for column {column:?}")));
                }
                conds.push(Condition { column, op: op.expect("op precedes value"), value: v.clone() });
            }
            Action::EndWhere => {}
        }
        stage = next;
    }
    if stage != Stage::Done {
        return Err(SqlError::Incomplete(stage));
    }
    let (sel_col, _) = sel.expect("complete trajectory has a select column");
    Ok(SqlQuery { sel_col, agg, conds })
}

impl SqlQuery {
    /// The gold decision sequence for this query.
    pub fn actions(&self) -> Vec<Action> {
        let mut out = Vec::with_capacity(self.trajectory_len());
        out.push(Action::SelectCol(self.sel_col.clone()));
        out.push(Action::SetAgg(self.agg));
        for c in &self.conds {
            out.push(Action::WhereCol(c.column.clone()));
            out.push(Action::WhereOp(c.op));
            out.push(Action::WhereVal(c.value.clone()));
        }
        out.push(Action::EndWhere);
        out
    }

    pub fn to_trajectory(&self, question: Arc<[String]>, table_id: Arc<str>) -> Trajectory {
        Trajectory::from_actions(State::initial(question, table_id), self.actions())
    }
}

/// A decision sequence together with the state each decision was taken in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub complete: bool,
}

impl Trajectory {
    pub fn from_actions(initial: State, actions: Vec<Action>) -> Self {
        let mut states = Vec::with_capacity(actions.len());
        let mut state = initial;
        for a in &actions {
            let next = state.child(a.clone());
            states.push(state);
            state = next;
        }
        let complete = matches!(actions.last(), Some(Action::EndWhere)) && Stage::after(&actions) == Ok(Stage::Done);
        Trajectory { states, actions, complete }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn to_query(&self, table: &Table) -> Result<SqlQuery, SqlError> {
        if !self.complete {
            let stage = Stage::after(&self.actions).unwrap_or(Stage::SelectCol);
            return Err(SqlError::Incomplete(stage));
        }
        actions_to_query(&self.actions, table)
    }
}
