//! Candidate generation and hashed feature templates.

use std::collections::HashSet;
use std::hash::Hasher;

use fnv::FnvHasher;

use super::PolicyError;
use crate::sql::{Action, Agg, ColumnKind, Op, Stage, State, Table, Value, MAX_CONDITIONS};

/// Longest question span offered as a condition value.
pub const MAX_SPAN: usize = 4;

/// Log2 of the hashed feature space size.
pub const FEATURE_BITS: u32 = 18;
pub const FEATURE_DIM: usize = 1 << FEATURE_BITS;

/// Names of every feature template. Any change to how features are built
/// must be reflected here so old checkpoints are rejected.
pub const TEMPLATES: &[&str] = &[
    "bias:v2",
    "col.match",
    "col.mention.prev",
    "col.mention.next",
    "col.lex",
    "col.lex.next",
    "col.lex.prev",
    "col.kind.tok",
    "col.vocab_hit",
    "col.is_sel",
    "agg.uni",
    "agg.bi",
    "agg.selkind",
    "end.k",
    "end.hits",
    "end.numbers",
    "op.kind",
    "op.before_hit",
    "op.before_hit2",
    "op.after_mention",
    "val.in_vocab",
    "val.other_vocab",
    "val.len",
    "val.prev",
    "val.prev2",
    "val.next",
    "val.used",
    "val.inside_hit",
    "val.after_mention",
];

/// Hash of the template registry and dimensionality.
pub fn feature_space_version() -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(FEATURE_DIM as u64);
    for t in TEMPLATES {
        h.write(t.as_bytes());
        h.write_u8(0xff);
    }
    h.finish()
}

/// Sparse feature vector: sorted unique ids, no zero values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureVector {
    pub entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn from_raw(mut raw: Vec<(u32, f64)>) -> Self {
        raw.sort_unstable_by_key(|e| e.0);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(raw.len());
        for (id, v) in raw {
            match entries.last_mut() {
                Some(last) if last.0 == id => last.1 += v,
                _ => entries.push((id, v)),
            }
        }
        entries.retain(|e| e.1 != 0.0 && e.1.is_finite());
        FeatureVector { entries }
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| weights[i as usize] * v).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Hashed id of the feature named by `parts` (template name first).
pub fn feature_id(parts: &[&str]) -> u32 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write(p.as_bytes());
        h.write_u8(0xff);
    }
    (h.finish() as usize & (FEATURE_DIM - 1)) as u32
}

struct Builder {
    raw: Vec<(u32, f64)>,
}

impl Builder {
    fn add(&mut self, parts: &[&str], value: f64) {
        self.raw.push((feature_id(parts), value));
    }

    fn finish(self) -> FeatureVector {
        FeatureVector::from_raw(self.raw)
    }
}

/// A span of the question whose literal belongs to a column's cell values.
#[derive(Clone, Debug, PartialEq)]
struct Hit {
    start: usize,
    len: usize,
    value: Value,
}

/// Per-(question, table) analysis shared by every state of one parse.
#[derive(Debug)]
pub struct QuestionContext<'t> {
    pub tokens: Vec<String>,
    pub table: &'t Table,
    col_tokens: Vec<Vec<String>>,
    mentions: Vec<Vec<usize>>,
    hits: Vec<Vec<Hit>>,
    /// (start, len, literal) of every span usable as a value, in position order.
    spans: Vec<(usize, usize, Value)>,
    lex_scale: f64,
}

fn is_wordlike(tok: &str) -> bool {
    tok.chars().any(char::is_alphanumeric)
}

impl<'t> QuestionContext<'t> {
    pub fn new(tokens: &[String], table: &'t Table) -> Self {
        let tokens: Vec<String> = tokens.to_vec();
        let col_tokens: Vec<Vec<String>> = table.columns.iter().map(|c| c.name_tokens()).collect();
        let mentions = col_tokens
            .iter()
            .map(|ct| {
                if ct.is_empty() || ct.len() > tokens.len() {
                    return Vec::new();
                }
                (0..=tokens.len() - ct.len()).filter(|&i| tokens[i..i + ct.len()] == ct[..]).collect()
            })
            .collect();
        let mut spans = Vec::new();
        for start in 0..tokens.len() {
            for len in 1..=MAX_SPAN.min(tokens.len() - start) {
                let span = &tokens[start..start + len];
                if !span.iter().all(|t| is_wordlike(t)) {
                    break;
                }
                spans.push((start, len, Value::from_span(span)));
            }
        }
        let hits = (0..table.columns.len())
            .map(|c| {
                let vocab = table.vocabulary(c);
                spans
                    .iter()
                    .filter(|(_, _, v)| vocab.contains(v))
                    .map(|(start, len, v)| Hit { start: *start, len: *len, value: v.clone() })
                    .collect()
            })
            .collect();
        let lex_scale = 1.0 / (tokens.len().max(1) as f64).sqrt();
        QuestionContext { tokens, table, col_tokens, mentions, hits, spans, lex_scale }
    }

    /// Scale applied to per-token lexical features.
    pub fn lex_scale(&self) -> f64 {
        self.lex_scale
    }

    fn tok(&self, i: isize) -> &str {
        if i < 0 {
            "<s>"
        } else {
            self.tokens.get(i as usize).map_or("</s>", String::as_str)
        }
    }

    fn col_index(&self, name: &str) -> Result<usize, PolicyError> {
        self.table
            .column_index(name)
            .ok_or_else(|| PolicyError::Stage(format!("unknown column {name:?} in table {}", self.table.id)))
    }

    fn used_values(state: &State) -> Vec<&Value> {
        state
            .prefix
            .iter()
            .filter_map(|a| match a {
                Action::WhereVal(v) => Some(v),
                _ => None,
            })
            .collect()
    }

    fn val_candidates(&self, col: usize) -> Vec<Value> {
        let kind = self.table.columns[col].kind;
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (_, len, v) in &self.spans {
            let ok = match kind {
                ColumnKind::Number => *len == 1 && v.is_number(),
                ColumnKind::Text => !v.is_number(),
            };
            if ok && seen.insert(v.clone()) {
                out.push(v.clone());
            }
        }
        // Column literals found in the question are spans already; this only
        // matters for literals longer than MAX_SPAN, which never match.
        for h in &self.hits[col] {
            if seen.insert(h.value.clone()) {
                out.push(h.value.clone());
            }
        }
        out
    }

    fn next_where_columns(&self, state: &State) -> Result<Vec<usize>, PolicyError> {
        if state.num_conditions() >= MAX_CONDITIONS {
            return Ok(Vec::new());
        }
        let first = match state.last_where_col() {
            Some(c) => self.col_index(c)? + 1,
            None => 0,
        };
        Ok((first..self.table.columns.len()).filter(|&c| !self.val_candidates(c).is_empty()).collect())
    }

    /// Stage-legal actions in deterministic order.
    pub fn candidate_actions(&self, state: &State) -> Result<Vec<Action>, PolicyError> {
        let stage = state.stage().map_err(|e| PolicyError::Stage(e.to_string()))?;
        Ok(match stage {
            Stage::SelectCol => self.table.columns.iter().map(|c| Action::SelectCol(c.name.clone())).collect(),
            Stage::Agg => {
                let sel = state.sel_col().ok_or_else(|| PolicyError::Stage("missing select column".into()))?;
                let kind = self.table.columns[self.col_index(sel)?].kind;
                Agg::ALL.iter().filter(|a| a.admits(kind)).map(|a| Action::SetAgg(*a)).collect()
            }
            Stage::WhereCol => {
                let mut out: Vec<Action> = self
                    .next_where_columns(state)?
                    .into_iter()
                    .map(|c| Action::WhereCol(self.table.columns[c].name.clone()))
                    .collect();
                out.push(Action::EndWhere);
                out
            }
            Stage::Op => {
                let col = state.last_where_col().ok_or_else(|| PolicyError::Stage("missing condition column".into()))?;
                let kind = self.table.columns[self.col_index(col)?].kind;
                Op::ALL.iter().filter(|o| o.admits(kind)).map(|o| Action::WhereOp(*o)).collect()
            }
            Stage::Val => {
                let col = state.last_where_col().ok_or_else(|| PolicyError::Stage("missing condition column".into()))?;
                self.val_candidates(self.col_index(col)?).into_iter().map(Action::WhereVal).collect()
            }
            Stage::Done => return Err(PolicyError::Stage("trajectory already complete".into())),
        })
    }

    /// Candidates with their feature vectors.
    pub fn featurize(&self, state: &State) -> Result<Vec<(Action, FeatureVector)>, PolicyError> {
        let stage = state.stage().map_err(|e| PolicyError::Stage(e.to_string()))?;
        let cands = self.candidate_actions(state)?;
        cands
            .into_iter()
            .map(|a| {
                let f = self.features(state, stage, &a)?;
                Ok((a, f))
            })
            .collect()
    }

    fn features(&self, state: &State, stage: Stage, action: &Action) -> Result<FeatureVector, PolicyError> {
        let mut b = Builder { raw: Vec::with_capacity(64) };
        let st = stage.as_str();
        match action {
            Action::SelectCol(c) | Action::WhereCol(c) => {
                b.add(&["bias", st, "col"], 1.0);
                self.column_features(&mut b, state, st, self.col_index(c)?);
            }
            Action::SetAgg(agg) => {
                let a = agg.as_str();
                b.add(&["bias", st, a], 1.0);
                let sel = self.col_index(state.sel_col().unwrap_or_default())?;
                b.add(&["agg.selkind", a, self.table.columns[sel].kind.as_str()], 1.0);
                for (i, t) in self.tokens.iter().enumerate() {
                    b.add(&["agg.uni", a, t], 1.0);
                    b.add(&["agg.bi", a, self.tok(i as isize - 1), t], 1.0);
                }
            }
            Action::EndWhere => self.end_features(&mut b, state)?,
            Action::WhereOp(op) => self.op_features(&mut b, state, *op)?,
            Action::WhereVal(v) => self.val_features(&mut b, state, v)?,
        }
        Ok(b.finish())
    }

    fn column_features(&self, b: &mut Builder, state: &State, st: &str, col: usize) {
        let ct = &self.col_tokens[col];
        let kind = self.table.columns[col].kind.as_str();
        if !ct.is_empty() {
            let matched = ct.iter().filter(|t| self.tokens.contains(t)).count();
            b.add(&["col.match", st], matched as f64 / ct.len() as f64);
        }
        for &m in &self.mentions[col] {
            b.add(&["col.mention.prev", st, self.tok(m as isize - 1)], 1.0);
            b.add(&["col.mention.next", st, self.tok((m + ct.len()) as isize)], 1.0);
        }
        let s = self.lex_scale;
        for (i, q) in self.tokens.iter().enumerate() {
            for c in ct {
                b.add(&["col.lex", st, c, q], s);
                b.add(&["col.lex.next", st, c, q, self.tok(i as isize + 1)], s);
                b.add(&["col.lex.prev", st, c, self.tok(i as isize - 1), q], s);
            }
            b.add(&["col.kind.tok", st, kind, q], s);
        }
        if !self.hits[col].is_empty() {
            b.add(&["col.vocab_hit", st], 1.0);
        }
        if state.sel_col() == Some(self.table.columns[col].name.as_str()) {
            b.add(&["col.is_sel", st], 1.0);
        }
    }

    fn end_features(&self, b: &mut Builder, state: &State) -> Result<(), PolicyError> {
        let k = state.num_conditions().to_string();
        b.add(&["bias", "END"], 1.0);
        b.add(&["end.k", &k], 1.0);
        let used = Self::used_values(state);
        let remaining = self
            .next_where_columns(state)?
            .into_iter()
            .filter(|&c| self.hits[c].iter().any(|h| !used.contains(&&h.value)))
            .count()
            .min(3)
            .to_string();
        b.add(&["end.hits", &k, &remaining], 1.0);
        let numbers = self.tokens.iter().filter(|t| t.parse::<f64>().is_ok()).count();
        let used_numbers = used.iter().filter(|v| v.is_number()).count();
        b.add(&["end.numbers", &k, &numbers.saturating_sub(used_numbers).min(3).to_string()], 1.0);
        Ok(())
    }

    fn op_features(&self, b: &mut Builder, state: &State, op: Op) -> Result<(), PolicyError> {
        let o = op.as_str();
        let col = self.col_index(state.last_where_col().unwrap_or_default())?;
        b.add(&["bias", "OP", o], 1.0);
        b.add(&["op.kind", o, self.table.columns[col].kind.as_str()], 1.0);
        let used = Self::used_values(state);
        for h in self.hits[col].iter().filter(|h| !used.contains(&&h.value)) {
            let s = h.start as isize;
            b.add(&["op.before_hit", o, self.tok(s - 1)], 1.0);
            b.add(&["op.before_hit2", o, self.tok(s - 2), self.tok(s - 1)], 1.0);
        }
        let len = self.col_tokens[col].len();
        for &m in &self.mentions[col] {
            for j in 0..3 {
                b.add(&["op.after_mention", o, self.tok((m + len + j) as isize)], 1.0);
            }
        }
        Ok(())
    }

    fn val_features(&self, b: &mut Builder, state: &State, v: &Value) -> Result<(), PolicyError> {
        let col = self.col_index(state.last_where_col().unwrap_or_default())?;
        b.add(&["bias", "VAL"], 1.0);
        let in_vocab = self.table.vocabulary(col).contains(v);
        if in_vocab {
            b.add(&["val.in_vocab"], 1.0);
        } else if (0..self.table.columns.len()).any(|c| self.table.vocabulary(c).contains(v)) {
            b.add(&["val.other_vocab"], 1.0);
        }
        if Self::used_values(state).contains(&v) {
            b.add(&["val.used"], 1.0);
        }
        let len = v.tokens().len();
        b.add(&["val.len", &len.to_string()], 1.0);
        // Context of the first occurrence of the literal.
        if let Some((start, _, _)) = self.spans.iter().find(|(_, l, s)| *l == len && s == v) {
            let s = *start as isize;
            b.add(&["val.prev", self.tok(s - 1)], 1.0);
            b.add(&["val.prev2", self.tok(s - 2), self.tok(s - 1)], 1.0);
            b.add(&["val.next", self.tok(s + len as isize)], 1.0);
            let inside = self.hits.iter().flatten().any(|h| {
                h.len > len && h.start <= *start && start + len <= h.start + h.len
            });
            if inside {
                b.add(&["val.inside_hit"], 1.0);
            }
            let clen = self.col_tokens[col].len();
            if self.mentions[col].iter().any(|&m| m + clen <= *start && *start <= m + clen + 3) {
                b.add(&["val.after_mention"], 1.0);
            }
        }
        Ok(())
    }
}
