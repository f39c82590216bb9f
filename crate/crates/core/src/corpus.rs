//! Deterministic synthetic tables, templated questions and gold sketch
//! queries, plus the init/stream/validation/test split protocol.
//!
//! Questions are produced from templates with controlled lexical noise:
//! aggregator and operator phrases and column mentions are swapped for
//! synonyms at `lexical_variation` rate, and `distractor_rate` of the
//! questions mention an unrelated column. Condition values are always copied
//! verbatim into the question.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sql::{tokenize, Agg, Column, ColumnKind, Condition, Op, SqlError, SqlQuery, Table, Value};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0} is outside the allowed range {1}")]
    Range(String, &'static str),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("item {id} is invalid: {source}")]
    InvalidItem { id: String, source: SqlError },
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A generator-side column description: schema entry plus the pool of cell
/// values it draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub vocabulary: Vec<Value>,
}

/// A question pattern. `{agg}`, `{sel}` and `{conds}` expand to the
/// aggregator phrase, the select-column mention and the condition phrases.
/// A fixed `agg` forces the aggregator of every item drawn from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agg: Option<Agg>,
}

impl QuestionTemplate {
    pub fn new(pattern: &str) -> Self {
        QuestionTemplate { pattern: pattern.to_owned(), agg: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub num_tables: usize,
    pub rows_per_table: usize,
    pub min_columns: usize,
    pub max_columns: usize,
    pub num_items: usize,
    pub templates: Vec<QuestionTemplate>,
    /// Probability of replacing a canonical phrase or column mention by a synonym.
    pub lexical_variation: f64,
    /// Probability of prefixing the question with a mention of an unrelated column.
    pub distractor_rate: f64,
    /// Weight of drawing `k` conditions, indexed by `k`.
    pub condition_weights: Vec<f64>,
    pub agg_weights: BTreeMap<Agg, f64>,
    /// Operator weights for conditions on NUMBER columns (TEXT columns always use EQ).
    pub op_weights: BTreeMap<Op, f64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_tables: 200,
            rows_per_table: 12,
            min_columns: 4,
            max_columns: 7,
            num_items: 6500,
            templates: vec![
                QuestionTemplate::new("{agg} {sel} {conds} ?"),
                QuestionTemplate::new("{conds} , {agg} {sel} ?"),
                QuestionTemplate::new("{agg} {sel} in the table {conds} ?"),
            ],
            lexical_variation: 0.3,
            distractor_rate: 0.2,
            condition_weights: vec![0.2, 0.5, 0.3],
            agg_weights: [(Agg::None, 0.4), (Agg::Count, 0.2), (Agg::Max, 0.1), (Agg::Min, 0.1), (Agg::Sum, 0.1), (Agg::Avg, 0.1)]
                .into_iter()
                .collect(),
            op_weights: [(Op::Eq, 0.4), (Op::Gt, 0.3), (Op::Lt, 0.3)].into_iter().collect(),
        }
    }
}

impl GenConfig {
    fn check(&self) -> Result<(), CorpusError> {
        let fail = |m: &str| Err(CorpusError::Config(m.to_owned()));
        if self.templates.is_empty() {
            return fail("template set is empty");
        }
        if self.num_tables == 0 {
            return fail("table count is zero");
        }
        if self.rows_per_table == 0 {
            return fail("rows per table is zero");
        }
        if self.min_columns < 2 || self.min_columns > self.max_columns {
            return fail("column range must satisfy 2 <= min_columns <= max_columns");
        }
        if self.max_columns > COLUMN_POOL.len() {
            return fail("max_columns exceeds the column pool");
        }
        if self.condition_weights.is_empty() || self.condition_weights.len() > crate::sql::MAX_CONDITIONS + 1 {
            return fail("condition_weights must cover 0..=3 conditions at most");
        }
        for (name, p) in [("lexical_variation", self.lexical_variation), ("distractor_rate", self.distractor_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CorpusError::Range(format!("{name}={p}"), "[0, 1]"));
            }
        }
        for t in &self.templates {
            if t.agg.is_none() && !t.pattern.contains("{agg}") {
                return fail("templates without {agg} must fix the aggregator");
            }
        }
        Ok(())
    }
}

/// One question with its table and gold parse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    #[serde(skip)]
    pub id: String,
    pub question: String,
    pub table_id: String,
    pub gold: SqlQuery,
}

impl CorpusItem {
    pub fn tokens(&self) -> Arc<[String]> {
        tokenize(&self.question).into()
    }

    /// Gold is executable against its table and every condition literal
    /// occurs verbatim in the question.
    pub fn check(&self, table: &Table) -> Result<(), CorpusError> {
        let invalid = |source| CorpusError::InvalidItem { id: self.id.clone(), source };
        self.gold.validate(table).map_err(invalid)?;
        let tokens = tokenize(&self.question);
        for c in &self.gold.conds {
            let lit = c.value.tokens();
            if !tokens.windows(lit.len()).any(|w| w == lit.as_slice()) {
                return Err(invalid(SqlError::Stage(format!("literal {} not in question", c.value))));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub tables: Vec<Table>,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn new(tables: Vec<Table>, items: Vec<CorpusItem>) -> Result<Self, CorpusError> {
        let corpus = Corpus { tables, items };
        let index = corpus.table_index();
        for item in &corpus.items {
            let t = index.get(item.table_id.as_str()).ok_or_else(|| CorpusError::UnknownTable(item.table_id.clone()))?;
            item.check(t)?;
        }
        Ok(corpus)
    }

    pub fn table_index(&self) -> HashMap<&str, &Table> {
        self.tables.iter().map(|t| (t.id.as_str(), t)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(TABLES_FILE), &self.tables)?;
        write_jsonl(&dir.join(ITEMS_FILE), &self.items)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let tables: Vec<Table> = read_jsonl(&dir.join(TABLES_FILE))?;
        for t in &tables {
            t.validate()?;
        }
        let mut items: Vec<CorpusItem> = read_jsonl(&dir.join(ITEMS_FILE))?;
        for (i, item) in items.iter_mut().enumerate() {
            item.id = item_id(i);
        }
        Corpus::new(tables, items)
    }
}

pub const TABLES_FILE: &str = "tables.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";

fn item_id(index: usize) -> String {
    format!("q{index:06}")
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

struct PoolColumn {
    name: &'static str,
    kind: ColumnKind,
    synonyms: &'static [&'static str],
    range: (u32, u32),
}

const fn text(name: &'static str, synonyms: &'static [&'static str]) -> PoolColumn {
    PoolColumn { name, kind: ColumnKind::Text, synonyms, range: (0, 0) }
}

const fn num(name: &'static str, synonyms: &'static [&'static str], lo: u32, hi: u32) -> PoolColumn {
    PoolColumn { name, kind: ColumnKind::Number, synonyms, range: (lo, hi) }
}

const COLUMN_POOL: &[PoolColumn] = &[
    text("player", &["athlete", "competitor"]),
    text("team", &["squad", "side"]),
    text("city", &["town", "location"]),
    text("country", &["nation", "nationality"]),
    text("school", &["college", "university"]),
    text("position", &["role"]),
    text("coach", &["manager", "trainer"]),
    text("venue", &["stadium", "ground"]),
    text("opponent", &["rival", "opposition"]),
    text("director", &["filmmaker"]),
    text("artist", &["performer", "singer"]),
    text("party", &["affiliation"]),
    text("district", &["constituency"]),
    text("title", &["name"]),
    num("age", &["years old"], 18, 45),
    num("year", &["season"], 1960, 2020),
    num("points", &["pts", "score"], 0, 120),
    num("goals", &["scored"], 0, 40),
    num("games", &["matches", "appearances"], 1, 82),
    num("wins", &["victories"], 0, 60),
    num("rank", &["ranking", "place"], 1, 50),
    num("attendance", &["crowd", "spectators"], 1000, 9000),
    num("votes", &["ballots"], 100, 5000),
    num("height", &["tallness"], 150, 220),
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tor", "vel", "sa", "din", "mar", "lu", "zen", "pa", "ri", "no", "ga", "shi", "bel", "ton", "qua", "fe",
    "dro", "wen", "kib", "sol", "tam", "yor", "hul", "nex",
];

struct Phrases {
    canonical: &'static str,
    variants: &'static [&'static str],
}

fn agg_phrases(agg: Agg) -> Phrases {
    match agg {
        Agg::None => Phrases { canonical: "what is the", variants: &["which", "name the", "list the", "tell me the"] },
        Agg::Count => Phrases { canonical: "how many", variants: &["count the", "number of", "what is the total number of"] },
        Agg::Max => Phrases { canonical: "what is the highest", variants: &["what is the maximum", "largest", "what is the top"] },
        Agg::Min => Phrases { canonical: "what is the lowest", variants: &["what is the minimum", "smallest", "what is the least"] },
        Agg::Sum => Phrases { canonical: "what is the total", variants: &["sum of", "what is the combined", "add up the"] },
        Agg::Avg => Phrases { canonical: "what is the average", variants: &["mean", "what is the typical", "average of"] },
    }
}

fn op_phrases(op: Op) -> Phrases {
    match op {
        Op::Eq => Phrases { canonical: "is", variants: &["equals", "is equal to"] },
        Op::Gt => Phrases { canonical: "more than", variants: &["greater than", "above", "over"] },
        Op::Lt => Phrases { canonical: "less than", variants: &["below", "under", "fewer than"] },
    }
}

const CONNECTORS: Phrases = Phrases { canonical: "when", variants: &["where", "with", "for", "if"] };

struct Generator<'a> {
    cfg: &'a GenConfig,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn pick(&mut self, phrases: &Phrases) -> &'static str {
        if !phrases.variants.is_empty() && self.rng.random_bool(self.cfg.lexical_variation) {
            phrases.variants.choose(&mut self.rng).expect("non-empty")
        } else {
            phrases.canonical
        }
    }

    fn mention(&mut self, col: &PoolColumn) -> String {
        if !col.synonyms.is_empty() && self.rng.random_bool(self.cfg.lexical_variation) {
            col.synonyms.choose(&mut self.rng).expect("non-empty").to_string()
        } else {
            col.name.to_owned()
        }
    }

    fn pseudo_word(&mut self) -> String {
        let n = self.rng.random_range(2..=3);
        (0..n).map(|_| *SYLLABLES.choose(&mut self.rng).expect("non-empty")).collect()
    }

    fn table(&mut self, id: String) -> (Table, Vec<&'static PoolColumn>) {
        let ncols = self.rng.random_range(self.cfg.min_columns..=self.cfg.max_columns);
        let texts: Vec<usize> = (0..COLUMN_POOL.len()).filter(|&i| COLUMN_POOL[i].kind == ColumnKind::Text).collect();
        let nums: Vec<usize> = (0..COLUMN_POOL.len()).filter(|&i| COLUMN_POOL[i].kind == ColumnKind::Number).collect();
        // At least one column of each kind; the rest drawn from the whole pool.
        let mut chosen = vec![*texts.choose(&mut self.rng).unwrap(), *nums.choose(&mut self.rng).unwrap()];
        let mut rest: Vec<usize> = (0..COLUMN_POOL.len()).filter(|i| !chosen.contains(i)).collect();
        rest.shuffle(&mut self.rng);
        chosen.extend(rest.into_iter().take(ncols - 2));
        chosen.shuffle(&mut self.rng);
        let pool: Vec<&'static PoolColumn> = chosen.iter().map(|&i| &COLUMN_POOL[i]).collect();

        let rows = self.cfg.rows_per_table;
        let specs: Vec<ColumnSpec> = pool.iter().map(|pc| self.column_spec(pc, rows)).collect();
        let data: Vec<Vec<Value>> = (0..rows)
            .map(|_| specs.iter().map(|s| s.vocabulary.choose(&mut self.rng).expect("non-empty").clone()).collect())
            .collect();
        let columns = specs.into_iter().map(|s| Column::new(s.name, s.kind)).collect();
        (Table::new(id, columns, data).expect("generator emits well-typed rows"), pool)
    }

    fn column_spec(&mut self, pc: &PoolColumn, rows: usize) -> ColumnSpec {
        let size = (rows / 2 + 2).max(2);
        let mut vocabulary: Vec<Value> = Vec::with_capacity(size);
        let mut guard = 0;
        while vocabulary.len() < size && guard < 100 * size {
            guard += 1;
            let v = match pc.kind {
                ColumnKind::Text => {
                    let words = if self.rng.random_bool(0.5) { 1 } else { 2 };
                    Value::Text((0..words).map(|_| self.pseudo_word()).collect::<Vec<_>>().join(" "))
                }
                ColumnKind::Number => Value::Number(f64::from(self.rng.random_range(pc.range.0..=pc.range.1))),
            };
            if !vocabulary.contains(&v) {
                vocabulary.push(v);
            }
        }
        ColumnSpec { name: pc.name.to_owned(), kind: pc.kind, vocabulary }
    }

    fn item(&mut self, table: &Table, pool: &[&'static PoolColumn]) -> CorpusItem {
        let template = self.cfg.templates.choose(&mut self.rng).expect("checked non-empty").clone();
        let ncols = table.columns.len();
        let cond_dist = WeightedIndex::new(&self.cfg.condition_weights).expect("validated weights");
        let k = cond_dist.sample(&mut self.rng).min(ncols - 1);

        let sel = self.rng.random_range(0..ncols);
        let sel_kind = table.columns[sel].kind;
        let agg = match template.agg {
            Some(a) if a.admits(sel_kind) => a,
            Some(_) => Agg::Count,
            None => {
                let allowed: Vec<(Agg, f64)> = self.cfg.agg_weights.iter().filter(|(a, _)| a.admits(sel_kind)).map(|(a, w)| (*a, *w)).collect();
                let dist = WeightedIndex::new(allowed.iter().map(|x| x.1)).expect("agg weights");
                allowed[dist.sample(&mut self.rng)].0
            }
        };

        let mut others: Vec<usize> = (0..ncols).filter(|&c| c != sel).collect();
        others.shuffle(&mut self.rng);
        let mut cond_cols: Vec<usize> = others.into_iter().take(k).collect();
        cond_cols.sort_unstable();
        let ops: Vec<(Op, f64)> = self.cfg.op_weights.iter().map(|(o, w)| (*o, *w)).collect();
        let op_dist = WeightedIndex::new(ops.iter().map(|x| x.1)).expect("op weights");
        let conds: Vec<Condition> = cond_cols
            .iter()
            .map(|&c| {
                let col = &table.columns[c];
                let op = if col.kind == ColumnKind::Number { ops[op_dist.sample(&mut self.rng)].0 } else { Op::Eq };
                let row = self.rng.random_range(0..table.rows.len());
                Condition::new(col.name.clone(), op, table.rows[row][c].clone())
            })
            .collect();
        let gold = SqlQuery::new(table.columns[sel].name.clone(), agg, conds);

        let agg_text = self.pick(&agg_phrases(agg));
        let sel_text = self.mention(pool[sel]);
        let mut cond_parts = Vec::new();
        for (i, (c, &col)) in gold.conds.iter().zip(&cond_cols).enumerate() {
            let lead = if i == 0 { self.pick(&CONNECTORS) } else { "and" };
            let m = self.mention(pool[col]);
            let op_text = self.pick(&op_phrases(c.op));
            cond_parts.push(format!("{lead} {m} {op_text} {}", c.value));
        }
        let mut text = template
            .pattern
            .replace("{agg}", agg_text)
            .replace("{sel}", &sel_text)
            .replace("{conds}", &cond_parts.join(" "));
        if self.rng.random_bool(self.cfg.distractor_rate) && ncols > 1 + k {
            let unused: Vec<usize> = (0..ncols).filter(|c| *c != sel && !cond_cols.contains(c)).collect();
            let d = *unused.choose(&mut self.rng).expect("ncols > 1 + k");
            let m = self.mention(pool[d]);
            text = format!("looking at {m} records , {text}");
        }
        CorpusItem { id: String::new(), question: normalize(&text), table_id: table.id.clone(), gold }
    }
}

/// Lowercases, collapses whitespace and drops dangling commas left by empty
/// template slots.
fn normalize(text: &str) -> String {
    let tokens = tokenize(text);
    let mut out: Vec<&str> = Vec::with_capacity(tokens.len());
    for t in &tokens {
        if t == "," && (out.is_empty() || out.last() == Some(&",")) {
            continue;
        }
        out.push(t);
    }
    if out.last() == Some(&",") {
        out.pop();
    }
    out.join(" ")
}

/// Generates tables and items; deterministic in `(cfg, seed)`.
pub fn generate_corpus(cfg: &GenConfig, seed: u64) -> Result<Corpus, CorpusError> {
    cfg.check()?;
    let mut g = Generator { cfg, rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut tables = Vec::with_capacity(cfg.num_tables);
    let mut pools = Vec::with_capacity(cfg.num_tables);
    for t in 0..cfg.num_tables {
        let (table, pool) = g.table(format!("t{t:04}"));
        tables.push(table);
        pools.push(pool);
    }
    let mut items = Vec::with_capacity(cfg.num_items);
    for i in 0..cfg.num_items {
        let t = g.rng.random_range(0..tables.len());
        let mut item = g.item(&tables[t], &pools[t]);
        item.id = item_id(i);
        items.push(item);
    }
    Corpus::new(tables, items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub init_fraction: f64,
    pub validation_size: usize,
    pub test_size: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { init_fraction: 0.1, validation_size: 500, test_size: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub init_train: Vec<CorpusItem>,
    pub stream: Vec<CorpusItem>,
    pub validation: Vec<CorpusItem>,
    pub test: Vec<CorpusItem>,
    pub seed: u64,
    pub init_fraction: f64,
}

/// Validation and test are the leading `validation_size + test_size` items;
/// the remainder is the training pool. Its first
/// `round(init_fraction * |pool|)` items initialize the parser and the rest
/// form the stream, shuffled by `seed`. Membership is seed-independent.
pub fn split_corpus(items: &[CorpusItem], cfg: &SplitConfig, seed: u64) -> Result<CorpusSplits, CorpusError> {
    if !(cfg.init_fraction > 0.0 && cfg.init_fraction <= 1.0) {
        return Err(CorpusError::Range(format!("init_fraction={}", cfg.init_fraction), "(0, 1]"));
    }
    if items.is_empty() {
        return Err(CorpusError::Config("no items to split".into()));
    }
    let held = cfg.validation_size + cfg.test_size;
    if held >= items.len() {
        return Err(CorpusError::Config(format!("holdouts ({held}) leave no training pool out of {} items", items.len())));
    }
    let validation = items[..cfg.validation_size].to_vec();
    let test = items[cfg.validation_size..held].to_vec();
    let pool = &items[held..];
    let n_init = ((cfg.init_fraction * pool.len() as f64).round() as usize).clamp(0, pool.len());
    let init_train = pool[..n_init].to_vec();
    let mut stream = pool[n_init..].to_vec();
    stream.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(CorpusSplits { init_train, stream, validation, test, seed, init_fraction: cfg.init_fraction })
}
