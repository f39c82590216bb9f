//! Append-only JSONL store of examples collected from live sessions.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use neil_core::interaction::StepLog;
use neil_core::policy::{Dataset, PolicyError, QuestionContext};
use neil_core::sql::{tokenize, State, Table};
use serde::{Deserialize, Serialize};

/// A transcript line tagged with its session. Question and table are
/// repeated on every line so records replay without the session table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub session_id: String,
    pub question: String,
    pub table_id: String,
    #[serde(flatten)]
    pub step: StepLog,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("record for session {0} references unknown table {1}")]
    UnknownTable(String, String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub struct FeedbackStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl FeedbackStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(FeedbackStore { path: path.to_owned(), file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, records: &[FeedbackRecord]) -> Result<(), StoreError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).map_err(std::io::Error::from)?;
            buf.push(b'\n');
        }
        let mut file = self.file.lock().expect("store lock poisoned");
        file.write_all(&buf)?;
        file.flush()?;
        Ok(())
    }

    pub fn read_all(&self) -> Result<Vec<FeedbackRecord>, StoreError> {
        let _guard = self.file.lock().expect("store lock poisoned");
        read_records(&self.path)
    }
}

pub fn read_records(path: &Path) -> Result<Vec<FeedbackRecord>, StoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| StoreError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

/// Rebuilds each record's decoding state from the executed actions of the
/// preceding records of its session and compiles the examples.
pub fn replay(records: &[FeedbackRecord], tables: &HashMap<String, Arc<Table>>) -> Result<Dataset, StoreError> {
    let mut states: HashMap<&str, State> = HashMap::new();
    let mut data = Dataset::new();
    for r in records {
        let table = tables.get(&r.table_id).ok_or_else(|| StoreError::UnknownTable(r.session_id.clone(), r.table_id.clone()))?;
        let state = states
            .entry(r.session_id.as_str())
            .or_insert_with(|| State::initial(tokenize(&r.question).into(), Arc::from(r.table_id.as_str())));
        let ctx = QuestionContext::new(&state.question, table);
        data.push_state(&ctx, state, &r.step.executed, f64::from(r.step.weight))?;
        *state = state.child(r.step.executed.clone());
    }
    Ok(data)
}
