//! HTTP front end for live parse sessions. A session pauses at every
//! uncertain step until the user answers; every executed step is appended
//! to the feedback store, which `/admin/retrain` folds into a new policy.

pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State as AxState};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use neil_core::interaction::{InteractionConfig, InteractionError, ParseSession, StepLog, UserResponse, NONE_OPTION_LABEL};
use neil_core::policy::{train, Dataset, EvalSet, Policy, QuestionContext, TrainConfig};
use neil_core::sql::{execute, tokenize, ColumnKind, ExecResult, Stage, Table};
use serde::{Deserialize, Serialize};

pub use store::{FeedbackRecord, FeedbackStore, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct ServiceConfig {
    pub interaction: InteractionConfig,
    pub train: TrainConfig,
    pub feedback_path: PathBuf,
    /// Sessions are written here after every change and restored on start.
    pub snapshot_path: Option<PathBuf>,
}

/// What a retrain starts from: the initial weights and the simulated-data
/// seed set. Live feedback is appended to `base` but never written into it.
pub struct RetrainBase {
    pub init: Policy,
    pub base: Dataset,
    pub validation: Option<EvalSet>,
}

struct Session {
    id: String,
    question: String,
    table: Arc<Table>,
    policy: Arc<Policy>,
    parse: ParseSession,
    stored: usize,
}

#[derive(Serialize, Deserialize)]
struct SessionSnapshot {
    id: String,
    question: String,
    table_id: String,
    parse: ParseSession,
    stored: usize,
}

pub struct AppState {
    tables: HashMap<String, Arc<Table>>,
    policy: RwLock<Arc<Policy>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    store: FeedbackStore,
    retrain_base: RetrainBase,
    retraining: Arc<AtomicBool>,
    iteration: AtomicUsize,
    cfg: ServiceConfig,
    snapshot_lock: Mutex<()>,
}

/// Held while a retrain runs; a second retrain is refused until it drops.
pub struct RetrainGuard(Arc<AtomicBool>);

impl Drop for RetrainGuard {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

impl AppState {
    pub fn new(tables: Vec<Table>, policy: Policy, retrain_base: RetrainBase, cfg: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        cfg.interaction.check()?;
        let store = FeedbackStore::open(&cfg.feedback_path)?;
        let state = AppState {
            tables: tables.into_iter().map(|t| (t.id.clone(), Arc::new(t))).collect(),
            policy: RwLock::new(Arc::new(policy)),
            sessions: RwLock::new(HashMap::new()),
            store,
            retrain_base,
            retraining: Arc::new(AtomicBool::new(false)),
            iteration: AtomicUsize::new(0),
            cfg,
            snapshot_lock: Mutex::new(()),
        };
        if let Some(path) = state.cfg.snapshot_path.clone() {
            if path.exists() {
                state.restore(&path)?;
            }
        }
        Ok(Arc::new(state))
    }

    pub fn policy(&self) -> Arc<Policy> {
        Arc::clone(&self.policy.read().expect("policy lock poisoned"))
    }

    pub fn store(&self) -> &FeedbackStore {
        &self.store
    }

    pub fn try_begin_retrain(&self) -> Option<RetrainGuard> {
        self.retraining.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).ok().map(|_| RetrainGuard(Arc::clone(&self.retraining)))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .expect("session lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }

    /// Appends the steps executed since the last flush.
    fn flush(&self, s: &mut Session) -> Result<(), ServiceError> {
        let records: Vec<FeedbackRecord> = s.parse.log()[s.stored..]
            .iter()
            .map(|step| FeedbackRecord { session_id: s.id.clone(), question: s.question.clone(), table_id: s.table.id.clone(), step: step.clone() })
            .collect();
        self.store.append(&records)?;
        s.stored = s.parse.log().len();
        Ok(())
    }

    fn snapshot(&self) -> Result<(), ServiceError> {
        let Some(path) = &self.cfg.snapshot_path else { return Ok(()) };
        let _guard = self.snapshot_lock.lock().expect("snapshot lock poisoned");
        let sessions: Vec<Arc<Mutex<Session>>> = self.sessions.read().expect("session lock poisoned").values().cloned().collect();
        let mut snaps: Vec<SessionSnapshot> = sessions
            .iter()
            .map(|s| {
                let s = s.lock().expect("session lock poisoned");
                SessionSnapshot { id: s.id.clone(), question: s.question.clone(), table_id: s.table.id.clone(), parse: s.parse.clone(), stored: s.stored }
            })
            .collect();
        snaps.sort_by(|a, b| a.id.cmp(&b.id));
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(&snaps).map_err(|e| ServiceError::Snapshot(e.to_string()))?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Restored sessions continue under the current policy.
    fn restore(&self, path: &Path) -> Result<(), ServiceError> {
        let snaps: Vec<SessionSnapshot> = serde_json::from_slice(&std::fs::read(path)?).map_err(|e| ServiceError::Snapshot(e.to_string()))?;
        let policy = self.policy();
        let mut sessions = self.sessions.write().expect("session lock poisoned");
        for s in snaps {
            let table = self.tables.get(&s.table_id).cloned().ok_or_else(|| ServiceError::Snapshot(format!("unknown table {}", s.table_id)))?;
            let session = Session { id: s.id.clone(), question: s.question, table, policy: Arc::clone(&policy), parse: s.parse, stored: s.stored };
            sessions.insert(s.id, Arc::new(Mutex::new(session)));
        }
        log::info!("restored {} sessions from {}", sessions.len(), path.display());
        Ok(())
    }

    /// Trains from the retrain base on the base data plus every stored
    /// record and swaps the result in. Sessions already running keep the
    /// policy they started with.
    pub fn retrain(&self) -> Result<RetrainReport, ServiceError> {
        let records = self.store.read_all()?;
        let previous = self.policy();
        let val = self.retrain_base.validation.as_ref();
        let previous_val = val.map(|v| v.accuracy(&previous));
        if records.is_empty() {
            return Ok(RetrainReport {
                iteration: self.iteration.load(Ordering::SeqCst),
                val_accuracy: previous_val,
                previous_val_accuracy: previous_val,
                records: 0,
                weighted_records: 0,
                updated: false,
            });
        }
        let feedback = store::replay(&records, &self.tables)?;
        let mut data = self.retrain_base.base.clone();
        data.append(&feedback);
        let outcome = train(&self.retrain_base.init, &data, &self.cfg.train, val).map_err(StoreError::Policy)?;
        let val_accuracy = outcome.validation_accuracy;
        *self.policy.write().expect("policy lock poisoned") = Arc::new(outcome.policy);
        let iteration = self.iteration.fetch_add(1, Ordering::SeqCst) + 1;
        log::info!("retrain {iteration}: {} records, validation {:?} -> {:?}", records.len(), previous_val, val_accuracy);
        Ok(RetrainReport {
            iteration,
            val_accuracy,
            previous_val_accuracy: previous_val,
            records: records.len(),
            weighted_records: feedback.effective_len(),
            updated: true,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub iteration: usize,
    pub val_accuracy: Option<f64>,
    pub previous_val_accuracy: Option<f64>,
    pub records: usize,
    pub weighted_records: usize,
    pub updated: bool,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        log::error!("{e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::internal(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub question: String,
    pub table_id: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub choice_index: Option<usize>,
    pub none_of_above: Option<bool>,
}

impl AnswerRequest {
    fn response(&self) -> Result<UserResponse, ApiError> {
        match (self.choice_index, self.none_of_above) {
            (Some(i), None | Some(false)) => Ok(UserResponse::Choice(i)),
            (None, Some(true)) => Ok(UserResponse::NoneOfAbove),
            (Some(_), Some(true)) => Err(ApiError::new(StatusCode::BAD_REQUEST, "choice_index and none_of_above are mutually exclusive")),
            (None, _) => Err(ApiError::new(StatusCode::BAD_REQUEST, "expected choice_index or none_of_above: true")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionStatus {
    Active,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionView {
    pub index: usize,
    pub label: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingView {
    pub slot: Stage,
    pub text: String,
    pub options: Vec<OptionView>,
    /// Label of the none-of-the-above option, absent when every candidate is shown.
    pub none_option: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: SessionStatus,
    pub question: String,
    pub table_id: String,
    /// Labels of the actions executed so far.
    pub parse: Vec<String>,
    pub sql: Option<String>,
    pub result: Option<ExecResult>,
    pub pending: Option<PendingView>,
    pub interaction_count: usize,
    pub transcript: Vec<StepLog>,
}

fn view(s: &Session) -> Result<SessionView, ApiError> {
    let complete = s.parse.is_complete();
    let (sql, result) = if complete {
        let q = s.parse.query(&s.table).map_err(ApiError::internal)?;
        let r = execute(&q, &s.table).map_err(ApiError::internal)?;
        (Some(q.render()), Some(r))
    } else {
        (None, None)
    };
    let pending = s.parse.pending().map(|q| PendingView {
        slot: q.slot,
        text: q.text.clone(),
        options: q
            .option_labels
            .iter()
            .zip(&q.option_probs)
            .enumerate()
            .map(|(index, (label, p))| OptionView { index, label: label.clone(), probability: *p })
            .collect(),
        none_option: q.includes_none.then(|| NONE_OPTION_LABEL.to_owned()),
    });
    Ok(SessionView {
        session_id: s.id.clone(),
        status: if complete { SessionStatus::Complete } else { SessionStatus::Active },
        question: s.question.clone(),
        table_id: s.table.id.clone(),
        parse: s.parse.actions().iter().map(|a| a.label()).collect(),
        sql,
        result,
        pending,
        interaction_count: s.parse.interaction_count(),
        transcript: s.parse.log().to_vec(),
    })
}

fn interaction_error(e: InteractionError) -> ApiError {
    match e {
        InteractionError::NoPending | InteractionError::Complete => ApiError::new(StatusCode::CONFLICT, e.to_string()),
        InteractionError::ChoiceOutOfRange { .. } => ApiError::new(StatusCode::BAD_REQUEST, e.to_string()),
        other => ApiError::internal(other),
    }
}

async fn create_session(AxState(app): AxState<Arc<AppState>>, body: Result<Json<CreateSession>, JsonRejection>) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let Json(req) = body?;
    let tokens: Arc<[String]> = tokenize(&req.question).into();
    if tokens.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "question: must contain at least one token"));
    }
    let table = app.tables.get(&req.table_id).cloned().ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown table {}", req.table_id)))?;
    let id = uuid::Uuid::new_v4().to_string();
    let policy = app.policy();
    let mut parse = ParseSession::new(Arc::clone(&tokens), &table.id, app.cfg.interaction, app.iteration.load(Ordering::SeqCst), &id).map_err(ApiError::internal)?;
    let ctx = QuestionContext::new(&tokens, &table);
    parse.advance(&policy, &ctx).map_err(interaction_error)?;
    let mut session = Session { id: id.clone(), question: req.question, table, policy, parse, stored: 0 };
    app.flush(&mut session)?;
    let v = view(&session)?;
    app.sessions.write().expect("session lock poisoned").insert(id, Arc::new(Mutex::new(session)));
    app.snapshot()?;
    Ok((StatusCode::CREATED, Json(v)))
}

async fn answer(
    AxState(app): AxState<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<AnswerRequest>, JsonRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let entry = app.session(&id)?;
    let v = {
        let mut s = entry.lock().expect("session lock poisoned");
        if s.parse.is_complete() {
            return Err(interaction_error(InteractionError::Complete));
        }
        if s.parse.pending().is_none() {
            return Err(interaction_error(InteractionError::NoPending));
        }
        let Json(req) = body?;
        let response = req.response()?;
        let s = &mut *s;
        let tokens = Arc::clone(&s.parse.state().question);
        let ctx = QuestionContext::new(&tokens, &s.table);
        s.parse.answer(response, &s.policy, &ctx).map_err(interaction_error)?;
        app.flush(s)?;
        view(s)?
    };
    app.snapshot()?;
    Ok(Json(v))
}

async fn get_session(AxState(app): AxState<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let entry = app.session(&id)?;
    let s = entry.lock().expect("session lock poisoned");
    Ok(Json(view(&s)?))
}

async fn retrain(AxState(app): AxState<Arc<AppState>>) -> Result<Json<RetrainReport>, ApiError> {
    let guard = app.try_begin_retrain().ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "a retrain is already in progress"))?;
    let worker = Arc::clone(&app);
    let result = tokio::task::spawn_blocking(move || {
        let _guard = guard;
        worker.retrain()
    })
    .await
    .map_err(ApiError::internal)?;
    Ok(Json(result?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnView {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableView {
    pub id: String,
    pub columns: Vec<ColumnView>,
    pub num_rows: usize,
}

async fn list_tables(AxState(app): AxState<Arc<AppState>>) -> Json<Vec<TableView>> {
    let mut out: Vec<TableView> = app
        .tables
        .values()
        .map(|t| TableView {
            id: t.id.clone(),
            columns: t.columns.iter().map(|c| ColumnView { name: c.name.clone(), kind: c.kind }).collect(),
            num_rows: t.rows.len(),
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Json(out)
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/tables", get(list_tables))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/answer", post(answer))
        .route("/admin/retrain", post(retrain))
        .with_state(app)
}

pub async fn serve(app: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app)).await
}
