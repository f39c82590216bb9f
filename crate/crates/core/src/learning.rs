//! The iterative collect/aggregate/retrain loop and the comparison systems.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hasher;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use fnv::FnvHasher;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::corpus::{split_corpus, Corpus, CorpusError, CorpusItem, CorpusSplits, SplitConfig};
use crate::interaction::{gold_continuation, parse_and_collect, CollectedExample, InteractionConfig, InteractionError, Provenance, SimulatedUser};
use crate::policy::{argmax, train, Dataset, EvalSet, Policy, PolicyError, QuestionContext, TrainConfig};
use crate::sql::{execute, results_equal, Action, SqlError, SqlQuery, Stage, State, Table};

#[derive(Debug, thiserror::Error)]
pub enum LearningError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SystemKind {
    Neil,
    NeilStar,
    FullExpert,
    BinaryUser,
    BinaryUserExpert,
    SelfTrain,
}

impl SystemKind {
    pub const ALL: [SystemKind; 6] = [
        SystemKind::Neil,
        SystemKind::NeilStar,
        SystemKind::FullExpert,
        SystemKind::BinaryUser,
        SystemKind::BinaryUserExpert,
        SystemKind::SelfTrain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::Neil => "NEIL",
            SystemKind::NeilStar => "NEIL_STAR",
            SystemKind::FullExpert => "FULL_EXPERT",
            SystemKind::BinaryUser => "BINARY_USER",
            SystemKind::BinaryUserExpert => "BINARY_USER_EXPERT",
            SystemKind::SelfTrain => "SELF_TRAIN",
        }
    }

    /// Whether the system asks users step-level questions.
    pub fn is_interactive(self) -> bool {
        matches!(self, SystemKind::Neil | SystemKind::NeilStar)
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemKind {
    type Err = String;

    /// Accepts `NEIL_STAR`, `neil-star`, `neil_star`, ...
    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        SystemKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| format!("unknown system {s:?} (expected one of neil, neil-star, full-expert, binary-user, binary-user-expert, self-train)"))
    }
}

/// Annotation units of a full expert labeling of `q`: one per slot of the
/// written query (`2 + 3k`). The end-of-conditions decision is implied by
/// the written query and not counted.
pub fn expert_annotation_units(q: &SqlQuery) -> usize {
    q.trajectory_len() - 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub system: SystemKind,
    pub iteration: usize,
    pub questions_seen: usize,
    pub new_examples: usize,
    pub new_annotations: usize,
    pub annotations_cum: usize,
    pub test_acc: f64,
    pub val_acc: f64,
    /// New annotations divided by batch size.
    pub interactions_per_q: f64,
    /// Diagnostics of the policy that collected this iteration's data, on
    /// validation gold paths (NEIL only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<StepDiagnostics>,
    /// Hash of the batch question ids; equal across systems of one run.
    pub batch_hash: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Averaged-over-steps query rate and confident-error rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub e: f64,
    pub beta: f64,
    pub eps_tilde: f64,
}

/// Per-run static data shared by every system.
pub struct RunContext<'a> {
    pub tables: HashMap<&'a str, &'a Table>,
    pub splits: &'a CorpusSplits,
    pub validation: EvalSet,
    pub test: EvalSet,
    pub d0: Dataset,
    pub init_policy: Arc<Policy>,
    pub interaction: InteractionConfig,
    pub train: TrainConfig,
}

/// Gold decisions of every question as weight-1 examples.
pub fn expand_gold(items: &[CorpusItem], tables: &HashMap<&str, &Table>) -> Result<(Dataset, Vec<CollectedExample>), LearningError> {
    let mut data = Dataset::new();
    let mut examples = Vec::new();
    for item in items {
        let table = lookup(tables, &item.table_id)?;
        let tokens = item.tokens();
        let ctx = QuestionContext::new(&tokens, table);
        let traj = item.gold.to_trajectory(tokens, item.table_id.as_str().into());
        for (s, a) in traj.states.into_iter().zip(traj.actions) {
            data.push_state(&ctx, &s, &a, 1.0)?;
            examples.push(CollectedExample::new(s, a, Provenance::DemonstratedValid, 0, &item.id));
        }
    }
    Ok((data, examples))
}

fn lookup<'a>(tables: &HashMap<&str, &'a Table>, id: &str) -> Result<&'a Table, LearningError> {
    tables.get(id).copied().ok_or_else(|| LearningError::UnknownTable(id.to_owned()))
}

impl<'a> RunContext<'a> {
    /// Compiles evaluation sets and `D_0` and trains the initial policy.
    pub fn new(corpus: &'a Corpus, splits: &'a CorpusSplits, interaction: InteractionConfig, train_cfg: TrainConfig) -> Result<Self, LearningError> {
        if splits.init_train.is_empty() {
            return Err(LearningError::Config("initialization split is empty".into()));
        }
        interaction.check()?;
        let tables = corpus.table_index();
        let validation = EvalSet::build(&splits.validation, &tables)?;
        let test = EvalSet::build(&splits.test, &tables)?;
        let (d0, _) = expand_gold(&splits.init_train, &tables)?;
        let init = train(&Policy::zeros(), &d0, &train_cfg, Some(&validation))?;
        info!("initial policy: val {:.4}, test {:.4}", validation.accuracy(&init.policy), test.accuracy(&init.policy));
        Ok(RunContext { tables, splits, validation, test, d0, init_policy: Arc::new(init.policy), interaction, train: train_cfg })
    }

    pub fn table(&self, id: &str) -> Result<&'a Table, LearningError> {
        lookup(&self.tables, id)
    }

    /// Diagnostics of `policy` on validation gold paths: each question's
    /// states weigh `1/(|Q| T_q)`.
    pub fn diagnostics(&self, policy: &Policy) -> Result<StepDiagnostics, LearningError> {
        let mu = self.interaction.mu;
        let (mut e, mut beta) = (0.0, 0.0);
        let n = self.splits.validation.len() as f64;
        for item in &self.splits.validation {
            let table = self.table(&item.table_id)?;
            let tokens = item.tokens();
            let ctx = QuestionContext::new(&tokens, table);
            let traj = item.gold.to_trajectory(tokens, item.table_id.as_str().into());
            let w = 1.0 / (n * traj.len() as f64);
            for (s, gold) in traj.states.iter().zip(&traj.actions) {
                let dist = policy.action_distribution(&ctx, s)?;
                let probs: Vec<f64> = dist.iter().map(|d| d.1).collect();
                let best = argmax(&probs).ok_or(PolicyError::NoCandidates)?;
                if probs[best] < mu {
                    beta += w;
                } else if &dist[best].0 != gold {
                    e += w;
                }
            }
        }
        let eps_tilde = if beta < 1.0 { e / (1.0 - beta) } else { 0.0 };
        Ok(StepDiagnostics { e, beta, eps_tilde })
    }
}

/// Mutable per-system state of one run.
pub struct RunState {
    pub system: SystemKind,
    pub policy: Arc<Policy>,
    /// Examples gathered from the stream (weight-0 ones included).
    pub aggregated: Vec<CollectedExample>,
    /// `D_0` plus compiled `aggregated`.
    pub dataset: Dataset,
    pub iteration: usize,
    pub questions_seen: usize,
    pub annotation_total: usize,
    pub best: (Arc<Policy>, f64, usize),
}

impl RunState {
    pub fn initialize(system: SystemKind, ctx: &RunContext<'_>) -> Self {
        let val = ctx.validation.accuracy(&ctx.init_policy);
        RunState {
            system,
            policy: Arc::clone(&ctx.init_policy),
            aggregated: Vec::new(),
            dataset: ctx.d0.clone(),
            iteration: 0,
            questions_seen: 0,
            annotation_total: 0,
            best: (Arc::clone(&ctx.init_policy), val, 0),
        }
    }

    /// Report of the initial policy, before any stream question.
    pub fn initial_report(&self, ctx: &RunContext<'_>) -> IterationReport {
        IterationReport {
            system: self.system,
            iteration: 0,
            questions_seen: 0,
            new_examples: 0,
            new_annotations: 0,
            annotations_cum: 0,
            test_acc: ctx.test.accuracy(&self.policy),
            val_acc: ctx.validation.accuracy(&self.policy),
            interactions_per_q: 0.0,
            diagnostics: None,
            batch_hash: 0,
            error: None,
        }
    }
}

pub fn batch_hash(batch: &[CorpusItem]) -> u64 {
    let mut h = FnvHasher::default();
    for item in batch {
        h.write(item.id.as_bytes());
        h.write_u8(0);
    }
    h.finish()
}

/// Examples and annotation count one system collects from one question.
pub struct Collected {
    pub examples: Vec<CollectedExample>,
    pub annotations: usize,
}

fn gold_examples(item: &CorpusItem, iteration: usize) -> Vec<CollectedExample> {
    let traj = item.gold.to_trajectory(item.tokens(), item.table_id.as_str().into());
    traj.states
        .into_iter()
        .zip(traj.actions)
        .map(|(s, a)| CollectedExample::new(s, a, Provenance::DemonstratedValid, iteration, &item.id))
        .collect()
}

/// Runs `system`'s collection protocol on one question with `policy`.
pub fn collect(
    system: SystemKind,
    item: &CorpusItem,
    table: &Table,
    policy: &Policy,
    interaction: InteractionConfig,
    iteration: usize,
) -> Result<Collected, LearningError> {
    let tokens = item.tokens();
    match system {
        SystemKind::Neil => {
            let mut user = SimulatedUser::new(&item.gold);
            let out = parse_and_collect(interaction, tokens, table, policy, &mut user, iteration, &item.id)?;
            Ok(Collected { examples: out.examples, annotations: out.interaction_count })
        }
        SystemKind::NeilStar => {
            let ctx = QuestionContext::new(&tokens, table);
            let gold = item.gold.actions();
            let mut state = State::initial(tokens.clone(), item.table_id.as_str().into());
            let mut examples = Vec::with_capacity(gold.len());
            let mut annotations = 0;
            while state.stage()? != Stage::Done {
                let g = gold_continuation(&gold, &state.prefix).expect("NEIL* stays on the gold path").clone();
                let dist = policy.action_distribution(&ctx, &state)?;
                let probs: Vec<f64> = dist.iter().map(|d| d.1).collect();
                let predicted = &dist[argmax(&probs).ok_or(PolicyError::NoCandidates)?].0;
                let provenance = if *predicted == g {
                    Provenance::Confident
                } else {
                    annotations += 1;
                    Provenance::DemonstratedValid
                };
                let next = state.child(g.clone());
                examples.push(CollectedExample::new(state, g, provenance, iteration, &item.id));
                state = next;
            }
            Ok(Collected { examples, annotations })
        }
        SystemKind::FullExpert => Ok(Collected { examples: gold_examples(item, iteration), annotations: expert_annotation_units(&item.gold) }),
        SystemKind::BinaryUser | SystemKind::BinaryUserExpert | SystemKind::SelfTrain => {
            let ctx = QuestionContext::new(&tokens, table);
            let traj = policy.decode(&ctx, State::initial(tokens.clone(), item.table_id.as_str().into()))?;
            let own = |traj: crate::sql::Trajectory| -> Vec<CollectedExample> {
                traj.states
                    .into_iter()
                    .zip(traj.actions)
                    .map(|(s, a)| CollectedExample::new(s, a, Provenance::Confident, iteration, &item.id))
                    .collect()
            };
            if system == SystemKind::SelfTrain {
                let p = policy.sequence_probability(&ctx, &traj)?;
                let examples = if p > 0.5 { own(traj) } else { Vec::new() };
                return Ok(Collected { examples, annotations: 0 });
            }
            let predicted = traj.to_query(table)?;
            let correct = results_equal(&execute(&predicted, table)?, &execute(&item.gold, table)?);
            let units = expert_annotation_units(&item.gold);
            Ok(match (correct, system) {
                (true, _) => Collected { examples: own(traj), annotations: units },
                (false, SystemKind::BinaryUserExpert) => Collected { examples: gold_examples(item, iteration), annotations: 2 * units },
                (false, _) => Collected { examples: Vec::new(), annotations: units },
            })
        }
    }
}

/// One iteration: collect on `batch` with the current policy, aggregate,
/// retrain from the initial policy on `D_0` plus everything aggregated, and
/// update the validation-best policy.
pub fn run_iteration(state: &mut RunState, batch: &[CorpusItem], ctx: &RunContext<'_>, with_diagnostics: bool) -> Result<IterationReport, LearningError> {
    let iteration = state.iteration + 1;
    let diagnostics = if with_diagnostics && state.system == SystemKind::Neil { Some(ctx.diagnostics(&state.policy)?) } else { None };
    let mut new_data = Dataset::new();
    let mut new_examples = Vec::new();
    let mut new_annotations = 0;
    for item in batch {
        let table = ctx.table(&item.table_id)?;
        let got = collect(state.system, item, table, &state.policy, ctx.interaction, iteration)?;
        let qctx = QuestionContext::new(&item.tokens(), table);
        for ex in &got.examples {
            new_data.push_state(&qctx, &ex.state, &ex.action, f64::from(ex.weight))?;
        }
        new_annotations += got.annotations;
        new_examples.extend(got.examples);
    }
    // On error the system's run ends, so appending before training is safe.
    state.dataset.append(&new_data);
    let trained = train(&ctx.init_policy, &state.dataset, &ctx.train, Some(&ctx.validation))?;
    let policy = Arc::new(trained.policy);
    let val_acc = ctx.validation.accuracy(&policy);
    let test_acc = ctx.test.accuracy(&policy);

    let n_new = new_examples.len();
    state.aggregated.extend(new_examples);
    state.iteration = iteration;
    state.questions_seen += batch.len();
    state.annotation_total += new_annotations;
    state.policy = Arc::clone(&policy);
    if val_acc > state.best.1 {
        state.best = (policy, val_acc, iteration);
    }
    Ok(IterationReport {
        system: state.system,
        iteration,
        questions_seen: state.questions_seen,
        new_examples: n_new,
        new_annotations,
        annotations_cum: state.annotation_total,
        test_acc,
        val_acc,
        interactions_per_q: if batch.is_empty() { 0.0 } else { new_annotations as f64 / batch.len() as f64 },
        diagnostics,
        batch_hash: batch_hash(batch),
        error: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub split: SplitConfig,
    pub interaction: InteractionConfig,
    /// Questions per iteration.
    pub m: usize,
    pub iterations: usize,
    pub train: TrainConfig,
    pub systems: Vec<SystemKind>,
    pub seeds: Vec<u64>,
    /// Compute step diagnostics for NEIL each iteration.
    pub diagnostics: bool,
    /// Run systems on separate threads.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment_id: "default".into(),
            split: SplitConfig::default(),
            interaction: InteractionConfig::default(),
            m: 200,
            iterations: 15,
            train: TrainConfig::default(),
            systems: SystemKind::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            diagnostics: true,
            parallel: false,
        }
    }
}

/// Result of one system over one seed.
pub struct SystemRun {
    pub system: SystemKind,
    pub reports: Vec<IterationReport>,
    pub best_policy: Arc<Policy>,
    pub best_iteration: usize,
    pub best_val: f64,
    pub aggregated: Vec<CollectedExample>,
    pub error: Option<String>,
}

/// Runs one system for `cfg.iterations` iterations over the shared stream.
/// An iteration failure ends this system's run and is recorded.
pub fn run_system(system: SystemKind, ctx: &RunContext<'_>, cfg: &ExperimentConfig) -> SystemRun {
    let mut state = RunState::initialize(system, ctx);
    let mut reports = vec![state.initial_report(ctx)];
    let mut error = None;
    for (i, batch) in ctx.splits.stream.chunks(cfg.m.max(1)).take(cfg.iterations).enumerate() {
        match run_iteration(&mut state, batch, ctx, cfg.diagnostics) {
            Ok(r) => {
                info!("{system} iteration {}: test {:.4} val {:.4} annotations {}", r.iteration, r.test_acc, r.val_acc, r.annotations_cum);
                reports.push(r);
            }
            Err(e) => {
                warn!("{system} iteration {} failed: {e}", i + 1);
                error = Some(e.to_string());
                break;
            }
        }
    }
    let (best_policy, best_val, best_iteration) = state.best;
    SystemRun { system, reports, best_policy, best_iteration, best_val, aggregated: state.aggregated, error }
}

/// All configured systems on one seed's splits.
pub fn run_seed(corpus: &Corpus, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<SystemRun>, LearningError> {
    if cfg.m == 0 {
        return Err(LearningError::Config("m must be positive".into()));
    }
    let splits = split_corpus(&corpus.items, &cfg.split, seed)?;
    let ctx = RunContext::new(corpus, &splits, cfg.interaction, cfg.train.clone())?;
    let runs = if cfg.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = cfg.systems.iter().map(|&s| scope.spawn({ let ctx = &ctx; move || run_system(s, ctx, cfg) })).collect();
            handles.into_iter().map(|h| h.join().expect("system thread panicked")).collect()
        })
    } else {
        cfg.systems.iter().map(|&s| run_system(s, &ctx, cfg)).collect()
    };
    Ok(runs)
}

pub const REPORT_HEADER: &str = "system,iteration,questions_seen,annotations_cum,test_acc,val_acc";

/// CSV rows in [`REPORT_HEADER`] layout.
pub fn reports_csv(reports: &[IterationReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.system, r.iteration, r.questions_seen, r.annotations_cum, r.test_acc, r.val_acc));
    }
    out
}

#[derive(Serialize)]
struct SystemSummary<'a> {
    system: SystemKind,
    best_iteration: usize,
    best_val_acc: f64,
    final_test_acc: Option<f64>,
    annotations_total: usize,
    error: &'a Option<String>,
    reports: &'a [IterationReport],
}

/// Writes `reports.csv`, `summary.json` and best-policy checkpoints under
/// `dir`.
pub fn write_seed_outputs(dir: &Path, runs: &[SystemRun]) -> Result<(), LearningError> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    let all: Vec<IterationReport> = runs.iter().flat_map(|r| r.reports.iter().cloned()).collect();
    std::fs::write(dir.join("reports.csv"), reports_csv(&all))?;
    let summaries: Vec<SystemSummary<'_>> = runs
        .iter()
        .map(|r| SystemSummary {
            system: r.system,
            best_iteration: r.best_iteration,
            best_val_acc: r.best_val,
            final_test_acc: r.reports.last().map(|x| x.test_acc),
            annotations_total: r.reports.last().map_or(0, |x| x.annotations_cum),
            error: &r.error,
            reports: &r.reports,
        })
        .collect();
    let json = serde_json::to_string_pretty(&summaries).map_err(std::io::Error::from)?;
    std::fs::write(dir.join("summary.json"), json)?;
    for r in runs {
        r.best_policy.save(&dir.join("checkpoints").join(format!("{}-best.json", r.system.as_str().to_ascii_lowercase())))?;
    }
    Ok(())
}

/// Multiset of `(state, action)` pairs, as sorted debug strings.
pub fn state_action_multiset(examples: &[CollectedExample]) -> Vec<(State, Action)> {
    let mut v: Vec<(State, Action)> = examples.iter().map(|e| (e.state.clone(), e.action.clone())).collect();
    v.sort_by_cached_key(|(s, a)| format!("{:?}|{:?}", s, a));
    v
}

pub fn parse_systems(list: &str) -> Result<Vec<SystemKind>, String> {
    let systems: Vec<SystemKind> = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_, _>>()?;
    if systems.is_empty() {
        return Err("no systems given".into());
    }
    Ok(systems)
}
