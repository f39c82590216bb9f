//! Confidence-triggered clarification: multi-choice questions, feedback
//! incorporation, the simulated user and the resumable parse-and-collect
//! session.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::policy::{argmax, Policy, PolicyError, QuestionContext};
use crate::sql::{Action, Agg, SqlError, SqlQuery, Stage, State, Table};

/// Default number of options shown besides "none of the above".
pub const DEFAULT_K: usize = 3;

pub const NONE_OPTION_LABEL: &str = "None of the above options";

#[derive(Debug, thiserror::Error)]
pub enum InteractionError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error("no clarification question is pending")]
    NoPending,
    #[error("choice index {index} is out of range for {len} options")]
    ChoiceOutOfRange { index: usize, len: usize },
    #[error("the parse is already complete")]
    Complete,
    #[error("invalid parameter: {0}")]
    Param(String),
}

/// `true` iff the step must be confirmed by the user (`prob < mu`).
pub fn is_uncertain(prob: f64, mu: f64) -> bool {
    prob < mu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClarificationQuestion {
    pub state: State,
    pub slot: Stage,
    pub text: String,
    pub options: Vec<Action>,
    pub option_labels: Vec<String>,
    pub option_probs: Vec<f64>,
    pub includes_none: bool,
    /// Action executed if the user rejects every option.
    pub fallback: Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UserResponse {
    Choice(usize),
    NoneOfAbove,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    Confident,
    DemonstratedValid,
    DemonstratedInvalid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectedExample {
    pub state: State,
    pub action: Action,
    pub weight: u8,
    pub provenance: Provenance,
    pub iteration: usize,
    pub question_id: String,
}

impl CollectedExample {
    pub fn new(state: State, action: Action, provenance: Provenance, iteration: usize, question_id: &str) -> Self {
        let weight = match provenance {
            Provenance::Confident | Provenance::DemonstratedValid => 1,
            Provenance::DemonstratedInvalid => 0,
        };
        CollectedExample { state, action, weight, provenance, iteration, question_id: question_id.to_owned() }
    }
}

/// One transcript line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub stage: Stage,
    pub predicted: Action,
    pub prob: f64,
    pub triggered: bool,
    pub options: Vec<Action>,
    pub response: Option<UserResponse>,
    pub executed: Action,
    pub weight: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParseOutcome {
    pub query: SqlQuery,
    pub examples: Vec<CollectedExample>,
    pub interaction_count: usize,
    pub log: Vec<StepLog>,
}

fn question_text(state: &State, predicted: &Action) -> String {
    let sel = state.sel_col().unwrap_or("?");
    let wcol = state.last_where_col().unwrap_or("?");
    match predicted {
        Action::SelectCol(c) => format!("Should the answer be taken from column \"{c}\"?"),
        Action::SetAgg(Agg::None) => format!("Should the system list the values of column \"{sel}\" without aggregation?"),
        Action::SetAgg(a) => format!("Should the system compute the {} of column \"{sel}\"?", a.as_str()),
        Action::WhereCol(c) => format!("Does the system need to consider a condition on column \"{c}\"?"),
        Action::EndWhere => "Are all the conditions the question needs already in place?".to_owned(),
        Action::WhereOp(o) => format!("Should the condition on column \"{wcol}\" use \"{}\"?", o.symbol()),
        Action::WhereVal(v) => format!("Is \"{v}\" the value the condition on column \"{wcol}\" should compare with?"),
    }
}

/// Top-`k` candidates by probability with the prediction first, plus the
/// none-option.
pub fn make_question(state: &State, predicted: &Action, dist: &[(Action, f64)], k: usize) -> Result<ClarificationQuestion, InteractionError> {
    if k == 0 {
        return Err(InteractionError::Param("K must be at least 1".into()));
    }
    if dist.is_empty() {
        return Err(PolicyError::NoCandidates.into());
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    // Stable sort keeps candidate order among equal probabilities.
    order.sort_by(|&a, &b| dist[b].1.total_cmp(&dist[a].1));
    if let Some(pos) = order.iter().position(|&i| &dist[i].0 == predicted) {
        let p = order.remove(pos);
        order.insert(0, p);
    }
    let shown: Vec<usize> = order.iter().copied().take(k).collect();
    let options: Vec<Action> = shown.iter().map(|&i| dist[i].0.clone()).collect();
    let fallback = order.get(k).map_or_else(|| options.last().expect("k >= 1").clone(), |&i| dist[i].0.clone());
    Ok(ClarificationQuestion {
        slot: state.stage()?,
        text: question_text(state, predicted),
        option_labels: options.iter().map(Action::label).collect(),
        option_probs: shown.iter().map(|&i| dist[i].1).collect(),
        options,
        includes_none: true,
        fallback,
        state: state.clone(),
    })
}

/// Gold continuation of `prefix`, if `prefix` is itself a gold prefix.
pub fn gold_continuation<'a>(gold_actions: &'a [Action], prefix: &[Action]) -> Option<&'a Action> {
    if prefix.len() < gold_actions.len() && gold_actions[..prefix.len()] == *prefix {
        Some(&gold_actions[prefix.len()])
    } else {
        None
    }
}

/// Answers by comparing options with the gold action for the question's
/// prefix; a prefix that already left the gold parse has no correct option.
pub fn simulate_user(q: &ClarificationQuestion, gold: &SqlQuery) -> UserResponse {
    let gold_actions = gold.actions();
    match gold_continuation(&gold_actions, &q.state.prefix).and_then(|g| q.options.iter().position(|o| o == g)) {
        Some(i) => UserResponse::Choice(i),
        None => UserResponse::NoneOfAbove,
    }
}

/// Applies a response: a choice is a valid demonstration (weight 1); a
/// rejection executes the question's fallback unvalidated and records it
/// with weight 0.
pub fn incorporate_feedback(
    q: &ClarificationQuestion,
    r: UserResponse,
    iteration: usize,
    question_id: &str,
) -> Result<(Action, CollectedExample), InteractionError> {
    let (action, provenance) = match r {
        UserResponse::Choice(i) => {
            let a = q.options.get(i).ok_or(InteractionError::ChoiceOutOfRange { index: i, len: q.options.len() })?;
            (a.clone(), Provenance::DemonstratedValid)
        }
        UserResponse::NoneOfAbove => (q.fallback.clone(), Provenance::DemonstratedInvalid),
    };
    let ex = CollectedExample::new(q.state.clone(), action.clone(), provenance, iteration, question_id);
    Ok((action, ex))
}

/// Source of answers to clarification questions.
pub trait UserOracle {
    fn answer(&mut self, q: &ClarificationQuestion) -> UserResponse;
}

/// The gold-comparing simulated user for one item.
pub struct SimulatedUser {
    gold: SqlQuery,
}

impl SimulatedUser {
    pub fn new(gold: &SqlQuery) -> Self {
        SimulatedUser { gold: gold.clone() }
    }
}

impl UserOracle for SimulatedUser {
    fn answer(&mut self, q: &ClarificationQuestion) -> UserResponse {
        simulate_user(q, &self.gold)
    }
}

/// Replays a fixed answer sequence; rejects everything once exhausted.
#[derive(Clone, Debug, Default)]
pub struct ScriptedOracle {
    answers: VecDeque<UserResponse>,
}

impl ScriptedOracle {
    pub fn new(answers: impl IntoIterator<Item = UserResponse>) -> Self {
        ScriptedOracle { answers: answers.into_iter().collect() }
    }
}

impl UserOracle for ScriptedOracle {
    fn answer(&mut self, _q: &ClarificationQuestion) -> UserResponse {
        self.answers.pop_front().unwrap_or(UserResponse::NoneOfAbove)
    }
}

/// Interaction parameters of a session.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionConfig {
    pub mu: f64,
    pub k: usize,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        InteractionConfig { mu: 0.95, k: DEFAULT_K }
    }
}

impl InteractionConfig {
    pub fn check(&self) -> Result<(), InteractionError> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(InteractionError::Param(format!("mu={} outside [0, 1]", self.mu)));
        }
        if self.k == 0 {
            return Err(InteractionError::Param("K must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PendingStep {
    question: ClarificationQuestion,
    predicted: Action,
    prob: f64,
}

/// A parse that can stop at an uncertain step and resume once the question
/// is answered. Drives both the simulated loop and live sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseSession {
    pub config: InteractionConfig,
    pub iteration: usize,
    pub question_id: String,
    state: State,
    pending: Option<PendingStep>,
    examples: Vec<CollectedExample>,
    log: Vec<StepLog>,
}

impl ParseSession {
    pub fn new(tokens: Arc<[String]>, table_id: &str, config: InteractionConfig, iteration: usize, question_id: &str) -> Result<Self, InteractionError> {
        config.check()?;
        Ok(ParseSession {
            config,
            iteration,
            question_id: question_id.to_owned(),
            state: State::initial(tokens, Arc::from(table_id)),
            pending: None,
            examples: Vec::new(),
            log: Vec::new(),
        })
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn pending(&self) -> Option<&ClarificationQuestion> {
        self.pending.as_ref().map(|p| &p.question)
    }

    pub fn examples(&self) -> &[CollectedExample] {
        &self.examples
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    pub fn is_complete(&self) -> bool {
        self.pending.is_none() && matches!(self.state.stage(), Ok(Stage::Done))
    }

    pub fn interaction_count(&self) -> usize {
        self.log.iter().filter(|l| l.triggered && l.response.is_some()).count()
    }

    fn execute(&mut self, step: StepLog, example: CollectedExample) {
        self.state = self.state.child(step.executed.clone());
        self.examples.push(example);
        self.log.push(step);
    }

    /// Executes confident steps until a question is pending or the parse
    /// completes.
    pub fn advance(&mut self, policy: &Policy, ctx: &QuestionContext<'_>) -> Result<Option<&ClarificationQuestion>, InteractionError> {
        if self.pending.is_some() {
            return Ok(self.pending());
        }
        while self.state.stage()? != Stage::Done {
            let dist = policy.action_distribution(ctx, &self.state)?;
            let probs: Vec<f64> = dist.iter().map(|d| d.1).collect();
            let best = argmax(&probs).ok_or(PolicyError::NoCandidates)?;
            let (predicted, prob) = dist[best].clone();
            if is_uncertain(prob, self.config.mu) {
                let question = make_question(&self.state, &predicted, &dist, self.config.k)?;
                self.pending = Some(PendingStep { question, predicted, prob });
                return Ok(self.pending());
            }
            let example = CollectedExample::new(self.state.clone(), predicted.clone(), Provenance::Confident, self.iteration, &self.question_id);
            let step = StepLog {
                t: self.log.len() + 1,
                stage: self.state.stage()?,
                predicted: predicted.clone(),
                prob,
                triggered: false,
                options: Vec::new(),
                response: None,
                executed: predicted,
                weight: 1,
            };
            self.execute(step, example);
        }
        Ok(None)
    }

    /// Incorporates the answer to the pending question and resumes.
    pub fn answer(&mut self, response: UserResponse, policy: &Policy, ctx: &QuestionContext<'_>) -> Result<Option<&ClarificationQuestion>, InteractionError> {
        let pending = self.pending.as_ref().ok_or(if self.is_complete() { InteractionError::Complete } else { InteractionError::NoPending })?;
        let (executed, example) = incorporate_feedback(&pending.question, response, self.iteration, &self.question_id)?;
        let pending = self.pending.take().expect("checked above");
        let step = StepLog {
            t: self.log.len() + 1,
            stage: pending.question.slot,
            predicted: pending.predicted,
            prob: pending.prob,
            triggered: true,
            options: pending.question.options,
            response: Some(response),
            executed,
            weight: example.weight,
        };
        self.execute(step, example);
        self.advance(policy, ctx)
    }

    /// Actions executed so far.
    pub fn actions(&self) -> &[Action] {
        &self.state.prefix
    }

    pub fn query(&self, table: &Table) -> Result<SqlQuery, InteractionError> {
        Ok(crate::sql::actions_to_query(&self.state.prefix, table)?)
    }
}

/// Parses one question, asking `user` at every step whose predicted action
/// has probability below `config.mu`, and collects the resulting examples.
pub fn parse_and_collect(
    config: InteractionConfig,
    tokens: Arc<[String]>,
    table: &Table,
    policy: &Policy,
    user: &mut dyn UserOracle,
    iteration: usize,
    question_id: &str,
) -> Result<ParseOutcome, InteractionError> {
    let ctx = QuestionContext::new(&tokens, table);
    let mut session = ParseSession::new(tokens, &table.id, config, iteration, question_id)?;
    let mut next = session.advance(policy, &ctx)?.cloned();
    while let Some(q) = next {
        let r = user.answer(&q);
        next = session.answer(r, policy, &ctx)?.cloned();
    }
    let query = session.query(table)?;
    let interaction_count = session.interaction_count();
    Ok(ParseOutcome { query, examples: session.examples, interaction_count, log: session.log })
}
