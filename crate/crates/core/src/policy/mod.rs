//! Log-linear slot-filling policy: softmax over hashed features of each
//! candidate action, greedy decoding, sequence probability, and training of
//! the weighted negative log-likelihood.

mod features;
mod train;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use features::{feature_id, feature_space_version, FeatureVector, QuestionContext, FEATURE_DIM, MAX_SPAN, TEMPLATES};
pub use train::{loss_and_gradient, train, Dataset, EvalSet, TrainConfig, TrainOutcome};

use crate::sql::{Action, SqlQuery, Stage, State, Table, Trajectory};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("stage error: {0}")]
    Stage(String),
    #[error("no candidate actions at this state")]
    NoCandidates,
    #[error("action {0} is not a candidate at its state")]
    NotACandidate(String),
    #[error("example weight {0} is outside {{0, 1}}")]
    Weight(f64),
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint feature space {found:#x} does not match {expected:#x}")]
    VersionMismatch { expected: u64, found: u64 },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Numerically stable softmax. Empty input yields an empty vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub weights: Vec<f64>,
    pub feature_space_version: u64,
}

impl Default for Policy {
    fn default() -> Self {
        Policy::zeros()
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    feature_space_version: u64,
    dim: usize,
    weights: Vec<(u32, f64)>,
}

impl Policy {
    pub fn zeros() -> Self {
        Policy { weights: vec![0.0; FEATURE_DIM], feature_space_version: feature_space_version() }
    }

    /// Adds `delta` to the weight of the feature named by `parts`.
    pub fn bump(&mut self, parts: &[&str], delta: f64) {
        self.weights[feature_id(parts) as usize] += delta;
    }

    pub fn score(&self, f: &FeatureVector) -> f64 {
        f.dot(&self.weights)
    }

    /// Softmax distribution over the candidates of `state`, in candidate order.
    pub fn action_distribution(&self, ctx: &QuestionContext<'_>, state: &State) -> Result<Vec<(Action, f64)>, PolicyError> {
        let feats = ctx.featurize(state)?;
        if feats.is_empty() {
            return Err(PolicyError::NoCandidates);
        }
        let scores: Vec<f64> = feats.iter().map(|(_, f)| self.score(f)).collect();
        Ok(feats.into_iter().map(|(a, _)| a).zip(softmax(&scores)).collect())
    }

    /// Greedy decoding; ties go to the earliest candidate.
    pub fn decode(&self, ctx: &QuestionContext<'_>, initial: State) -> Result<Trajectory, PolicyError> {
        let mut state = initial.clone();
        let mut actions = Vec::new();
        while state.stage().map_err(|e| PolicyError::Stage(e.to_string()))? != Stage::Done {
            let dist = self.action_distribution(ctx, &state)?;
            let probs: Vec<f64> = dist.iter().map(|d| d.1).collect();
            let best = argmax(&probs).ok_or(PolicyError::NoCandidates)?;
            let action = dist[best].0.clone();
            state = state.child(action.clone());
            actions.push(action);
        }
        Ok(Trajectory::from_actions(initial, actions))
    }

    /// Decodes `tokens` against `table` and converts to a query.
    pub fn parse(&self, tokens: &[String], table: &Table) -> Result<SqlQuery, PolicyError> {
        let ctx = QuestionContext::new(tokens, table);
        let traj = self.decode(&ctx, State::initial(Arc::from(tokens), Arc::from(table.id.as_str())))?;
        traj.to_query(table).map_err(|e| PolicyError::Stage(e.to_string()))
    }

    /// `Π_t p(a_t | s_t)` over the trajectory's own actions.
    pub fn sequence_probability(&self, ctx: &QuestionContext<'_>, traj: &Trajectory) -> Result<f64, PolicyError> {
        Ok(self.sequence_log_probability(ctx, traj)?.exp())
    }

    pub fn sequence_log_probability(&self, ctx: &QuestionContext<'_>, traj: &Trajectory) -> Result<f64, PolicyError> {
        let mut total = 0.0;
        for (state, action) in traj.states.iter().zip(&traj.actions) {
            let dist = self.action_distribution(ctx, state)?;
            let p = dist
                .iter()
                .find(|(a, _)| a == action)
                .map(|d| d.1)
                .ok_or_else(|| PolicyError::NotACandidate(action.to_string()))?;
            total += p.ln();
        }
        Ok(total)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let weights = self
            .weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, w)| (i as u32, *w))
            .collect();
        let ckpt = Checkpoint { feature_space_version: self.feature_space_version, dim: self.weights.len(), weights };
        let json = serde_json::to_vec(&ckpt).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let bytes = std::fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let expected = feature_space_version();
        if ckpt.feature_space_version != expected {
            return Err(PolicyError::VersionMismatch { expected, found: ckpt.feature_space_version });
        }
        if ckpt.dim != FEATURE_DIM {
            return Err(PolicyError::Checkpoint(format!("dimension {} != {FEATURE_DIM}", ckpt.dim)));
        }
        let mut weights = vec![0.0; FEATURE_DIM];
        for (i, w) in ckpt.weights {
            let slot = weights.get_mut(i as usize).ok_or_else(|| PolicyError::Checkpoint(format!("feature id {i} out of range")))?;
            if !w.is_finite() {
                return Err(PolicyError::Checkpoint(format!("non-finite weight at {i}")));
            }
            *slot = w;
        }
        Ok(Policy { weights, feature_space_version: expected })
    }
}
