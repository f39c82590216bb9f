use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{argmax, FeatureVector, Policy, PolicyError, QuestionContext};
use crate::corpus::CorpusItem;
use crate::sql::{Action, State, Table};

/// Precompiled `(candidate features, target index, weight)` examples stored
/// in flat arrays.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    ids: Vec<u32>,
    vals: Vec<f64>,
    cand_off: Vec<usize>,
    examples: Vec<Compiled>,
}

#[derive(Clone, Copy, Debug)]
struct Compiled {
    first: usize,
    n: u32,
    /// `u32::MAX` when the reference action is not a candidate (evaluation only).
    target: u32,
    weight: f64,
}

impl Dataset {
    pub fn new() -> Self {
        Dataset { cand_off: vec![0], ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Number of weight-1 examples.
    pub fn effective_len(&self) -> usize {
        self.examples.iter().filter(|e| e.weight > 0.0).count()
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.examples.iter().map(|e| e.weight)
    }

    fn push_raw(&mut self, cands: &[FeatureVector], target: u32, weight: f64) -> Result<(), PolicyError> {
        if weight != 0.0 && weight != 1.0 {
            return Err(PolicyError::Weight(weight));
        }
        if cands.is_empty() {
            return Err(PolicyError::NoCandidates);
        }
        let first = self.cand_off.len() - 1;
        for f in cands {
            for &(i, v) in &f.entries {
                self.ids.push(i);
                self.vals.push(v);
            }
            self.cand_off.push(self.ids.len());
        }
        self.examples.push(Compiled { first, n: cands.len() as u32, target, weight });
        Ok(())
    }

    /// Adds an example given its candidate feature vectors and the index of
    /// the demonstrated action.
    pub fn push(&mut self, cands: &[FeatureVector], target: usize, weight: f64) -> Result<(), PolicyError> {
        if target >= cands.len() {
            return Err(PolicyError::NotACandidate(format!("index {target}")));
        }
        self.push_raw(cands, target as u32, weight)
    }

    /// Featurizes `state` and records `action` as its demonstrated action.
    pub fn push_state(&mut self, ctx: &QuestionContext<'_>, state: &State, action: &Action, weight: f64) -> Result<(), PolicyError> {
        let feats = ctx.featurize(state)?;
        let target = feats.iter().position(|(a, _)| a == action).ok_or_else(|| PolicyError::NotACandidate(action.to_string()))?;
        let cands: Vec<FeatureVector> = feats.into_iter().map(|(_, f)| f).collect();
        self.push(&cands, target, weight)
    }

    pub fn append(&mut self, other: &Dataset) {
        let cand_shift = self.cand_off.len() - 1;
        let entry_shift = self.ids.len();
        self.ids.extend_from_slice(&other.ids);
        self.vals.extend_from_slice(&other.vals);
        self.cand_off.extend(other.cand_off[1..].iter().map(|o| o + entry_shift));
        self.examples.extend(other.examples.iter().map(|e| Compiled { first: e.first + cand_shift, ..*e }));
    }

    /// Copy without zero-weight examples.
    pub fn without_zero_weights(&self) -> Dataset {
        let mut out = Dataset::new();
        for e in self.examples.iter().filter(|e| e.weight > 0.0) {
            let cands: Vec<FeatureVector> = (0..e.n as usize)
                .map(|c| {
                    let r = self.cand_off[e.first + c]..self.cand_off[e.first + c + 1];
                    FeatureVector { entries: self.ids[r.clone()].iter().copied().zip(self.vals[r].iter().copied()).collect() }
                })
                .collect();
            out.push_raw(&cands, e.target, e.weight).expect("copied example is valid");
        }
        out
    }

    fn scores(&self, weights: &[f64], e: &Compiled, out: &mut Vec<f64>) {
        out.clear();
        for c in e.first..e.first + e.n as usize {
            let r = self.cand_off[c]..self.cand_off[c + 1];
            let s: f64 = self.ids[r.clone()].iter().zip(&self.vals[r]).map(|(&i, &v)| weights[i as usize] * v).sum();
            out.push(s);
        }
    }

    fn predicts_target(&self, weights: &[f64], e: &Compiled, buf: &mut Vec<f64>) -> bool {
        if e.target == u32::MAX {
            return false;
        }
        self.scores(weights, e, buf);
        argmax(buf) == Some(e.target as usize)
    }

    /// Fraction of examples whose argmax is the demonstrated action.
    pub fn step_accuracy(&self, policy: &Policy) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        let mut buf = Vec::new();
        let hits = self.examples.iter().filter(|e| self.predicts_target(&policy.weights, e, &mut buf)).count();
        hits as f64 / self.examples.len() as f64
    }
}

/// Accumulates the weighted NLL of `data` into `grad` (without the L2 term)
/// and returns the unnormalized loss sum.
fn nll_sum(weights: &[f64], data: &Dataset, grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    let mut scores = Vec::new();
    for e in &data.examples {
        if e.weight == 0.0 {
            continue;
        }
        data.scores(weights, e, &mut scores);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let log_z = max + z.ln();
        let t = e.target as usize;
        loss -= e.weight * (scores[t] - log_z);
        for (k, s) in scores.iter().enumerate() {
            let p = (s - log_z).exp();
            let coef = e.weight * (p - if k == t { 1.0 } else { 0.0 });
            if coef == 0.0 {
                continue;
            }
            let c = e.first + k;
            for j in data.cand_off[c]..data.cand_off[c + 1] {
                grad[data.ids[j] as usize] += coef * data.vals[j];
            }
        }
    }
    loss
}

fn objective(weights: &[f64], data: &Dataset, n: usize, lambda: f64, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    if n > 0 {
        loss = nll_sum(weights, data, grad) / n as f64;
        let inv = 1.0 / n as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
    }
    if lambda > 0.0 {
        let mut sq = 0.0;
        for (g, w) in grad.iter_mut().zip(weights) {
            *g += lambda * w;
            sq += w * w;
        }
        loss += 0.5 * lambda * sq;
    }
    loss
}

/// `−(1/|D|) Σ w log p(ã|s) + (λ/2)‖θ‖²` and its exact gradient; `|D|`
/// counts every example including zero-weight ones.
pub fn loss_and_gradient(policy: &Policy, data: &Dataset, lambda: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; policy.weights.len()];
    let loss = objective(&policy.weights, data, data.len(), lambda, &mut grad);
    (loss, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub l2_lambda: f64,
    pub learning_rate: f64,
    /// Nesterov momentum coefficient in [0, 1); 0 gives plain gradient descent.
    pub momentum: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Epochs between validation evaluations.
    pub eval_every: usize,
    /// Stop once the gradient norm falls below this.
    pub grad_tolerance: f64,
    /// Recorded for provenance; full-batch descent draws no randomness.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2_lambda: 1e-4,
            learning_rate: 20.0,
            momentum: 0.8,
            max_epochs: 200,
            early_stop_patience: 4,
            eval_every: 10,
            grad_tolerance: 1e-7,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), PolicyError> {
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(PolicyError::Config("l2_lambda must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PolicyError::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PolicyError::Config("momentum must lie in [0, 1)".into()));
        }
        if self.max_epochs == 0 || self.eval_every == 0 || self.early_stop_patience == 0 {
            return Err(PolicyError::Config("max_epochs, eval_every and early_stop_patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub epochs: usize,
    /// Validation accuracy of the returned policy, if validation was given.
    pub validation_accuracy: Option<f64>,
    /// Objective on the zero-weight-filtered data at the returned policy.
    pub loss: f64,
}

/// Full-batch gradient descent on the weight-1 examples of `data`, starting
/// from `init`.
///
/// With `validation`, the policy is scored every `eval_every` epochs (and
/// before the first step); training stops after `early_stop_patience`
/// evaluations without improvement and the best-scoring snapshot is
/// returned, earlier snapshots winning ties.
pub fn train(init: &Policy, data: &Dataset, cfg: &TrainConfig, validation: Option<&EvalSet>) -> Result<TrainOutcome, PolicyError> {
    cfg.check()?;
    let n = data.effective_len();
    let mut grad = vec![0.0; init.weights.len()];
    if n == 0 {
        let loss = objective(&init.weights, data, 0, cfg.l2_lambda, &mut grad);
        let validation_accuracy = validation.map(|v| v.accuracy(init));
        return Ok(TrainOutcome { policy: init.clone(), epochs: 0, validation_accuracy, loss });
    }
    let mut policy = init.clone();
    let mut best: Option<(f64, Policy)> = validation.map(|v| (v.accuracy(&policy), policy.clone()));
    let mut stale = 0;
    let mut epochs = 0;
    // Nesterov form: `grad` is taken at the look-ahead point `weights + m * velocity`.
    let m = cfg.momentum;
    let mut velocity = vec![0.0; init.weights.len()];
    let mut lookahead = policy.weights.clone();
    let mut loss = objective(&lookahead, data, n, cfg.l2_lambda, &mut grad);
    while epochs < cfg.max_epochs {
        if !loss.is_finite() {
            return Err(PolicyError::Diverged(epochs));
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < cfg.grad_tolerance {
            break;
        }
        for ((w, v), (g, la)) in policy.weights.iter_mut().zip(velocity.iter_mut()).zip(grad.iter().zip(lookahead.iter_mut())) {
            *v = m * *v - cfg.learning_rate * g;
            *w += *v;
            *la = *w + m * *v;
        }
        epochs += 1;
        loss = objective(&lookahead, data, n, cfg.l2_lambda, &mut grad);
        if let (Some(v), Some((best_acc, best_policy))) = (validation, best.as_mut()) {
            if epochs % cfg.eval_every == 0 {
                let acc = v.accuracy(&policy);
                if acc > *best_acc {
                    *best_acc = acc;
                    *best_policy = policy.clone();
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.early_stop_patience {
                        break;
                    }
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(PolicyError::Diverged(epochs));
    }
    match best {
        Some((acc, p)) => {
            let loss = objective(&p.weights, data, n, cfg.l2_lambda, &mut grad);
            Ok(TrainOutcome { policy: p, epochs, validation_accuracy: Some(acc), loss })
        }
        None => {
            let loss = objective(&policy.weights, data, n, cfg.l2_lambda, &mut grad);
            Ok(TrainOutcome { policy, epochs, validation_accuracy: None, loss })
        }
    }
}

/// Gold decision paths of a question set, precompiled for exact-match
/// scoring.
///
/// Greedy decoding reproduces the gold query iff the first-maximum candidate
/// equals the gold action at every gold-prefix state, so query-match accuracy
/// needs no decoding off the gold path.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    steps: Dataset,
    questions: Vec<Range<usize>>,
}

impl EvalSet {
    pub fn build(items: &[CorpusItem], tables: &HashMap<&str, &Table>) -> Result<Self, PolicyError> {
        let mut steps = Dataset::new();
        let mut questions = Vec::with_capacity(items.len());
        for item in items {
            let table = tables.get(item.table_id.as_str()).ok_or_else(|| PolicyError::Stage(format!("unknown table {}", item.table_id)))?;
            let ctx = QuestionContext::new(&item.tokens(), table);
            let traj = item.gold.to_trajectory(item.tokens(), item.table_id.as_str().into());
            let start = steps.len();
            for (state, action) in traj.states.iter().zip(&traj.actions) {
                let feats = ctx.featurize(state)?;
                let target = feats.iter().position(|(a, _)| a == action).map_or(u32::MAX, |t| t as u32);
                let cands: Vec<FeatureVector> = feats.into_iter().map(|(_, f)| f).collect();
                steps.push_raw(&cands, target, 1.0)?;
            }
            questions.push(start..steps.len());
        }
        Ok(EvalSet { steps, questions })
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// Per-question exact-match outcome.
    pub fn correct(&self, policy: &Policy) -> Vec<bool> {
        let mut buf = Vec::new();
        self.questions
            .iter()
            .map(|r| self.steps.examples[r.clone()].iter().all(|e| self.steps.predicts_target(&policy.weights, e, &mut buf)))
            .collect()
    }

    pub fn accuracy(&self, policy: &Policy) -> f64 {
        if self.questions.is_empty() {
            return 0.0;
        }
        self.correct(policy).iter().filter(|c| **c).count() as f64 / self.questions.len() as f64
    }
}
