//! Exact analysis on small tabular environments: expert and mixture state
//! distributions, the cost `J`, the confident-error diagnostics, the
//! distribution-shift inequality, supervised minimizers and tabular runs of
//! the interactive loop.
//!
//! States are `(observation, prefix)`; questions sharing an observation
//! alias each other. Once a rollout leaves the gold prefix its mass moves to
//! a per-step `Failed` state on which the expert is not consulted and the
//! loss is zero.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::argmax;

/// Slack for floating-point comparisons of exact quantities.
pub const EXACT_TOL: f64 = 1e-12;

/// Upper bound on enumerated gold states.
pub const MAX_STATES: usize = 100_000;

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("invalid environment: {0}")]
    Env(String),
    #[error("step {t} is outside 1..={horizon}")]
    Step { t: usize, horizon: usize },
    #[error("policy has no row for state {0:?}")]
    Coverage(StateKey),
    #[error("policy row for {0:?} is not a distribution")]
    Row(StateKey),
    #[error("decomposition mismatch: joint {joint} vs decomposed {decomposed}")]
    Identity { joint: f64, decomposed: f64 },
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateKey {
    pub observation: u32,
    pub prefix: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabQuestion {
    pub observation: u32,
    pub gold: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularEnv {
    pub horizon: usize,
    pub num_actions: usize,
    pub questions: Vec<TabQuestion>,
}

impl TabularEnv {
    pub fn new(horizon: usize, num_actions: usize, questions: Vec<TabQuestion>) -> Result<Self, TheoryError> {
        let env = TabularEnv { horizon, num_actions, questions };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        if self.horizon == 0 || self.num_actions == 0 || self.questions.is_empty() {
            return Err(TheoryError::Env("horizon, action count and question count must be positive".into()));
        }
        for q in &self.questions {
            if q.gold.len() != self.horizon {
                return Err(TheoryError::Env(format!("gold trajectory of length {} in a horizon-{} environment", q.gold.len(), self.horizon)));
            }
            if q.gold.iter().any(|&a| a >= self.num_actions) {
                return Err(TheoryError::Env("gold action outside the alphabet".into()));
            }
        }
        if self.questions.len() * self.horizon > MAX_STATES {
            return Err(TheoryError::Env("too many states to enumerate".into()));
        }
        Ok(())
    }

    /// State of question `q` after its first `t - 1` gold actions.
    pub fn gold_state(&self, q: usize, t: usize) -> StateKey {
        let question = &self.questions[q];
        StateKey { observation: question.observation, prefix: question.gold[..t - 1].to_vec() }
    }

    fn check_step(&self, t: usize) -> Result<(), TheoryError> {
        if t == 0 || t > self.horizon {
            return Err(TheoryError::Step { t, horizon: self.horizon });
        }
        Ok(())
    }

    fn prior(&self) -> f64 {
        1.0 / self.questions.len() as f64
    }

    /// Random environment; `num_observations < num_questions` forces aliasing.
    pub fn random(rng: &mut impl Rng, horizon: usize, num_questions: usize, num_actions: usize, num_observations: u32) -> Self {
        let questions = (0..num_questions)
            .map(|_| TabQuestion {
                observation: rng.random_range(0..num_observations.max(1)),
                gold: (0..horizon).map(|_| rng.random_range(0..num_actions)).collect(),
            })
            .collect();
        TabularEnv::new(horizon, num_actions, questions).expect("random environment is valid")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TabState {
    At(StateKey),
    /// Mass that left the gold prefixes before step `t`.
    Failed(usize),
}

/// Probability mass over states.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateDistribution {
    pub mass: BTreeMap<TabState, f64>,
}

impl StateDistribution {
    fn add(&mut self, s: TabState, m: f64) {
        if m != 0.0 {
            *self.mass.entry(s).or_insert(0.0) += m;
        }
    }

    pub fn total(&self) -> f64 {
        self.mass.values().sum()
    }

    pub fn l1(&self, other: &StateDistribution) -> f64 {
        let mut d = 0.0;
        for (k, v) in &self.mass {
            d += (v - other.mass.get(k).copied().unwrap_or(0.0)).abs();
        }
        for (k, v) in &other.mass {
            if !self.mass.contains_key(k) {
                d += v.abs();
            }
        }
        d
    }

    /// `(1/T) Σ_t d_t`.
    pub fn average(steps: &[StateDistribution]) -> StateDistribution {
        let mut out = StateDistribution::default();
        let w = 1.0 / steps.len() as f64;
        for d in steps {
            for (k, v) in &d.mass {
                out.add(k.clone(), w * v);
            }
        }
        out
    }
}

/// Explicit per-state action distributions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub num_actions: usize,
    pub rows: HashMap<StateKey, Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(num_actions: usize) -> Self {
        TabularPolicy { num_actions, rows: HashMap::new() }
    }

    pub fn row(&self, s: &StateKey) -> Result<&[f64], TheoryError> {
        let row = self.rows.get(s).ok_or_else(|| TheoryError::Coverage(s.clone()))?;
        if row.len() != self.num_actions || (row.iter().sum::<f64>() - 1.0).abs() > EXACT_TOL || row.iter().any(|p| !(*p >= 0.0)) {
            return Err(TheoryError::Row(s.clone()));
        }
        Ok(row)
    }

    /// Puts all mass on the gold action at every gold state. Fails when
    /// aliased questions disagree on the gold action at a shared state.
    pub fn expert(env: &TabularEnv) -> Result<Self, TheoryError> {
        let mut p = TabularPolicy::new(env.num_actions);
        for (q, question) in env.questions.iter().enumerate() {
            for t in 1..=env.horizon {
                let mut row = vec![0.0; env.num_actions];
                row[question.gold[t - 1]] = 1.0;
                let key = env.gold_state(q, t);
                if p.rows.get(&key).is_some_and(|r| *r != row) {
                    return Err(TheoryError::Env(format!("aliased state {key:?} has conflicting gold actions")));
                }
                p.rows.insert(key, row);
            }
        }
        Ok(p)
    }

    pub fn uniform(env: &TabularEnv) -> Self {
        let mut p = TabularPolicy::new(env.num_actions);
        for q in 0..env.questions.len() {
            for t in 1..=env.horizon {
                p.rows.insert(env.gold_state(q, t), vec![1.0 / env.num_actions as f64; env.num_actions]);
            }
        }
        p
    }

    /// Softmax of random logits with scale drawn from `[0, max_scale]` per
    /// row, defined on every gold state.
    pub fn random(env: &TabularEnv, rng: &mut impl Rng, max_scale: f64) -> Self {
        let mut p = TabularPolicy::new(env.num_actions);
        for q in 0..env.questions.len() {
            for t in 1..=env.horizon {
                let key = env.gold_state(q, t);
                if p.rows.contains_key(&key) {
                    continue;
                }
                let scale = rng.random_range(0.0..=max_scale);
                let logits: Vec<f64> = (0..env.num_actions).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
                p.rows.insert(key, crate::policy::softmax(&logits));
            }
        }
        p
    }

    /// Loss `1 − p(gold | s)`.
    pub fn loss(&self, s: &StateKey, gold: usize) -> Result<f64, TheoryError> {
        Ok(1.0 - self.row(s)?[gold])
    }
}

/// `d^t_*`: mass `1/|Q|` on each question's gold prefix of length `t − 1`.
pub fn expert_distribution(env: &TabularEnv, t: usize) -> Result<StateDistribution, TheoryError> {
    env.check_step(t)?;
    let mut d = StateDistribution::default();
    for q in 0..env.questions.len() {
        d.add(TabState::At(env.gold_state(q, t)), env.prior());
    }
    Ok(d)
}

/// Step at which question `q` first leaves the gold path under the mixture
/// (`None` if it never does): at each gold state the policy's argmax is
/// executed when its probability is at least `mu`, the gold action otherwise.
fn mixture_exit(env: &TabularEnv, policy: &TabularPolicy, mu: f64, q: usize, upto: usize) -> Result<Option<usize>, TheoryError> {
    for s in 1..upto {
        let row = policy.row(&env.gold_state(q, s))?;
        let best = argmax(row).expect("non-empty row");
        if row[best] >= mu && best != env.questions[q].gold[s - 1] {
            return Ok(Some(s));
        }
    }
    Ok(None)
}

/// `d^t_{π_i}` of the mixture policy.
pub fn mixture_distribution(env: &TabularEnv, policy: &TabularPolicy, mu: f64, t: usize) -> Result<StateDistribution, TheoryError> {
    env.check_step(t)?;
    let mut d = StateDistribution::default();
    for q in 0..env.questions.len() {
        match mixture_exit(env, policy, mu, q, t)? {
            None => d.add(TabState::At(env.gold_state(q, t)), env.prior()),
            Some(_) => d.add(TabState::Failed(t), env.prior()),
        }
    }
    Ok(d)
}

/// `J(π) = T · E_{s∼d_*}[1 − p(a*|s)]` under the step-averaged expert
/// distribution.
pub fn cost_j(env: &TabularEnv, policy: &TabularPolicy) -> Result<f64, TheoryError> {
    let mut total = 0.0;
    for (q, question) in env.questions.iter().enumerate() {
        for t in 1..=env.horizon {
            total += env.prior() * policy.loss(&env.gold_state(q, t), question.gold[t - 1])?;
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Query probability per step under `d^t_*`.
    pub beta_t: Vec<f64>,
    /// Error probability given no query, per step.
    pub eps_tilde_t: Vec<f64>,
    /// `(1/T) Σ_t ε̃_t (1 − β_t)`.
    pub e: f64,
    /// Probability of a confident wrong action under the averaged expert
    /// distribution, counted directly.
    pub e_joint: f64,
    pub beta: f64,
    pub eps_tilde: f64,
}

/// Query rate, conditional confident-error rate and their product, with the
/// product cross-checked against a direct count.
pub fn diagnostics(env: &TabularEnv, policy: &TabularPolicy, mu: f64) -> Result<Diagnostics, TheoryError> {
    let horizon = env.horizon;
    let mut beta_t = vec![0.0; horizon];
    let mut joint_t = vec![0.0; horizon];
    let mut e_joint = 0.0;
    for (q, question) in env.questions.iter().enumerate() {
        for t in 1..=horizon {
            let row = policy.row(&env.gold_state(q, t))?;
            let best = argmax(row).expect("non-empty row");
            if row[best] < mu {
                beta_t[t - 1] += env.prior();
            } else if best != question.gold[t - 1] {
                joint_t[t - 1] += env.prior();
                e_joint += env.prior() / horizon as f64;
            }
        }
    }
    let eps_tilde_t: Vec<f64> = joint_t.iter().zip(&beta_t).map(|(j, b)| if *b < 1.0 { j / (1.0 - b) } else { 0.0 }).collect();
    let e = eps_tilde_t.iter().zip(&beta_t).map(|(eps, b)| eps * (1.0 - b)).sum::<f64>() / horizon as f64;
    if (e - e_joint).abs() > EXACT_TOL {
        return Err(TheoryError::Identity { joint: e_joint, decomposed: e });
    }
    let beta = beta_t.iter().sum::<f64>() / horizon as f64;
    let eps_tilde = eps_tilde_t.iter().sum::<f64>() / horizon as f64;
    Ok(Diagnostics { beta_t, eps_tilde_t, e, e_joint, beta, eps_tilde })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    /// `‖d_{π_i} − d_*‖₁` of the step-averaged distributions.
    pub lhs: f64,
    /// `2 T e_i`.
    pub rhs: f64,
    pub e: f64,
    pub holds: bool,
}

pub fn verify_lemma1(env: &TabularEnv, policy: &TabularPolicy, mu: f64) -> Result<Lemma1Report, TheoryError> {
    let diag = diagnostics(env, policy, mu)?;
    let mut expert = Vec::with_capacity(env.horizon);
    let mut mixture = Vec::with_capacity(env.horizon);
    for t in 1..=env.horizon {
        expert.push(expert_distribution(env, t)?);
        mixture.push(mixture_distribution(env, policy, mu, t)?);
    }
    let lhs = StateDistribution::average(&mixture).l1(&StateDistribution::average(&expert));
    let rhs = 2.0 * env.horizon as f64 * diag.e;
    let holds = lhs <= rhs + EXACT_TOL && (diag.e != 0.0 || lhs == 0.0);
    Ok(Lemma1Report { lhs, rhs, e: diag.e, holds })
}

/// Per-state target mass: how much expert mass each gold action receives.
fn gold_counts(env: &TabularEnv) -> BTreeMap<StateKey, Vec<f64>> {
    let mut counts: BTreeMap<StateKey, Vec<f64>> = BTreeMap::new();
    let w = env.prior() / env.horizon as f64;
    for (q, question) in env.questions.iter().enumerate() {
        for t in 1..=env.horizon {
            counts.entry(env.gold_state(q, t)).or_insert_with(|| vec![0.0; env.num_actions])[question.gold[t - 1]] += w;
        }
    }
    counts
}

fn state_nll(z: &[f64], c: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    c.iter().zip(z).map(|(ci, zi)| if *ci > 0.0 { ci * (lse - zi) } else { 0.0 }).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub grad_tolerance: f64,
    pub max_iterations: usize,
    /// Largest logit change per step.
    pub max_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { grad_tolerance: 1e-8, max_iterations: 10_000, max_step: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub j: f64,
    pub epsilon_n: f64,
    /// Converged expected negative log-likelihood under `d_*`.
    pub nll: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Largest gap between a learned probability and the expert's empirical
    /// action frequency at its state.
    pub max_frequency_gap: f64,
    pub holds: bool,
}

/// Fits the tabular softmax class to the expert's state-action distribution
/// by minimizing expected negative log-likelihood (diagonal Newton steps in
/// logit space) and compares `J(π̂_sup)` with `T ε_N`, where `ε_N` is the
/// fitted policy's expected loss under `d_*`.
pub fn verify_theorem1(env: &TabularEnv, cfg: &OptimizerConfig) -> Result<(TabularPolicy, Theorem1Report), TheoryError> {
    let counts = gold_counts(env);
    let mut logits: BTreeMap<StateKey, Vec<f64>> = counts.keys().map(|k| (k.clone(), vec![0.0; env.num_actions])).collect();
    let mut iterations = 0;
    let grad_norm = loop {
        let mut sq = 0.0;
        for (k, z) in logits.iter_mut() {
            let c = &counts[k];
            let w: f64 = c.iter().sum();
            let p = crate::policy::softmax(z);
            let g: Vec<f64> = (0..z.len()).map(|a| w * p[a] - c[a]).collect();
            sq += g.iter().map(|x| x * x).sum::<f64>();
            // Diagonal Newton direction with backtracking on the state's NLL.
            let dir: Vec<f64> = (0..z.len())
                .map(|a| {
                    let h = w * p[a] * (1.0 - p[a]);
                    let step = if h > 1e-300 { g[a] / h } else { g[a].signum() * cfg.max_step };
                    -step.clamp(-cfg.max_step, cfg.max_step)
                })
                .collect();
            let slope: f64 = g.iter().zip(&dir).map(|(x, d)| x * d).sum();
            let f0 = state_nll(z, c);
            let mut t = 1.0;
            while t > 1e-10 {
                let trial: Vec<f64> = z.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
                if state_nll(&trial, c) <= f0 + 1e-4 * t * slope {
                    *z = trial;
                    break;
                }
                t *= 0.5;
            }
        }
        let norm = sq.sqrt();
        if norm < cfg.grad_tolerance {
            break norm;
        }
        iterations += 1;
        if iterations >= cfg.max_iterations {
            return Err(TheoryError::NoConvergence(iterations));
        }
    };
    let mut policy = TabularPolicy::new(env.num_actions);
    let mut nll = 0.0;
    let mut max_frequency_gap: f64 = 0.0;
    for (k, z) in &logits {
        let c = &counts[k];
        let w: f64 = c.iter().sum();
        let p = crate::policy::softmax(z);
        for a in 0..p.len() {
            if c[a] > 0.0 {
                nll -= c[a] * p[a].ln();
            }
            max_frequency_gap = max_frequency_gap.max((p[a] - c[a] / w).abs());
        }
        policy.rows.insert(k.clone(), p);
    }
    let j = cost_j(env, &policy)?;
    // ε_N: average loss along gold trajectories, recomputed per question.
    let mut epsilon_n = 0.0;
    for (q, question) in env.questions.iter().enumerate() {
        let traj_loss: f64 = (1..=env.horizon).map(|t| policy.loss(&env.gold_state(q, t), question.gold[t - 1])).sum::<Result<f64, _>>()?;
        epsilon_n += traj_loss / env.horizon as f64;
    }
    epsilon_n /= env.questions.len() as f64;
    let holds = (j - env.horizon as f64 * epsilon_n).abs() < 1e-3;
    Ok((policy, Theorem1Report { j, epsilon_n, nll, grad_norm, iterations, max_frequency_gap, holds }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularRunConfig {
    pub mu: f64,
    pub iterations: usize,
    /// Questions whose gold trajectories seed the aggregated data.
    pub init_questions: usize,
    /// Additive smoothing of the count-based fit.
    pub smoothing: f64,
}

impl Default for TabularRunConfig {
    fn default() -> Self {
        TabularRunConfig { mu: 0.9, iterations: 20, init_questions: 1, smoothing: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub j: Vec<f64>,
    pub j_best: f64,
    pub epsilon_n: f64,
    pub e_i: Vec<f64>,
    pub beta_i: Vec<f64>,
    pub eps_tilde_i: Vec<f64>,
    /// `(1/n) Σ_{i≤n} ℓ_i(π̂_i) − ε_n` for each prefix length `n`.
    pub empirical_regret: Vec<f64>,
    pub l_max: f64,
    pub lemma1_lhs: Vec<f64>,
    pub lemma1_rhs: Vec<f64>,
    /// `T [ε_N + (2 T ℓ_max / N) Σ e_i]`.
    pub bound: f64,
}

/// Maximum-likelihood fit of aggregated `(state, action)` counts with
/// additive smoothing; states without data are uniform.
fn fit_counts(env: &TabularEnv, counts: &BTreeMap<StateKey, Vec<f64>>, smoothing: f64) -> TabularPolicy {
    let mut p = TabularPolicy::uniform(env);
    for (k, c) in counts {
        let total: f64 = c.iter().sum::<f64>() + smoothing * env.num_actions as f64;
        if total > 0.0 {
            p.rows.insert(k.clone(), c.iter().map(|x| (x + smoothing) / total).collect());
        }
    }
    p
}

/// `ℓ_i(π) = E_{s∼d_{π_i}}[ℓ(s, π)]` needs the on-gold mass of every
/// `(state, gold action)` under the mixture of iterate `i`.
fn mixture_gold_mass(env: &TabularEnv, policy: &TabularPolicy, mu: f64) -> Result<BTreeMap<StateKey, Vec<f64>>, TheoryError> {
    let mut mass: BTreeMap<StateKey, Vec<f64>> = BTreeMap::new();
    let w = env.prior() / env.horizon as f64;
    for (q, question) in env.questions.iter().enumerate() {
        let exit = mixture_exit(env, policy, mu, q, env.horizon + 1)?;
        for t in 1..=exit.unwrap_or(env.horizon) {
            mass.entry(env.gold_state(q, t)).or_insert_with(|| vec![0.0; env.num_actions])[question.gold[t - 1]] += w;
        }
    }
    Ok(mass)
}

fn expected_loss(policy: &TabularPolicy, mass: &BTreeMap<StateKey, Vec<f64>>) -> Result<f64, TheoryError> {
    let mut total = 0.0;
    for (k, m) in mass {
        let row = policy.row(k)?;
        total += m.iter().zip(row).map(|(mi, p)| mi * (1.0 - p)).sum::<f64>();
    }
    Ok(total)
}

/// Interactive imitation on a tabular environment: each iteration rolls out
/// the mixture of the current iterate on every question, collects the
/// executed action at confident steps and the gold action at queried ones,
/// and refits on everything aggregated so far.
pub fn run_tabular(env: &TabularEnv, cfg: &TabularRunConfig) -> Result<(Vec<TabularPolicy>, TheoryReport), TheoryError> {
    let mut counts: BTreeMap<StateKey, Vec<f64>> = BTreeMap::new();
    for (q, question) in env.questions.iter().enumerate().take(cfg.init_questions) {
        for t in 1..=env.horizon {
            counts.entry(env.gold_state(q, t)).or_insert_with(|| vec![0.0; env.num_actions])[question.gold[t - 1]] += 1.0;
        }
    }
    let mut policy = fit_counts(env, &counts, cfg.smoothing);
    let mut iterates = Vec::with_capacity(cfg.iterations);
    let mut masses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        masses.push(mixture_gold_mass(env, &policy, cfg.mu)?);
        for (q, question) in env.questions.iter().enumerate() {
            for t in 1..=env.horizon {
                let key = env.gold_state(q, t);
                let row = policy.row(&key)?;
                let best = argmax(row).expect("non-empty row");
                let gold = question.gold[t - 1];
                let executed = if row[best] >= cfg.mu { best } else { gold };
                counts.entry(key).or_insert_with(|| vec![0.0; env.num_actions])[executed] += 1.0;
                if executed != gold {
                    break;
                }
            }
        }
        iterates.push(policy);
        policy = fit_counts(env, &counts, cfg.smoothing);
    }
    let report = regret_report(env, &iterates, &masses, cfg.mu)?;
    Ok((iterates, report))
}

/// Regret, diagnostics and the bound for a sequence of iterates.
fn regret_report(env: &TabularEnv, iterates: &[TabularPolicy], masses: &[BTreeMap<StateKey, Vec<f64>>], mu: f64) -> Result<TheoryReport, TheoryError> {
    let horizon = env.horizon as f64;
    let mut j = Vec::new();
    let mut e_i = Vec::new();
    let mut beta_i = Vec::new();
    let mut eps_tilde_i = Vec::new();
    let mut lemma1_lhs = Vec::new();
    let mut lemma1_rhs = Vec::new();
    let mut empirical_regret = Vec::new();
    let mut l_max: f64 = 0.0;
    let mut own_loss_sum = 0.0;
    let mut pooled: BTreeMap<StateKey, Vec<f64>> = BTreeMap::new();
    for (n, (policy, mass)) in iterates.iter().zip(masses).enumerate() {
        j.push(cost_j(env, policy)?);
        let d = diagnostics(env, policy, mu)?;
        e_i.push(d.e);
        beta_i.push(d.beta);
        eps_tilde_i.push(d.eps_tilde);
        let l1 = verify_lemma1(env, policy, mu)?;
        lemma1_lhs.push(l1.lhs);
        lemma1_rhs.push(l1.rhs);
        for (q, question) in env.questions.iter().enumerate() {
            for t in 1..=env.horizon {
                l_max = l_max.max(policy.loss(&env.gold_state(q, t), question.gold[t - 1])?);
            }
        }
        own_loss_sum += expected_loss(policy, mass)?;
        for (k, m) in mass {
            let slot = pooled.entry(k.clone()).or_insert_with(|| vec![0.0; env.num_actions]);
            slot.iter_mut().zip(m).for_each(|(s, x)| *s += x);
        }
        // Best fixed policy in hindsight: per state, all mass on the action
        // with the most pooled gold mass.
        let best_in_hindsight: f64 = pooled.values().map(|m| m.iter().sum::<f64>() - m.iter().copied().fold(0.0, f64::max)).sum();
        let count = (n + 1) as f64;
        empirical_regret.push(own_loss_sum / count - best_in_hindsight / count);
    }
    let n = iterates.len().max(1) as f64;
    let epsilon_n = pooled.values().map(|m| m.iter().sum::<f64>() - m.iter().copied().fold(0.0, f64::max)).sum::<f64>() / n;
    let bound = horizon * (epsilon_n + 2.0 * horizon * l_max / n * e_i.iter().sum::<f64>());
    let j_best = j.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(TheoryReport { j, j_best, epsilon_n, e_i, beta_i, eps_tilde_i, empirical_regret, l_max, lemma1_lhs, lemma1_rhs, bound })
}

/// Regret report for an externally produced iterate sequence, each rolled
/// out as a mixture with threshold `mu`.
pub fn track_regret(env: &TabularEnv, iterates: &[TabularPolicy], mu: f64) -> Result<TheoryReport, TheoryError> {
    let masses = iterates.iter().map(|p| mixture_gold_mass(env, p, mu)).collect::<Result<Vec<_>, _>>()?;
    regret_report(env, iterates, &masses, mu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mu: f64,
    pub e_i: f64,
    pub beta_i: f64,
    pub eps_tilde_i: f64,
    pub lemma1_lhs: f64,
    pub lemma1_rhs: f64,
    pub j: f64,
    /// `T (E_{d_{π_i}}[ℓ] + ℓ_max · 2 T e_i)`, an upper bound on `J`.
    pub bound: f64,
}

pub const SWEEP_HEADER: &str = "mu,e_i,beta_i,eps_tilde_i,lemma1_lhs,lemma1_rhs,J,bound";

pub fn sweep(env: &TabularEnv, policy: &TabularPolicy, mus: &[f64]) -> Result<Vec<SweepRow>, TheoryError> {
    let j = cost_j(env, policy)?;
    let mut l_max: f64 = 0.0;
    for (q, question) in env.questions.iter().enumerate() {
        for t in 1..=env.horizon {
            l_max = l_max.max(policy.loss(&env.gold_state(q, t), question.gold[t - 1])?);
        }
    }
    mus.iter()
        .map(|&mu| {
            let d = diagnostics(env, policy, mu)?;
            let l1 = verify_lemma1(env, policy, mu)?;
            let mixture_loss = env.horizon as f64 * expected_loss(policy, &mixture_gold_mass(env, policy, mu)?)?;
            let horizon = env.horizon as f64;
            Ok(SweepRow {
                mu,
                e_i: d.e,
                beta_i: d.beta,
                eps_tilde_i: d.eps_tilde,
                lemma1_lhs: l1.lhs,
                lemma1_rhs: l1.rhs,
                j,
                bound: mixture_loss + horizon * l_max * 2.0 * horizon * d.e,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{},{},{}\n", r.mu, r.e_i, r.beta_i, r.eps_tilde_i, r.lemma1_lhs, r.lemma1_rhs, r.j, r.bound));
    }
    out
}

/// Parses `start:step:end` (inclusive, tolerant to rounding) into values.
pub fn parse_range(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [a, s, b] = parts.as_slice() else {
        return Err(format!("expected start:step:end, got {spec:?}"));
    };
    let parse = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    let (a, s, b) = (parse(a)?, parse(s)?, parse(b)?);
    if !(s > 0.0) || b < a || !a.is_finite() || !b.is_finite() {
        return Err(format!("invalid range {spec:?}"));
    }
    let n = ((b - a) / s + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| {
        let v = a + i as f64 * s;
        (v * 1e12).round() / 1e12
    }).collect())
}

/// Restricts a trained log-linear policy to the gold states of `items`
/// sharing one condition count, giving an exactly analyzable environment.
/// Actions are interned across all candidate sets; non-candidates get
/// probability zero.
pub fn project_policy(
    policy: &crate::policy::Policy,
    items: &[crate::corpus::CorpusItem],
    tables: &HashMap<&str, &crate::sql::Table>,
    conditions: usize,
) -> Result<(TabularEnv, TabularPolicy), crate::learning::LearningError> {
    use crate::policy::QuestionContext;
    let chosen: Vec<&crate::corpus::CorpusItem> = items.iter().filter(|i| i.gold.conds.len() == conditions).collect();
    if chosen.is_empty() {
        return Err(crate::learning::LearningError::Config(format!("no items with {conditions} conditions")));
    }
    let mut alphabet: Vec<crate::sql::Action> = Vec::new();
    let index = |a: &crate::sql::Action, alphabet: &mut Vec<crate::sql::Action>| match alphabet.iter().position(|x| x == a) {
        Some(i) => i,
        None => {
            alphabet.push(a.clone());
            alphabet.len() - 1
        }
    };
    let mut questions = Vec::new();
    let mut rows: Vec<(StateKey, Vec<(usize, f64)>)> = Vec::new();
    for (qi, item) in chosen.iter().enumerate() {
        let table = tables.get(item.table_id.as_str()).ok_or_else(|| crate::learning::LearningError::UnknownTable(item.table_id.clone()))?;
        let tokens = item.tokens();
        let ctx = QuestionContext::new(&tokens, table);
        let traj = item.gold.to_trajectory(tokens, item.table_id.as_str().into());
        let mut gold = Vec::new();
        for (s, a) in traj.states.iter().zip(&traj.actions) {
            let dist = policy.action_distribution(&ctx, s)?;
            let key = StateKey { observation: qi as u32, prefix: gold.clone() };
            rows.push((key, dist.iter().map(|(a, p)| (index(a, &mut alphabet), *p)).collect()));
            gold.push(index(a, &mut alphabet));
        }
        questions.push(TabQuestion { observation: qi as u32, gold });
    }
    let env = TabularEnv::new(3 + 3 * conditions, alphabet.len(), questions).map_err(|e| crate::learning::LearningError::Config(e.to_string()))?;
    let mut tab = TabularPolicy::new(alphabet.len());
    for (key, sparse) in rows {
        let mut row = vec![0.0; alphabet.len()];
        for (i, p) in sparse {
            row[i] += p;
        }
        tab.rows.insert(key, row);
    }
    Ok((env, tab))
}
