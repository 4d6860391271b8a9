//! Group-relative policy optimization on a tabular softmax policy.
//!
//! The objective for one group of G samples is
//!
//! ```text
//! J(θ) = 1/G Σ_i [ A_i Σ_t log π_θ(a_t|s_t) − β Σ_t k3(log π_ref − log π_θ) ]
//! ```
//!
//! with group-normalized advantages A_i and the k3 KL estimator
//! `exp(Δ) − Δ − 1`. Several groups are averaged. There is no ratio
//! clipping: every batch gets exactly one gradient step.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{parse_turn, Termination, Trajectory};
use crate::reward::{total_reward, AnswerKey, TermFrequencyEmbedder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub beta: f64,
    pub eps_std: f64,
    pub learning_rate: f64,
    pub updates: usize,
    pub seed: u64,
    /// Reset the reference policy to θ every this many updates.
    pub ref_refresh: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            beta: 0.04,
            eps_std: 1e-6,
            learning_rate: 2.0,
            updates: 500,
            seed: 0,
            ref_refresh: 10,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("group size {0} < 2; advantages are undefined")]
    GroupTooSmall(usize),
    #[error("non-finite gradient at state {state}, action {action}")]
    NonFiniteGradient { state: usize, action: usize },
    #[error("non-finite policy parameter at state {state}, action {action}")]
    NonFiniteParams { state: usize, action: usize },
    #[error("invalid config: {0}")]
    Config(String),
}

/// `(r − mean) / (population std + eps)`.
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let denom = var.sqrt() + eps_std;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// k3 estimator of KL(π_θ ‖ π_ref) from one sample.
pub fn kl_penalty(logp_theta: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_theta;
    // exp_m1 keeps precision near Δ = 0
    (d.exp_m1() - d).max(0.0)
}

/// One logit row per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub logits: Vec<Vec<f64>>,
}

impl PolicyParams {
    pub fn uniform(states: usize, actions: usize) -> Self {
        Self {
            logits: vec![vec![0.0; actions]; states],
        }
    }

    pub fn states(&self) -> usize {
        self.logits.len()
    }

    pub fn check_finite(&self) -> Result<(), GrpoError> {
        for (state, row) in self.logits.iter().enumerate() {
            if let Some(action) = row.iter().position(|v| !v.is_finite()) {
                return Err(GrpoError::NonFiniteParams { state, action });
            }
        }
        Ok(())
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        let row = &self.logits[state];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        let row = &self.logits[state];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        row[action] - lse
    }

    /// Inverse-CDF draw from one uniform.
    pub fn sample(&self, state: usize, rng: &mut impl RngCore) -> usize {
        let p = self.probs(state);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, pa) in p.iter().enumerate() {
            acc += pa;
            if u < acc {
                return a;
            }
        }
        p.len() - 1
    }

    /// Largest per-state total-variation distance.
    pub fn max_tv_distance(&self, other: &PolicyParams) -> f64 {
        (0..self.states())
            .map(|s| {
                let (p, q) = (self.probs(s), other.probs(s));
                0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub logp_theta: f64,
    pub logp_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub steps: Vec<Step>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub samples: Vec<Sample>,
}

impl RolloutGroup {
    /// Builds a group from `(state, action)` paths and rewards, filling in
    /// log-probabilities under both policies.
    pub fn from_paths(paths: Vec<(Vec<(usize, usize)>, f64)>, policy: &PolicyParams, reference: &PolicyParams) -> Self {
        let samples = paths
            .into_iter()
            .map(|(path, reward)| Sample {
                steps: path
                    .into_iter()
                    .map(|(state, action)| Step {
                        state,
                        action,
                        logp_theta: policy.log_prob(state, action),
                        logp_ref: reference.log_prob(state, action),
                    })
                    .collect(),
                reward,
            })
            .collect();
        Self { samples }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.reward).collect()
    }

    pub fn mean_kl(&self) -> f64 {
        let steps: Vec<&Step> = self.samples.iter().flat_map(|s| &s.steps).collect();
        if steps.is_empty() {
            return 0.0;
        }
        steps.iter().map(|s| kl_penalty(s.logp_theta, s.logp_ref)).sum::<f64>() / steps.len() as f64
    }
}

/// J(θ) over fixed samples, with log π_θ recomputed from `policy`.
pub fn objective(policy: &PolicyParams, groups: &[RolloutGroup], cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    let mut total = 0.0;
    for g in groups {
        let adv = group_advantages(&g.rewards(), cfg.eps_std)?;
        let n = g.samples.len() as f64;
        for (sample, a) in g.samples.iter().zip(adv) {
            for st in &sample.steps {
                let lp = policy.log_prob(st.state, st.action);
                total += (a * lp - cfg.beta * kl_penalty(lp, st.logp_ref)) / n;
            }
        }
    }
    Ok(total / groups.len().max(1) as f64)
}

/// Analytic ∇J. With Δ = log π_ref − log π_θ, ∂k3/∂θ = (1 − e^Δ) ∇log π_θ and
/// ∇_{logits[s]} log π_θ(a|s) = onehot(a) − π_θ(·|s).
pub fn gradient(policy: &PolicyParams, groups: &[RolloutGroup], cfg: &GrpoConfig) -> Result<PolicyParams, GrpoError> {
    let mut grad = PolicyParams {
        logits: policy.logits.iter().map(|r| vec![0.0; r.len()]).collect(),
    };
    let probs: Vec<Vec<f64>> = (0..policy.states()).map(|s| policy.probs(s)).collect();
    let scale = 1.0 / groups.len().max(1) as f64;
    for g in groups {
        let adv = group_advantages(&g.rewards(), cfg.eps_std)?;
        let n = g.samples.len() as f64;
        for (sample, a) in g.samples.iter().zip(adv) {
            for st in &sample.steps {
                let lp = policy.log_prob(st.state, st.action);
                let d = st.logp_ref - lp;
                let coef = scale * (a + cfg.beta * d.exp_m1()) / n;
                let row = &mut grad.logits[st.state];
                for (j, p) in probs[st.state].iter().enumerate() {
                    row[j] -= coef * p;
                }
                row[st.action] += coef;
            }
        }
    }
    for (state, row) in grad.logits.iter().enumerate() {
        if let Some(action) = row.iter().position(|v| !v.is_finite()) {
            return Err(GrpoError::NonFiniteGradient { state, action });
        }
    }
    Ok(grad)
}

fn l2(p: &PolicyParams) -> f64 {
    p.logits.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub mean_kl: f64,
}

/// One ascent step. On a non-finite gradient `policy` is returned untouched
/// inside the error path; no partial update is applied.
pub fn grpo_update(policy: &PolicyParams, groups: &[RolloutGroup], cfg: &GrpoConfig) -> Result<(PolicyParams, UpdateStats), GrpoError> {
    if cfg.group_size < 2 {
        return Err(GrpoError::GroupTooSmall(cfg.group_size));
    }
    let grad = gradient(policy, groups, cfg)?;
    let mut next = policy.clone();
    for (row, grow) in next.logits.iter_mut().zip(&grad.logits) {
        for (v, g) in row.iter_mut().zip(grow) {
            *v += cfg.learning_rate * g;
        }
    }
    next.check_finite()?;
    let mean_kl = if groups.is_empty() {
        0.0
    } else {
        groups.iter().map(RolloutGroup::mean_kl).sum::<f64>() / groups.len() as f64
    };
    Ok((
        next,
        UpdateStats {
            grad_norm: l2(&grad),
            mean_kl,
        },
    ))
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)` over all
/// parameters, numeric by central differences of step `h`.
pub fn gradient_check(policy: &PolicyParams, groups: &[RolloutGroup], cfg: &GrpoConfig, h: f64) -> Result<f64, GrpoError> {
    let analytic = gradient(policy, groups, cfg)?;
    let mut worst: f64 = 0.0;
    for s in 0..policy.states() {
        for a in 0..policy.logits[s].len() {
            let mut plus = policy.clone();
            plus.logits[s][a] += h;
            let mut minus = policy.clone();
            minus.logits[s][a] -= h;
            let numeric = (objective(&plus, groups, cfg)? - objective(&minus, groups, cfg)?) / (2.0 * h);
            let an = analytic.logits[s][a];
            worst = worst.max((an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

/// Symbolic search-then-answer task. One episode is four decisions, each
/// taken in its own state:
///
/// 0. turn-1 action tag: token 0 opens `<search>`, anything else is stray text
/// 1. the search query word
/// 2. turn-2 action tag: 1 → `<answer>`, 0 → another `<search>`, else stray text
/// 3. the answer (or second query) word
///
/// A malformed tag ends the episode. Rewards come from [`total_reward`] with
/// the term-frequency embedder, so the oracle scores format 1 + answer 1 +
/// search 1 = 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEnv {
    pub vocab: usize,
    pub search_token: usize,
    pub answer_token: usize,
}

const WORDS: [&str; 16] = [
    "amber", "basil", "cedar", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "juniper", "kestrel", "lumen", "maple", "nectar", "onyx",
    "pollen",
];

pub const TOY_STATES: usize = 4;

impl Default for ToyEnv {
    fn default() -> Self {
        Self {
            vocab: 16,
            search_token: 5,
            answer_token: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRollout {
    pub path: Vec<(usize, usize)>,
    pub trajectory: Trajectory,
    pub reward: f64,
}

impl ToyEnv {
    pub fn word(&self, token: usize) -> String {
        match WORDS.get(token) {
            Some(w) => w.to_string(),
            None => format!("tok{token}"),
        }
    }

    pub fn key(&self) -> AnswerKey {
        AnswerKey {
            gold_answers: vec![self.word(self.answer_token)],
            reference_queries: vec![self.word(self.search_token)],
        }
    }

    pub fn oracle_path(&self) -> Vec<(usize, usize)> {
        vec![(0, 0), (1, self.search_token), (2, 1), (3, self.answer_token)]
    }

    /// Builds the trajectory for an action sequence (actions past the
    /// episode end are ignored).
    pub fn trajectory(&self, actions: &[usize]) -> Trajectory {
        let turn = |tag: usize, word: usize, answer_ok: bool| -> String {
            let w = self.word(word);
            match tag {
                0 => format!("<think>t</think><search>{w}</search>"),
                1 if answer_ok => format!("<think>t</think><answer>{w}</answer>"),
                _ => format!("<think>t</think>{w}"),
            }
        };
        let mut turns = Vec::new();
        let terminated_by;
        if actions[0] != 0 {
            turns.push(parse_turn(&turn(actions[0], actions[0], false)));
            terminated_by = Termination::FormatViolation;
        } else {
            turns.push(parse_turn(&turn(0, actions[1], false)));
            match actions.get(2) {
                Some(&tag @ (0 | 1)) => {
                    turns.push(parse_turn(&turn(tag, actions[3], true)));
                    terminated_by = if tag == 1 { Termination::Answer } else { Termination::Budget };
                }
                Some(&other) => {
                    turns.push(parse_turn(&turn(other, other, false)));
                    terminated_by = Termination::FormatViolation;
                }
                None => terminated_by = Termination::Budget,
            }
        }
        Trajectory { turns, terminated_by }
    }

    pub fn score(&self, traj: &Trajectory) -> f64 {
        total_reward(traj, &self.key(), &TermFrequencyEmbedder).total
    }
}

/// Samples one episode; deterministic in `(policy, seed)`.
pub fn toy_env_rollout(policy: &PolicyParams, env: &ToyEnv, seed: u64) -> ToyRollout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut path = Vec::with_capacity(TOY_STATES);
    let tag = policy.sample(0, &mut rng);
    path.push((0, tag));
    if tag == 0 {
        path.push((1, policy.sample(1, &mut rng)));
        let tag2 = policy.sample(2, &mut rng);
        path.push((2, tag2));
        if tag2 <= 1 {
            path.push((3, policy.sample(3, &mut rng)));
        }
    }
    let actions: Vec<usize> = path.iter().map(|(_, a)| *a).collect();
    let trajectory = env.trajectory(&actions);
    let reward = env.score(&trajectory);
    ToyRollout { path, trajectory, reward }
}

/// Near-deterministic policy on the oracle path.
pub fn oracle_policy(env: &ToyEnv) -> PolicyParams {
    let mut p = PolicyParams::uniform(TOY_STATES, env.vocab);
    for (s, a) in env.oracle_path() {
        p.logits[s][a] = 60.0;
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub update: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub policy: PolicyParams,
    pub log: Vec<LogRecord>,
    pub oracle_reward: f64,
}

impl TrainResult {
    /// Mean reward over the last `n` updates.
    pub fn tail_mean_reward(&self, n: usize) -> f64 {
        let tail = &self.log[self.log.len().saturating_sub(n)..];
        tail.iter().map(|r| r.mean_reward).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Collects one group under `policy`, scoring log-probs against `reference`.
pub fn collect_group(policy: &PolicyParams, reference: &PolicyParams, env: &ToyEnv, seeds: &[u64]) -> RolloutGroup {
    let paths: Vec<(Vec<(usize, usize)>, f64)> = seeds
        .par_iter()
        .map(|s| {
            let r = toy_env_rollout(policy, env, *s);
            (r.path, r.reward)
        })
        .collect();
    RolloutGroup::from_paths(paths, policy, reference)
}

/// Trains from `init`, one group per update. Each update's record is also
/// written as a JSON line to `log` when given.
pub fn train_toy(env: &ToyEnv, init: PolicyParams, cfg: &GrpoConfig, mut log: Option<&mut dyn Write>) -> Result<TrainResult, GrpoError> {
    if cfg.group_size < 2 {
        return Err(GrpoError::GroupTooSmall(cfg.group_size));
    }
    if cfg.ref_refresh == 0 || !cfg.learning_rate.is_finite() || cfg.learning_rate <= 0.0 || !cfg.beta.is_finite() || cfg.beta < 0.0 {
        return Err(GrpoError::Config(
            "need ref_refresh > 0, finite learning_rate > 0, finite beta >= 0".into(),
        ));
    }
    init.check_finite()?;
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = init;
    let mut reference = policy.clone();
    let mut records = Vec::with_capacity(cfg.updates);
    for update in 0..cfg.updates {
        if update % cfg.ref_refresh == 0 {
            reference = policy.clone();
        }
        let seeds: Vec<u64> = (0..cfg.group_size).map(|_| seeder.next_u64()).collect();
        let group = collect_group(&policy, &reference, env, &seeds);
        let mean_reward = group.rewards().iter().sum::<f64>() / cfg.group_size as f64;
        let (next, stats) = grpo_update(&policy, std::slice::from_ref(&group), cfg)?;
        policy = next;
        let rec = LogRecord {
            update,
            mean_reward,
            mean_kl: stats.mean_kl,
            grad_norm: stats.grad_norm,
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&rec).expect("serializable");
            // a broken log sink should not stop training
            if let Err(e) = writeln!(w, "{line}") {
                tracing::warn!(error = %e, "training log write failed");
            }
        }
        records.push(rec);
    }
    let oracle_reward = env.score(&env.trajectory(&env.oracle_path().iter().map(|(_, a)| *a).collect::<Vec<_>>()));
    Ok(TrainResult {
        policy,
        log: records,
        oracle_reward,
    })
}
