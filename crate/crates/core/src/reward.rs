//! Verifiable rewards for tag-structured trajectories.
//!
//! `total = format + accuracy`, where format is a 0/1 indicator over the
//! whole trajectory and accuracy sums three per-kind parts: answer F1,
//! the mean search-query similarity and the mean code credit (always 1).

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::grammar::{validate_trajectory, SegmentKind, Termination, Trajectory};
use crate::http::{key_from_env, HttpError, JsonClient};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, drop ASCII punctuation, drop articles, split on whitespace.
pub fn normalize_text(s: &str) -> Vec<String> {
    let cleaned: String = s.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    cleaned.split_whitespace().filter(|t| !ARTICLES.contains(t)).map(str::to_string).collect()
}

fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-multiset F1 against each gold answer; the best one wins.
pub fn f1_score<S: AsRef<str>>(pred: &str, golds: &[S]) -> f64 {
    let p = normalize_text(pred);
    golds.iter().map(|g| token_f1(&p, &normalize_text(g.as_ref()))).fold(0.0, f64::max)
}

pub fn exact_match<S: AsRef<str>>(pred: &str, golds: &[S]) -> u8 {
    let p = normalize_text(pred);
    u8::from(golds.iter().any(|g| normalize_text(g.as_ref()) == p))
}

/// 1 iff the trajectory is protocol-valid and ends with its answer.
pub fn format_reward(traj: &Trajectory) -> u8 {
    let ends_in_answer = traj
        .turns
        .last()
        .and_then(|t| t.segments.last())
        .is_some_and(|s| s.kind == SegmentKind::Answer);
    u8::from(traj.terminated_by == Termination::Answer && ends_in_answer && validate_trajectory(traj))
}

/// Sparse embedding vector: sorted `(dimension, value)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Embedding(Vec<(u32, f64)>);

impl Embedding {
    pub fn from_dense(values: &[f64]) -> Self {
        Self(
            values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i as u32, *v))
                .collect(),
        )
    }

    pub fn from_sparse(mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_by_key(|e| e.0);
        Self(entries)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.0.len() && j < other.0.len() {
            let (a, b) = (self.0[i], other.0[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    /// Cosine similarity; 0 when either vector is zero.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        let sq = |e: &Embedding| e.0.iter().map(|(_, v)| v * v).sum::<f64>();
        let denom = (sq(self) * sq(other)).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            (self.dot(other) / denom).clamp(-1.0, 1.0)
        }
    }
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("embedding endpoint returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbeddingError>;
}

/// Term-frequency vector over normalized tokens, one dimension per token
/// (32-bit FNV-1a of the token).
#[derive(Debug, Clone, Copy, Default)]
pub struct TermFrequencyEmbedder;

fn fnv1a32(s: &str) -> u32 {
    s.bytes().fold(0x811c_9dc5u32, |h, b| (h ^ u32::from(b)).wrapping_mul(0x0100_0193))
}

impl TermFrequencyEmbedder {
    pub fn embed_one(&self, text: &str) -> Embedding {
        let mut tf: BTreeMap<u32, f64> = BTreeMap::new();
        for tok in normalize_text(text) {
            *tf.entry(fnv1a32(&tok)).or_default() += 1.0;
        }
        Embedding(tf.into_iter().collect())
    }
}

impl EmbeddingProvider for TermFrequencyEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Remote embedding endpoint: `POST {texts}` → `{vectors}`.
pub struct RemoteEmbedder {
    endpoint: String,
    key_var: String,
    client: JsonClient,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, key_var: impl Into<String>, timeout: Duration, retries: u32) -> Result<Self, HttpError> {
        Ok(Self {
            endpoint: endpoint.into(),
            key_var: key_var.into(),
            client: JsonClient::new(timeout, retries)?,
        })
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbeddingError> {
        let key = key_from_env(&self.key_var)?;
        let auth = format!("Bearer {key}");
        let resp = self
            .client
            .post(&self.endpoint, &[("Authorization", &auth)], &json!({ "texts": texts }))?;
        let vectors: Vec<Vec<f64>> = serde_json::from_value(resp["vectors"].clone()).map_err(|e| HttpError::Decode(format!("vectors: {e}")))?;
        if vectors.len() != texts.len() {
            return Err(EmbeddingError::CountMismatch {
                expected: texts.len(),
                got: vectors.len(),
            });
        }
        Ok(vectors.iter().map(|v| Embedding::from_dense(v)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityOutcome {
    /// Mean of matched `max(0, cos)` values; 0 when either side is empty.
    pub value: f64,
    /// Matched value per query, `None` for queries left unmatched.
    pub per_query: Vec<Option<f64>>,
    pub fallback_used: bool,
    pub missing_input: bool,
}

/// Greedy one-to-one matching of queries to reference queries, highest
/// cosine first. Ties are broken by text, so the result does not depend on
/// list order.
pub fn search_similarity(queries: &[String], refs: &[String], emb: &dyn EmbeddingProvider) -> SimilarityOutcome {
    if queries.is_empty() || refs.is_empty() {
        return SimilarityOutcome {
            value: 0.0,
            per_query: vec![None; queries.len()],
            fallback_used: false,
            missing_input: true,
        };
    }
    let all: Vec<String> = queries.iter().chain(refs).cloned().collect();
    let (vectors, fallback_used) = match emb.embed(&all) {
        Ok(v) if v.len() == all.len() => (v, false),
        Ok(_) => (TermFrequencyEmbedder.embed(&all).expect("infallible"), true),
        Err(e) => {
            tracing::warn!(error = %e, "embedding provider failed, using term-frequency fallback");
            (TermFrequencyEmbedder.embed(&all).expect("infallible"), true)
        }
    };
    let (qv, rv) = vectors.split_at(queries.len());

    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(qv.len() * rv.len());
    for (i, q) in qv.iter().enumerate() {
        for (j, r) in rv.iter().enumerate() {
            pairs.push((q.cosine(r), i, j));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| queries[a.1].cmp(&queries[b.1]))
            .then_with(|| refs[a.2].cmp(&refs[b.2]))
    });

    let mut per_query = vec![None; queries.len()];
    let mut ref_used = vec![false; refs.len()];
    for (cos, i, j) in pairs {
        if per_query[i].is_none() && !ref_used[j] {
            per_query[i] = Some(cos.max(0.0));
            ref_used[j] = true;
        }
    }
    let matched: Vec<f64> = per_query.iter().flatten().copied().collect();
    SimilarityOutcome {
        value: matched.iter().sum::<f64>() / matched.len() as f64,
        per_query,
        fallback_used,
        missing_input: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub reference_queries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReward {
    /// Position in the flattened segment list of the trajectory.
    pub index: usize,
    pub kind: SegmentKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardFlags {
    pub embedding_fallback: bool,
    pub search_refs_missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: u8,
    pub per_segment: Vec<SegmentReward>,
    pub answer: f64,
    pub search: f64,
    pub code: f64,
    pub accuracy: f64,
    pub total: f64,
    pub flags: RewardFlags,
}

/// Per-kind accuracy parts and the per-segment values behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub answer: f64,
    pub search: f64,
    pub code: f64,
    pub per_segment: Vec<SegmentReward>,
    pub flags: RewardFlags,
}

impl Accuracy {
    pub fn total(&self) -> f64 {
        self.answer + self.search + self.code
    }
}

pub fn accuracy_reward(traj: &Trajectory, key: &AnswerKey, emb: &dyn EmbeddingProvider) -> Accuracy {
    let segments: Vec<_> = traj.segments().enumerate().collect();
    let mut per_segment = Vec::new();
    let mut flags = RewardFlags::default();

    // the last answer counts when a malformed trajectory carries several
    let answer_idx = segments.iter().rev().find(|(_, s)| s.kind == SegmentKind::Answer).map(|(i, _)| *i);
    let answer = match answer_idx {
        Some(i) => {
            let v = f1_score(&segments[i].1.body, &key.gold_answers);
            per_segment.push(SegmentReward {
                index: i,
                kind: SegmentKind::Answer,
                value: v,
            });
            v
        }
        None => 0.0,
    };

    let searches: Vec<(usize, String)> = segments
        .iter()
        .filter(|(_, s)| s.kind == SegmentKind::Search)
        .map(|(i, s)| (*i, s.body.trim().to_string()))
        .collect();
    let search = if searches.is_empty() {
        0.0
    } else {
        let queries: Vec<String> = searches.iter().map(|(_, q)| q.clone()).collect();
        let sim = search_similarity(&queries, &key.reference_queries, emb);
        flags.embedding_fallback = sim.fallback_used;
        flags.search_refs_missing = sim.missing_input;
        for ((i, _), v) in searches.iter().zip(&sim.per_query) {
            per_segment.push(SegmentReward {
                index: *i,
                kind: SegmentKind::Search,
                value: v.unwrap_or(0.0),
            });
        }
        sim.value
    };

    let mut code = 0.0;
    for (i, s) in &segments {
        if s.kind == SegmentKind::Code {
            per_segment.push(SegmentReward {
                index: *i,
                kind: SegmentKind::Code,
                value: 1.0,
            });
            code = 1.0;
        }
    }

    per_segment.sort_by_key(|r| r.index);
    Accuracy {
        answer,
        search,
        code,
        per_segment,
        flags,
    }
}

pub fn total_reward(traj: &Trajectory, key: &AnswerKey, emb: &dyn EmbeddingProvider) -> RewardBreakdown {
    let format = format_reward(traj);
    let acc = accuracy_reward(traj, key, emb);
    let accuracy = acc.total();
    RewardBreakdown {
        format,
        answer: acc.answer,
        search: acc.search,
        code: acc.code,
        accuracy,
        total: f64::from(format) + accuracy,
        per_segment: acc.per_segment,
        flags: acc.flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_turn;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_text("The Eiffel Tower!"), s(&["eiffel", "tower"]));
        assert!(normalize_text("").is_empty());
        assert_eq!(normalize_text("A  dog,  a cat"), s(&["dog", "cat"]));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score("Paris", &["Paris"]), 1.0);
        assert_eq!(f1_score("Paris, France", &["Paris"]), 2.0 / 3.0);
        assert_eq!(f1_score("London", &["Paris"]), 0.0);
        assert_eq!(f1_score("the", &["a"]), 1.0);
        assert_eq!(f1_score("", &["Paris"]), 0.0);
        // best gold wins
        assert_eq!(f1_score("Paris", &["London", "paris"]), 1.0);
    }

    #[test]
    fn f1_counts_token_multiplicity() {
        // pred [new, new, york], gold [new, york]: common 2, P 2/3, R 1
        assert!((f1_score("new new york", &["new york"]) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("the Eiffel Tower", &["Eiffel Tower"]), 1);
        assert_eq!(exact_match("Eiffel", &["Eiffel Tower"]), 0);
        assert_eq!(exact_match("", &["x"]), 0);
    }

    fn traj(turns: &[&str], end: Termination) -> Trajectory {
        Trajectory {
            turns: turns.iter().map(|t| parse_turn(t)).collect(),
            terminated_by: end,
        }
    }

    #[test]
    fn format_reward_examples() {
        let ok = traj(
            &["<think>a</think><search>q</search>", "<think>b</think><answer>x</answer>"],
            Termination::Answer,
        );
        assert_eq!(format_reward(&ok), 1);
        let stray = traj(&["<think>a</think><answer>x</answer> trailing"], Termination::FormatViolation);
        assert_eq!(format_reward(&stray), 0);
        let budget = traj(
            &["<think>a</think><search>q</search>", "<think>b</think><search>r</search>"],
            Termination::Budget,
        );
        assert_eq!(format_reward(&budget), 0);
    }

    #[test]
    fn tf_cosine_shares_one_of_two_tokens() {
        let e = TermFrequencyEmbedder;
        let a = e.embed_one("capital France");
        let b = e.embed_one("capital of Germany");
        // {capital, france} · {capital, of, germany}: "of" survives normalization
        let expected = 1.0 / (2f64.sqrt() * 3f64.sqrt());
        assert!((a.cosine(&b) - expected).abs() < 1e-12);
    }

    #[test]
    fn similarity_examples() {
        let q = s(&["capital of France", "population of Paris"]);
        assert_eq!(search_similarity(&q, &q, &TermFrequencyEmbedder).value, 1.0);
        let orth = search_similarity(&s(&["red apple"]), &s(&["blue sky"]), &TermFrequencyEmbedder);
        assert_eq!(orth.value, 0.0);
        let missing = search_similarity(&s(&["x"]), &[], &TermFrequencyEmbedder);
        assert!(missing.missing_input);
        assert_eq!(missing.value, 0.0);
    }

    #[test]
    fn unmatched_queries_are_left_out_of_the_mean() {
        let out = search_similarity(&s(&["eiffel tower", "zzz"]), &s(&["eiffel tower"]), &TermFrequencyEmbedder);
        assert_eq!(out.per_query, vec![Some(1.0), None]);
        assert_eq!(out.value, 1.0);
    }

    struct Failing;
    impl EmbeddingProvider for Failing {
        fn embed(&self, _: &[String]) -> Result<Vec<Embedding>, EmbeddingError> {
            Err(HttpError::Transport("down".into()).into())
        }
    }

    #[test]
    fn provider_failure_falls_back_and_flags() {
        let out = search_similarity(&s(&["a b"]), &s(&["a b"]), &Failing);
        assert!(out.fallback_used);
        assert_eq!(out.value, 1.0);
    }

    #[test]
    fn code_segments_earn_constant_credit() {
        let t = traj(
            &[
                "<think>fix</think><code>rotate 90\nsave out</code>",
                "<think>read</think><answer>42</answer>",
            ],
            Termination::Answer,
        );
        let key = AnswerKey {
            gold_answers: s(&["42"]),
            reference_queries: vec![],
        };
        let r = total_reward(&t, &key, &TermFrequencyEmbedder);
        assert_eq!(r.code, 1.0);
        assert_eq!(r.answer, 1.0);
        assert_eq!(r.format, 1);
        assert_eq!(r.total, 3.0);
        let code_seg = r.per_segment.iter().find(|p| p.kind == SegmentKind::Code).unwrap();
        assert_eq!((code_seg.index, code_seg.value), (1, 1.0));
    }

    #[test]
    fn malformed_trajectory_still_scores_parsed_answer() {
        let t = traj(&["oops <think>a</think><answer>Paris</answer>"], Termination::FormatViolation);
        let key = AnswerKey {
            gold_answers: s(&["Paris"]),
            reference_queries: vec![],
        };
        let r = total_reward(&t, &key, &TermFrequencyEmbedder);
        assert_eq!((r.format, r.answer, r.total), (0, 1.0, 1.0));
    }

    #[test]
    fn empty_trajectory_scores_zero() {
        let t = Trajectory {
            turns: vec![],
            terminated_by: Termination::Budget,
        };
        let key = AnswerKey {
            gold_answers: s(&["x"]),
            reference_queries: s(&["q"]),
        };
        let r = total_reward(&t, &key, &TermFrequencyEmbedder);
        assert_eq!(r.total, 0.0);
        assert!(r.per_segment.is_empty());
    }
}
