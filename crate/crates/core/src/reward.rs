//! Answer and intent rewards.
//!
//! The trajectory reward is `answer_f1 + alpha * intent`, where the intent
//! term is either the best word-level F1 between an issued search query and
//! the gold rewrite, or a hit@N indicator over the retrieved passages.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::RetrievalResult;
use crate::dialogue::Turn;
use crate::text::simple_tokens;
use crate::trajectory::Trajectory;

/// SQuAD-style normalization: lowercase, strip punctuation, drop articles,
/// split on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    simple_tokens(text)
        .into_iter()
        .filter(|t| !matches!(t.as_str(), "a" | "an" | "the"))
        .collect()
}

/// Word-level F1 over the multiset of normalized tokens.
pub fn f1(a: &str, b: &str) -> f64 {
    token_f1(&normalize(a), &normalize(b))
}

pub fn token_f1(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in b {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in a {
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
    let precision = common as f64 / a.len() as f64;
    let recall = common as f64 / b.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn answer_reward(answer: Option<&str>, gold: &str) -> f64 {
    answer.map_or(0.0, |y| f1(y, gold))
}

/// Per-query F1 against the rewrite; the reward is their maximum.
pub fn intent_scores(queries: &[String], rewrite: Option<&str>) -> Vec<f64> {
    match rewrite {
        Some(rw) => {
            let gold = normalize(rw);
            queries.iter().map(|q| token_f1(&normalize(q), &gold)).collect()
        }
        None => vec![0.0; queries.len()],
    }
}

pub fn intent_reward(queries: &[String], rewrite: Option<&str>) -> f64 {
    intent_scores(queries, rewrite).into_iter().fold(0.0, f64::max)
}

/// 1 iff some query's top-`n` contains a relevant passage.
pub fn hit_reward(per_query: &[RetrievalResult], relevant: &BTreeSet<String>, n: usize) -> u8 {
    u8::from(
        per_query
            .iter()
            .any(|r| r.hits.iter().take(n).any(|h| relevant.contains(&h.id))),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentMode {
    QueryF1,
    HitAtN,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha: f64,
    pub intent_mode: IntentMode,
    pub hit_n: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            intent_mode: IntentMode::QueryF1,
            hit_n: 3,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err("reward.alpha must be a finite non-negative number".into());
        }
        if self.hit_n == 0 {
            return Err("reward.hit_n must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub answer_f1: f64,
    pub intent: f64,
    pub alpha: f64,
    pub total: f64,
    pub per_query: Vec<f64>,
    /// Query-level F1 against the rewrite, regardless of intent mode.
    pub query_f1: f64,
    /// hit@n over all issued queries, regardless of intent mode.
    pub hit: u8,
}

/// Score a finished trajectory. `results` holds one retrieval result per
/// issued search, in order.
pub fn total_reward(
    trajectory: &Trajectory,
    turn: &Turn,
    results: &[RetrievalResult],
    config: &RewardConfig,
) -> RewardBreakdown {
    let queries = trajectory.queries();
    let answer_f1 = answer_reward(trajectory.answer(), &turn.answer);
    let f1_scores = intent_scores(&queries, turn.rewrite.as_deref());
    let query_f1 = f1_scores.iter().copied().fold(0.0, f64::max);
    let relevant = turn.relevant_set();
    let hit = hit_reward(results, &relevant, config.hit_n);
    let (intent, per_query) = match config.intent_mode {
        IntentMode::QueryF1 => (query_f1, f1_scores),
        IntentMode::HitAtN => {
            let per: Vec<f64> = results
                .iter()
                .map(|r| f64::from(hit_reward(std::slice::from_ref(r), &relevant, config.hit_n)))
                .collect();
            (f64::from(hit), per)
        }
        IntentMode::Off => (0.0, Vec::new()),
    };
    RewardBreakdown {
        answer_f1,
        intent,
        alpha: config.alpha,
        total: answer_f1 + config.alpha * intent,
        per_query,
        query_f1,
        hit,
    }
}
