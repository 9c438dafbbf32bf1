//! Greedy evaluation and per-turn records.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{run_episode, Checkpoint, TrainError, Workspace};
use crate::corpus::{hit_at, mrr, ndcg_at, recall_at, Retriever};
use crate::dialogue::Conversation;
use crate::env::{EnvConfig, SearchEnv};
use crate::policy::{Decoding, LinearCritic, Policy, SoftmaxActor};
use crate::reward::{intent_reward, RewardConfig};
use crate::text::word_count;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub conversation_id: String,
    pub turn_index: usize,
    pub answer_f1: f64,
    pub intent_f1: f64,
    pub searches_used: usize,
    pub reasoning_tokens: usize,
    /// First-query retrieval metrics; absent when no search was issued.
    pub ndcg_at_3: Option<f64>,
    pub recall_at_10: Option<f64>,
    pub mrr: Option<f64>,
    pub hit_at_3: Option<u8>,
    pub predicted_answer: Option<String>,
    pub queries: Vec<String>,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub turns: usize,
    pub mean_answer_f1: f64,
    pub mean_intent_f1: f64,
    pub mean_searches: f64,
    pub mean_reasoning_tokens: f64,
    /// Means over turns that issued at least one query.
    pub mean_ndcg_at_3: Option<f64>,
    pub mean_recall_at_10: Option<f64>,
    pub mean_mrr: Option<f64>,
    pub mean_hit_at_3: Option<f64>,
    pub searches_histogram: BTreeMap<usize, usize>,
    pub reasoning_histogram: BTreeMap<usize, usize>,
}

impl Aggregates {
    pub fn from_records(records: &[TurnRecord]) -> Self {
        let n = records.len();
        let avg = |f: &dyn Fn(&TurnRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let opt_avg = |f: &dyn Fn(&TurnRecord) -> Option<f64>| {
            let xs: Vec<f64> = records.iter().filter_map(f).collect();
            (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
        };
        let mut searches_histogram = BTreeMap::new();
        let mut reasoning_histogram = BTreeMap::new();
        for r in records {
            *searches_histogram.entry(r.searches_used).or_insert(0) += 1;
            *reasoning_histogram.entry(r.reasoning_tokens).or_insert(0) += 1;
        }
        Self {
            turns: n,
            mean_answer_f1: avg(&|r| r.answer_f1),
            mean_intent_f1: avg(&|r| r.intent_f1),
            mean_searches: avg(&|r| r.searches_used as f64),
            mean_reasoning_tokens: avg(&|r| r.reasoning_tokens as f64),
            mean_ndcg_at_3: opt_avg(&|r| r.ndcg_at_3),
            mean_recall_at_10: opt_avg(&|r| r.recall_at_10),
            mean_mrr: opt_avg(&|r| r.mrr),
            mean_hit_at_3: opt_avg(&|r| r.hit_at_3.map(f64::from)),
            searches_histogram,
            reasoning_histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub alpha: Option<f64>,
    pub step: Option<usize>,
    pub per_turn: Vec<TurnRecord>,
    pub aggregates: Aggregates,
}

impl EvalReport {
    pub fn new(label: impl Into<String>, per_turn: Vec<TurnRecord>) -> Self {
        let aggregates = Aggregates::from_records(&per_turn);
        Self {
            label: label.into(),
            alpha: None,
            step: None,
            per_turn,
            aggregates,
        }
    }
}

/// Run every turn of `conversations` with the policy produced by `make`.
pub fn evaluate_with<P, F>(
    ws: &Workspace,
    conversations: &[Conversation],
    env_config: &EnvConfig,
    mut make: F,
) -> Result<Vec<TurnRecord>, TrainError>
where
    P: Policy,
    F: FnMut(&Conversation, usize) -> P,
{
    let env = SearchEnv::new(&ws.index, env_config.clone());
    let critic = LinearCritic::default();
    let reward = RewardConfig::default();
    // greedy and scripted policies never draw from it
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut records = Vec::new();
    for conv in conversations {
        for t in 0..conv.turns.len() {
            let mut policy = make(conv, t);
            let o = run_episode(&env, conv, t, &mut policy, &critic, &reward, Some(&ws.qrels), &mut rng)?;
            let relevant = ws
                .qrels
                .relevant(&conv.id, t)
                .cloned()
                .unwrap_or_else(|| conv.turns[t].relevant_set());
            let queries = o.trajectory.queries();
            let first = queries.first().map(|q| ws.index.search(q, 10));
            let ids: Vec<String> = first
                .as_ref()
                .map(|r| r.ids().into_iter().map(str::to_owned).collect())
                .unwrap_or_default();
            let has = first.is_some();
            records.push(TurnRecord {
                conversation_id: conv.id.clone(),
                turn_index: t,
                answer_f1: o.reward.answer_f1,
                intent_f1: intent_reward(&queries, conv.turns[t].rewrite.as_deref()),
                searches_used: o.trajectory.search_count(),
                reasoning_tokens: o.trajectory.think_texts().map(word_count).sum(),
                ndcg_at_3: has.then(|| ndcg_at(&ids, &relevant, 3)),
                recall_at_10: has.then(|| recall_at(&ids, &relevant, 10)),
                mrr: has.then(|| mrr(&ids, &relevant)),
                hit_at_3: has.then(|| hit_at(&ids, &relevant, 3)),
                predicted_answer: o.trajectory.answer().map(str::to_owned),
                queries,
                forced: o.forced,
            });
        }
    }
    Ok(records)
}

/// Greedy decoding of a checkpoint over all turns.
pub fn evaluate(
    checkpoint: &Checkpoint,
    ws: &Workspace,
    conversations: &[Conversation],
    env_config: &EnvConfig,
) -> Result<EvalReport, TrainError> {
    checkpoint
        .check_compatible()
        .map_err(|message| TrainError::Checkpoint {
            path: format!("step {}", checkpoint.step),
            message,
        })?;
    let records = evaluate_with(ws, conversations, env_config, |_, _| SoftmaxActor {
        policy: &checkpoint.policy,
        decoding: Decoding::Greedy,
    })?;
    let mut report = EvalReport::new(format!("step-{}", checkpoint.step), records);
    report.step = Some(checkpoint.step);
    Ok(report)
}
