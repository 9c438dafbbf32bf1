//! Rollout collection, the PPO training loop, checkpoints and evaluation.

mod config;
pub mod eval;
pub mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{DataConfig, FullScaleConfig, RunConfig, TrainConfig};

use crate::corpus::{load_corpus, CorpusError, Index, Qrels, RetrievalResult, Retriever};
use crate::dialogue::{generate_synthetic, load_dataset, Conversation, DatasetError};
use crate::env::{EnvError, Injection, SearchEnv};
use crate::policy::{
    value_features, Decoding, FeatureMatrix, LinearCritic, LinearSoftmaxPolicy, Policy, PolicyError, SoftmaxActor,
    ACTION_DIM, FEATURE_REGISTRY_VERSION, VALUE_DIM,
};
use crate::ppo::{update_step, PpoError, RolloutBatch, TrajectoryRollout};
use crate::reward::{total_reward, RewardBreakdown, RewardConfig};
use crate::trajectory::Trajectory;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty dataset")]
    EmptyDataset,
}

/// Conversations, passages and relevance labels ready for rollouts.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub conversations: Vec<Conversation>,
    pub index: Index,
    pub qrels: Qrels,
}

impl Workspace {
    pub fn load(data: &DataConfig) -> Result<Self, TrainError> {
        match (&data.dataset, &data.corpus) {
            (Some(d), Some(c)) => {
                let conversations = load_dataset(d)?;
                let index = Index::build(load_corpus(c)?)?;
                let qrels = match &data.qrels {
                    Some(q) => Qrels::load(q)?,
                    None => qrels_from_turns(&conversations),
                };
                Ok(Self {
                    conversations,
                    index,
                    qrels,
                })
            }
            _ => {
                let syn = generate_synthetic(&data.synthetic)?;
                Ok(Self {
                    conversations: syn.conversations,
                    index: Index::build(syn.corpus)?,
                    qrels: syn.qrels,
                })
            }
        }
    }

    /// All (conversation, turn) pairs in dataset order.
    pub fn turns(&self) -> Vec<(usize, usize)> {
        self.conversations
            .iter()
            .enumerate()
            .flat_map(|(c, conv)| (0..conv.turns.len()).map(move |t| (c, t)))
            .collect()
    }
}

fn qrels_from_turns(conversations: &[Conversation]) -> Qrels {
    let mut q = Qrels::new();
    for conv in conversations {
        for (t, turn) in conv.turns.iter().enumerate() {
            for id in turn.relevant_set() {
                q.insert(&conv.id, t, &id);
            }
        }
    }
    q
}

/// One finished episode with everything needed for scoring and updates.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub conversation_id: String,
    pub turn_index: usize,
    pub trajectory: Trajectory,
    pub results: Vec<RetrievalResult>,
    pub reward: RewardBreakdown,
    pub rollout: TrajectoryRollout,
    pub forced: bool,
}

/// Play one turn to termination. Policy emissions become unmasked positions
/// and each environment injection adds a masked position.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<R: Retriever + ?Sized>(
    env: &SearchEnv<'_, R>,
    conversation: &Conversation,
    turn_index: usize,
    policy: &mut dyn Policy,
    critic: &LinearCritic,
    reward: &RewardConfig,
    qrels: Option<&Qrels>,
    rng: &mut dyn RngCore,
) -> Result<EpisodeOutcome, TrainError> {
    let mut ep = env.reset(conversation, turn_index)?;
    let mut roll = TrajectoryRollout::default();
    while !ep.is_terminal() {
        let psi = value_features(&ep, env.config());
        let decision = policy.act(&ep, env.config(), rng)?;
        let (features, action, lp) = match decision.record {
            Some(r) => (r.features, r.action, r.log_prob),
            None => (FeatureMatrix::new(ACTION_DIM), 0, 0.0),
        };
        roll.actions.push(action);
        roll.mask.push(1);
        roll.old_log_probs.push(lp);
        roll.values.push(critic.value(&psi));
        roll.observations.push(features);
        roll.value_features.push(psi);

        let step = env.step(&mut ep, &decision.emission)?;
        if step.injected != Injection::None {
            let psi = value_features(&ep, env.config());
            roll.actions.push(0);
            roll.mask.push(0);
            roll.old_log_probs.push(0.0);
            roll.values.push(critic.value(&psi));
            roll.observations.push(FeatureMatrix::new(ACTION_DIM));
            roll.value_features.push(psi);
        }
    }
    let mut turn = conversation.turns[turn_index].clone();
    if let Some(rel) = qrels.and_then(|q| q.relevant(&conversation.id, turn_index)) {
        turn.relevant_ids = Some(rel.iter().cloned().collect());
    }
    let results = ep.results().to_vec();
    let forced = ep.forced();
    let trajectory = ep.into_trajectory();
    let breakdown = total_reward(&trajectory, &turn, &results, reward);
    roll.reward = breakdown.total;
    Ok(EpisodeOutcome {
        conversation_id: conversation.id.clone(),
        turn_index,
        trajectory,
        results,
        reward: breakdown,
        rollout: roll,
        forced,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub feature_registry_version: u32,
    pub step: usize,
    pub policy: LinearSoftmaxPolicy,
    pub critic: LinearCritic,
}

impl Checkpoint {
    pub fn initial() -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            feature_registry_version: FEATURE_REGISTRY_VERSION,
            step: 0,
            policy: LinearSoftmaxPolicy::zeros(ACTION_DIM),
            critic: LinearCritic::default(),
        }
    }

    pub fn file_name(step: usize) -> String {
        format!("checkpoint-{step:04}.json")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let err = |message: String| TrainError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        ckpt.check_compatible().map_err(err)?;
        Ok(ckpt)
    }

    pub fn check_compatible(&self) -> Result<(), String> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(format!(
                "format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.feature_registry_version != FEATURE_REGISTRY_VERSION {
            return Err(format!(
                "feature registry version {} does not match {FEATURE_REGISTRY_VERSION}",
                self.feature_registry_version
            ));
        }
        if self.policy.weights.len() != ACTION_DIM || self.critic.weights.len() != VALUE_DIM {
            return Err("weight dimensions do not match the feature registry".into());
        }
        Ok(())
    }
}

/// One JSON line per update step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub mean_total_reward: f64,
    pub mean_answer_f1: f64,
    pub mean_intent: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub mean_ratio: f64,
    /// Share of rollouts whose best query has nonzero F1 against the rewrite.
    pub nonzero_query_f1_fraction: f64,
    /// Share of rollouts with a relevant passage in some query's top-3.
    pub nonzero_hit_fraction: f64,
    pub mean_searches: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Last checkpoint unless training rewards collapsed.
    pub selected: Checkpoint,
    pub collapsed: bool,
    pub checkpoints: Vec<Checkpoint>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Windowed collapse rule: returns the index of the window to select.
pub fn select_window(rewards: &[f64], window: usize, ratio: f64) -> Option<(usize, bool)> {
    let means: Vec<f64> = rewards
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect();
    let last = means.len().checked_sub(1)?;
    let (best, best_mean) =
        means.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, m)| if m > acc.1 { (i, m) } else { acc },
        );
    if best_mean > 0.0 && means[last] < ratio * best_mean {
        Some((best, true))
    } else {
        Some((last, false))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Sample rollouts, score them, update with PPO, checkpoint and log.
pub fn run_training(config: &RunConfig, ws: &Workspace) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let turns = ws.turns();
    if turns.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let out_dir: Option<PathBuf> = config.train.output_dir.clone();
    let mut diag_file = match &out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("diagnostics.jsonl"))?)
        }
        None => None,
    };

    let env = SearchEnv::new(&ws.index, config.env.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let init = Checkpoint::initial();
    let reference = init.policy.snapshot();
    let mut policy = init.policy.clone();
    let mut critic = init.critic.clone();
    let mut checkpoints = Vec::new();
    let mut diagnostics = Vec::with_capacity(config.train.total_steps);

    for step in 1..=config.train.total_steps {
        let mut batch = RolloutBatch::default();
        let mut outcomes = Vec::with_capacity(config.ppo.rollouts_per_step);
        for _ in 0..config.ppo.rollouts_per_step {
            let (c, t) = turns[rng.gen_range(0..turns.len())];
            let mut actor = SoftmaxActor {
                policy: &policy,
                decoding: Decoding::Sample,
            };
            let o = run_episode(
                &env,
                &ws.conversations[c],
                t,
                &mut actor,
                &critic,
                &config.reward,
                Some(&ws.qrels),
                &mut rng,
            )?;
            batch.trajectories.push(o.rollout.clone());
            outcomes.push(o);
        }
        let (new_policy, new_critic, upd) = update_step(&policy, &critic, &reference, &batch, &config.ppo)?;
        policy = new_policy;
        critic = new_critic;
        debug_assert!(policy.is_finite() && critic.is_finite());

        let d = StepDiagnostics {
            step,
            mean_total_reward: upd.mean_total_reward,
            mean_answer_f1: mean(outcomes.iter().map(|o| o.reward.answer_f1)),
            mean_intent: mean(outcomes.iter().map(|o| o.reward.intent)),
            clip_fraction: upd.clip_fraction,
            kl: upd.kl,
            actor_loss: upd.actor_loss,
            critic_loss: upd.critic_loss,
            mean_ratio: upd.mean_ratio,
            nonzero_query_f1_fraction: mean(outcomes.iter().map(|o| f64::from(u8::from(o.reward.query_f1 > 0.0)))),
            nonzero_hit_fraction: mean(outcomes.iter().map(|o| f64::from(o.reward.hit))),
            mean_searches: mean(outcomes.iter().map(|o| o.trajectory.search_count() as f64)),
        };
        if let Some(f) = diag_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&d)?)?;
        }
        log::debug!("step {step}: reward {:.4}", d.mean_total_reward);
        diagnostics.push(d);

        if step % config.train.checkpoint_interval == 0 {
            let ckpt = Checkpoint {
                format_version: CHECKPOINT_FORMAT_VERSION,
                feature_registry_version: FEATURE_REGISTRY_VERSION,
                step,
                policy: policy.clone(),
                critic: critic.clone(),
            };
            if let Some(dir) = &out_dir {
                ckpt.save(dir.join(Checkpoint::file_name(step)))?;
            }
            checkpoints.push(ckpt);
        }
    }

    let final_checkpoint = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        feature_registry_version: FEATURE_REGISTRY_VERSION,
        step: config.train.total_steps,
        policy,
        critic,
    };
    let rewards: Vec<f64> = diagnostics.iter().map(|d| d.mean_total_reward).collect();
    let (selected, collapsed) = match select_window(&rewards, config.train.collapse_window, config.train.collapse_ratio)
    {
        Some((w, true)) => {
            let end = (w + 1) * config.train.collapse_window;
            let ckpt = checkpoints
                .iter()
                .find(|c| c.step == end)
                .cloned()
                .unwrap_or_else(|| final_checkpoint.clone());
            log::warn!("training reward collapsed; selecting checkpoint at step {}", ckpt.step);
            (ckpt, true)
        }
        _ => (final_checkpoint.clone(), false),
    };
    if let Some(dir) = &out_dir {
        let summary = serde_json::json!({
            "selected_step": selected.step,
            "collapsed": collapsed,
            "final_step": final_checkpoint.step,
        });
        fs::write(dir.join("selection.json"), format!("{summary:#}\n"))?;
    }
    Ok(TrainOutcome {
        final_checkpoint,
        selected,
        collapsed,
        checkpoints,
        diagnostics,
    })
}
