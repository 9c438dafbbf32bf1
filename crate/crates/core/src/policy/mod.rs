//! Policies over macro-actions and the linear critic.
//!
//! A [`LinearSoftmaxPolicy`] scores every action of a [`MacroVocabulary`] with
//! `w·φ(o, a)` and normalizes with a softmax. Snapshots freeze a copy for use
//! as the behavior or reference policy during an update.

pub mod features;

use std::ops::Deref;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvConfig, Episode};
pub use features::{
    build_vocabulary, value_features, ActionKind, FeatureMatrix, MacroAction, MacroVocabulary, ACTION_DIM,
    ACTION_FEATURES, FEATURE_REGISTRY_VERSION, VALUE_DIM, VALUE_FEATURES,
};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("action {index} is outside a vocabulary of {size}")]
    ActionOutOfRange { index: usize, size: usize },
    #[error("emission is not in the vocabulary: {0:?}")]
    UnknownEmission(String),
    #[error("empty vocabulary")]
    EmptyVocabulary,
    #[error("script exhausted after {0} emissions")]
    ScriptExhausted(usize),
    #[error("feature dimension {got} does not match weight dimension {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Log-probabilities of every row under weights `w`.
pub fn log_softmax(features: &FeatureMatrix, w: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = (0..features.rows).map(|i| features.dot(i, w)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.into_iter().map(|l| l - lse).collect()
}

pub fn softmax(features: &FeatureMatrix, w: &[f64]) -> Vec<f64> {
    log_softmax(features, w).into_iter().map(f64::exp).collect()
}

/// Feature expectation under the softmax distribution `p`.
pub fn expected_features(features: &FeatureMatrix, p: &[f64]) -> Vec<f64> {
    let mut mean = vec![0.0; features.dim];
    for (i, pi) in p.iter().enumerate() {
        for (m, f) in mean.iter_mut().zip(features.row(i)) {
            *m += pi * f;
        }
    }
    mean
}

/// `φ(a) − E_π[φ]`, the gradient of `log π(a)` with respect to `w`.
pub fn score_function(features: &FeatureMatrix, w: &[f64], action: usize) -> Vec<f64> {
    let p = softmax(features, w);
    let mean = expected_features(features, &p);
    features.row(action).iter().zip(mean).map(|(f, m)| f - m).collect()
}

/// Exact `KL(π_p ‖ π_q)` over one vocabulary and its gradient in `w_p`.
pub fn categorical_kl(features: &FeatureMatrix, w_p: &[f64], w_q: &[f64]) -> (f64, Vec<f64>) {
    let lp = log_softmax(features, w_p);
    let lq = log_softmax(features, w_q);
    let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let mean = expected_features(features, &p);
    let mut kl = 0.0;
    let mut grad = vec![0.0; features.dim];
    for i in 0..features.rows {
        let d = lp[i] - lq[i];
        kl += p[i] * d;
        for ((g, f), m) in grad.iter_mut().zip(features.row(i)).zip(&mean) {
            *g += p[i] * d * (f - m);
        }
    }
    (kl.max(0.0), grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxPolicy {
    pub weights: Vec<f64>,
}

impl Default for LinearSoftmaxPolicy {
    fn default() -> Self {
        Self::zeros(ACTION_DIM)
    }
}

impl LinearSoftmaxPolicy {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
        }
    }

    fn check(&self, vocab: &FeatureMatrix, action: Option<usize>) -> Result<(), PolicyError> {
        if vocab.rows == 0 {
            return Err(PolicyError::EmptyVocabulary);
        }
        if vocab.dim != self.weights.len() {
            return Err(PolicyError::Dimension {
                expected: self.weights.len(),
                got: vocab.dim,
            });
        }
        match action {
            Some(index) if index >= vocab.rows => Err(PolicyError::ActionOutOfRange {
                index,
                size: vocab.rows,
            }),
            _ => Ok(()),
        }
    }

    pub fn log_probs(&self, features: &FeatureMatrix) -> Result<Vec<f64>, PolicyError> {
        self.check(features, None)?;
        Ok(log_softmax(features, &self.weights))
    }

    pub fn probs(&self, features: &FeatureMatrix) -> Result<Vec<f64>, PolicyError> {
        self.check(features, None)?;
        Ok(softmax(features, &self.weights))
    }

    pub fn log_prob(&self, features: &FeatureMatrix, action: usize) -> Result<f64, PolicyError> {
        self.check(features, Some(action))?;
        Ok(log_softmax(features, &self.weights)[action])
    }

    pub fn log_prob_of(&self, vocab: &MacroVocabulary, emission: &str) -> Result<f64, PolicyError> {
        let i = vocab
            .position(emission)
            .ok_or_else(|| PolicyError::UnknownEmission(emission.to_owned()))?;
        self.log_prob(&vocab.features, i)
    }

    pub fn grad_log_prob(&self, features: &FeatureMatrix, action: usize) -> Result<Vec<f64>, PolicyError> {
        self.check(features, Some(action))?;
        Ok(score_function(features, &self.weights, action))
    }

    /// Inverse-CDF draw from the softmax distribution.
    pub fn sample(&self, features: &FeatureMatrix, rng: &mut (impl Rng + ?Sized)) -> Result<usize, PolicyError> {
        let p = self.probs(features)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return Ok(i);
            }
        }
        Ok(p.len() - 1)
    }

    /// Highest-probability action; ties go to the earliest.
    pub fn greedy(&self, features: &FeatureMatrix) -> Result<usize, PolicyError> {
        self.check(features, None)?;
        let mut best = 0;
        let mut best_logit = f64::NEG_INFINITY;
        for i in 0..features.rows {
            let l = features.dot(i, &self.weights);
            if l > best_logit {
                best = i;
                best_logit = l;
            }
        }
        Ok(best)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn snapshot(&self) -> Frozen {
        Frozen(Arc::new(self.clone()))
    }
}

/// An immutable policy copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen(Arc<LinearSoftmaxPolicy>);

impl Deref for Frozen {
    type Target = LinearSoftmaxPolicy;

    fn deref(&self) -> &LinearSoftmaxPolicy {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCritic {
    pub weights: Vec<f64>,
}

impl Default for LinearCritic {
    fn default() -> Self {
        Self {
            weights: vec![0.0; VALUE_DIM],
        }
    }
}

impl LinearCritic {
    pub fn value(&self, psi: &[f64]) -> f64 {
        self.weights.iter().zip(psi).map(|(v, x)| v * x).sum()
    }

    pub fn grad_value(&self, psi: &[f64]) -> Vec<f64> {
        psi.to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// What a learned policy chose at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionRecord {
    pub features: FeatureMatrix,
    pub action: usize,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub emission: String,
    /// `None` for policies without a differentiable distribution.
    pub record: Option<ActionRecord>,
}

pub trait Policy {
    fn act(&mut self, episode: &Episode, config: &EnvConfig, rng: &mut dyn RngCore) -> Result<Decision, PolicyError>;
}

/// Replays fixed emissions regardless of the observation.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    script: Vec<String>,
    cursor: usize,
}

impl ScriptedPolicy {
    pub fn new<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Self {
        Self {
            script: script.into_iter().map(Into::into).collect(),
            cursor: 0,
        }
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, _: &Episode, _: &EnvConfig, _: &mut dyn RngCore) -> Result<Decision, PolicyError> {
        let emission = self
            .script
            .get(self.cursor)
            .cloned()
            .ok_or(PolicyError::ScriptExhausted(self.cursor))?;
        self.cursor += 1;
        Ok(Decision { emission, record: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Sample,
    Greedy,
}

/// Drives a softmax policy through an episode.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxActor<'p> {
    pub policy: &'p LinearSoftmaxPolicy,
    pub decoding: Decoding,
}

impl Policy for SoftmaxActor<'_> {
    fn act(&mut self, episode: &Episode, config: &EnvConfig, rng: &mut dyn RngCore) -> Result<Decision, PolicyError> {
        let vocab = build_vocabulary(episode, config);
        let action = match self.decoding {
            Decoding::Sample => self.policy.sample(&vocab.features, rng)?,
            Decoding::Greedy => self.policy.greedy(&vocab.features)?,
        };
        let log_prob = self.policy.log_prob(&vocab.features, action)?;
        let emission = vocab.actions[action].emission.clone();
        Ok(Decision {
            emission,
            record: Some(ActionRecord {
                features: vocab.features,
                action,
                log_prob,
            }),
        })
    }
}
