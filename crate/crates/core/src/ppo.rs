//! PPO with GAE, environment-position masking and an exact KL penalty.
//!
//! Every macro-action is one position. Positions produced by the environment
//! carry mask 0 and never enter the actor or critic losses. Losses average
//! over unmasked positions of the whole batch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{categorical_kl, log_softmax, score_function, FeatureMatrix, LinearCritic, LinearSoftmaxPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum PpoError {
    #[error("empty value sequence")]
    EmptyValues,
    #[error("trajectory {trajectory}: {field} has length {got}, expected {expected}")]
    Length {
        trajectory: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("trajectory {trajectory} position {position}: action {action} outside vocabulary of {size}")]
    Action {
        trajectory: usize,
        position: usize,
        action: usize,
        size: usize,
    },
    #[error("non-finite {0} gradient; step aborted")]
    NonFinite(&'static str),
    #[error("invalid PPO config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub kl_coef: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub rollouts_per_step: usize,
    pub update_epochs: usize,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            gamma: 1.0,
            lambda: 1.0,
            kl_coef: 1e-3,
            actor_lr: 0.05,
            critic_lr: 0.1,
            rollouts_per_step: 16,
            update_epochs: 2,
            normalize_advantages: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let err = |m: &str| Err(PpoError::Config(m.to_owned()));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return err("ppo.clip_epsilon must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return err("ppo.gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return err("ppo.lambda must lie in [0, 1]");
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return err("ppo.kl_coef must be finite and non-negative");
        }
        if !(self.actor_lr > 0.0 && self.actor_lr.is_finite()) {
            return err("ppo.actor_lr must be positive");
        }
        if !(self.critic_lr > 0.0 && self.critic_lr.is_finite()) {
            return err("ppo.critic_lr must be positive");
        }
        if self.rollouts_per_step == 0 {
            return err("ppo.rollouts_per_step must be at least 1");
        }
        if self.update_epochs == 0 {
            return err("ppo.update_epochs must be at least 1");
        }
        Ok(())
    }
}

/// Positions of one trajectory as parallel sequences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRollout {
    pub actions: Vec<usize>,
    /// 1 for policy emissions, 0 for environment injections.
    pub mask: Vec<u8>,
    pub old_log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// Action features per position; empty for masked positions.
    pub observations: Vec<FeatureMatrix>,
    /// Critic input per position.
    pub value_features: Vec<Vec<f64>>,
    pub reward: f64,
}

impl TrajectoryRollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn validate(&self, index: usize) -> Result<(), PpoError> {
        let n = self.actions.len();
        let lens = [
            ("mask", self.mask.len()),
            ("old_log_probs", self.old_log_probs.len()),
            ("values", self.values.len()),
            ("observations", self.observations.len()),
            ("value_features", self.value_features.len()),
        ];
        for (field, got) in lens {
            if got != n {
                return Err(PpoError::Length {
                    trajectory: index,
                    field,
                    expected: n,
                    got,
                });
            }
        }
        for (i, (&a, obs)) in self.actions.iter().zip(&self.observations).enumerate() {
            if self.mask[i] != 0 && a >= obs.rows {
                return Err(PpoError::Action {
                    trajectory: index,
                    position: i,
                    action: a,
                    size: obs.rows,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    pub trajectories: Vec<TrajectoryRollout>,
}

impl RolloutBatch {
    pub fn validate(&self) -> Result<(), PpoError> {
        self.trajectories
            .iter()
            .enumerate()
            .try_for_each(|(i, t)| t.validate(i))
    }

    pub fn unmasked_count(&self) -> usize {
        self.trajectories
            .iter()
            .flat_map(|t| &t.mask)
            .filter(|m| **m != 0)
            .count()
    }

    pub fn mean_reward(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(|t| t.reward).sum::<f64>() / self.trajectories.len() as f64
    }
}

/// GAE with `V_T = R`: `δ_i = γV_{i+1} − V_i`, `Â_i = Σ_j (γλ)^{j−i} δ_j`.
pub fn compute_gae(values: &[f64], reward: f64, gamma: f64, lambda: f64) -> Result<Vec<f64>, PpoError> {
    if values.is_empty() {
        return Err(PpoError::EmptyValues);
    }
    if gamma == 1.0 && lambda == 1.0 {
        return Ok(values.iter().map(|v| reward - v).collect());
    }
    Ok(gae_recursive(values, reward, gamma, lambda))
}

/// Backward recursion `Â_i = δ_i + γλ Â_{i+1}`, valid for every γ, λ.
pub fn gae_recursive(values: &[f64], reward: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = values.len();
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for i in (0..n).rev() {
        let v_next = if i + 1 == n { reward } else { values[i + 1] };
        let delta = gamma * v_next - values[i];
        next = delta + gamma * lambda * next;
        adv[i] = next;
    }
    adv
}

/// Advantages for every position of every trajectory, optionally normalized
/// over unmasked positions.
pub fn batch_advantages(batch: &RolloutBatch, config: &PpoConfig) -> Result<Vec<Vec<f64>>, PpoError> {
    let mut adv = batch
        .trajectories
        .iter()
        .map(|t| compute_gae(&t.values, t.reward, config.gamma, config.lambda))
        .collect::<Result<Vec<_>, _>>()?;
    if config.normalize_advantages {
        let live: Vec<f64> = batch
            .trajectories
            .iter()
            .zip(&adv)
            .flat_map(|(t, a)| t.mask.iter().zip(a).filter(|(m, _)| **m != 0).map(|(_, x)| *x))
            .collect();
        if live.len() > 1 {
            let mean = live.iter().sum::<f64>() / live.len() as f64;
            let var = live.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / live.len() as f64;
            let sd = var.sqrt().max(1e-8);
            for (t, a) in batch.trajectories.iter().zip(adv.iter_mut()) {
                for (m, x) in t.mask.iter().zip(a.iter_mut()) {
                    if *m != 0 {
                        *x = (*x - mean) / sd;
                    }
                }
            }
        }
    }
    Ok(adv)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurrogateStats {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

fn check_advantages(batch: &RolloutBatch, advantages: &[Vec<f64>]) -> Result<(), PpoError> {
    if advantages.len() != batch.trajectories.len() {
        return Err(PpoError::Length {
            trajectory: advantages.len().min(batch.trajectories.len()),
            field: "advantages",
            expected: batch.trajectories.len(),
            got: advantages.len(),
        });
    }
    for (i, (t, a)) in batch.trajectories.iter().zip(advantages).enumerate() {
        if t.len() != a.len() {
            return Err(PpoError::Length {
                trajectory: i,
                field: "advantages",
                expected: t.len(),
                got: a.len(),
            });
        }
    }
    Ok(())
}

/// Negative clipped objective averaged over unmasked positions, with its
/// gradient in the policy weights.
pub fn clipped_surrogate(
    batch: &RolloutBatch,
    policy: &LinearSoftmaxPolicy,
    advantages: &[Vec<f64>],
    epsilon: f64,
) -> Result<SurrogateStats, PpoError> {
    batch.validate()?;
    check_advantages(batch, advantages)?;
    let dim = policy.weights.len();
    let mut stats = SurrogateStats {
        grad: vec![0.0; dim],
        ..Default::default()
    };
    let mut count = 0usize;
    let mut clipped = 0usize;
    for (t, adv) in batch.trajectories.iter().zip(advantages) {
        for i in 0..t.len() {
            if t.mask[i] == 0 {
                continue;
            }
            let obs = &t.observations[i];
            let a = t.actions[i];
            let lp = log_softmax(obs, &policy.weights)[a];
            let ratio = (lp - t.old_log_probs[i]).exp();
            let adv = adv[i];
            let unclipped = ratio * adv;
            let bounded = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * adv;
            stats.loss -= unclipped.min(bounded);
            stats.mean_ratio += ratio;
            count += 1;
            if unclipped <= bounded {
                let g = score_function(obs, &policy.weights, a);
                for (s, gk) in stats.grad.iter_mut().zip(g) {
                    *s -= adv * ratio * gk;
                }
            }
            if (ratio - 1.0).abs() > epsilon {
                clipped += 1;
            }
        }
    }
    if count > 0 {
        let n = count as f64;
        stats.loss /= n;
        stats.mean_ratio /= n;
        stats.clip_fraction = clipped as f64 / n;
        stats.grad.iter_mut().for_each(|g| *g /= n);
    }
    Ok(stats)
}

/// `β · mean KL(π ‖ π_ref)` over unmasked positions and its gradient.
pub fn kl_penalty(
    batch: &RolloutBatch,
    policy: &LinearSoftmaxPolicy,
    reference: &LinearSoftmaxPolicy,
    beta: f64,
) -> Result<(f64, Vec<f64>), PpoError> {
    batch.validate()?;
    let dim = policy.weights.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; dim];
    let mut count = 0usize;
    for t in &batch.trajectories {
        for (obs, m) in t.observations.iter().zip(&t.mask) {
            if *m == 0 {
                continue;
            }
            let (kl, g) = categorical_kl(obs, &policy.weights, &reference.weights);
            value += kl;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            count += 1;
        }
    }
    if count == 0 || beta == 0.0 {
        return Ok((0.0, vec![0.0; dim]));
    }
    let scale = beta / count as f64;
    Ok((value * scale, grad.into_iter().map(|g| g * scale).collect()))
}

/// Half mean squared error of `values` against `reward`, and its gradient
/// with respect to each value.
pub fn critic_loss(values: &[f64], reward: f64) -> Result<(f64, Vec<f64>), PpoError> {
    if values.is_empty() {
        return Err(PpoError::EmptyValues);
    }
    let n = values.len() as f64;
    let loss = values.iter().map(|v| (v - reward).powi(2)).sum::<f64>() / (2.0 * n);
    let grad = values.iter().map(|v| (v - reward) / n).collect();
    Ok((loss, grad))
}

/// Critic regression over unmasked positions of the batch, evaluated with
/// the current critic weights.
pub fn critic_objective(batch: &RolloutBatch, critic: &LinearCritic) -> Result<(f64, Vec<f64>), PpoError> {
    batch.validate()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; critic.weights.len()];
    let mut count = 0usize;
    for t in &batch.trajectories {
        for (psi, m) in t.value_features.iter().zip(&t.mask) {
            if *m == 0 {
                continue;
            }
            let err = critic.value(psi) - t.reward;
            loss += 0.5 * err * err;
            for (g, x) in grad.iter_mut().zip(critic.grad_value(psi)) {
                *g += err * x;
            }
            count += 1;
        }
    }
    if count > 0 {
        let n = count as f64;
        loss /= n;
        grad.iter_mut().for_each(|g| *g /= n);
    }
    Ok((loss, grad))
}

/// Total actor loss (clipped surrogate plus KL penalty) and its gradient.
pub fn actor_objective(
    batch: &RolloutBatch,
    policy: &LinearSoftmaxPolicy,
    reference: &LinearSoftmaxPolicy,
    advantages: &[Vec<f64>],
    config: &PpoConfig,
) -> Result<(SurrogateStats, f64), PpoError> {
    let mut s = clipped_surrogate(batch, policy, advantages, config.clip_epsilon)?;
    let (kl, kl_grad) = kl_penalty(batch, policy, reference, config.kl_coef)?;
    s.loss += kl;
    s.grad.iter_mut().zip(kl_grad).for_each(|(a, b)| *a += b);
    Ok((s, kl))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct UpdateDiagnostics {
    pub mean_total_reward: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    /// Unscaled mean KL to the reference policy.
    pub kl: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

/// Run `update_epochs` full-batch gradient steps on actor and critic.
/// The batch's old log-probs define the behavior policy.
pub fn update_step(
    policy: &LinearSoftmaxPolicy,
    critic: &LinearCritic,
    reference: &LinearSoftmaxPolicy,
    batch: &RolloutBatch,
    config: &PpoConfig,
) -> Result<(LinearSoftmaxPolicy, LinearCritic, UpdateDiagnostics), PpoError> {
    config.validate()?;
    batch.validate()?;
    let advantages = batch_advantages(batch, config)?;
    let mut policy = policy.clone();
    let mut critic = critic.clone();
    let mut diag = UpdateDiagnostics {
        mean_total_reward: batch.mean_reward(),
        ..Default::default()
    };
    for epoch in 0..config.update_epochs {
        let (stats, kl) = actor_objective(batch, &policy, reference, &advantages, config)?;
        let (closs, cgrad) = critic_objective(batch, &critic)?;
        if !stats.grad.iter().all(|g| g.is_finite()) {
            return Err(PpoError::NonFinite("actor"));
        }
        if !cgrad.iter().all(|g| g.is_finite()) {
            return Err(PpoError::NonFinite("critic"));
        }
        if epoch == 0 {
            diag.actor_loss = stats.loss;
            diag.critic_loss = closs;
            diag.mean_ratio = stats.mean_ratio;
            diag.clip_fraction = stats.clip_fraction;
            diag.kl = if config.kl_coef > 0.0 { kl / config.kl_coef } else { 0.0 };
        } else {
            diag.clip_fraction = diag.clip_fraction.max(stats.clip_fraction);
        }
        for (w, g) in policy.weights.iter_mut().zip(&stats.grad) {
            *w -= config.actor_lr * g;
        }
        for (v, g) in critic.weights.iter_mut().zip(&cgrad) {
            *v -= config.critic_lr * g;
        }
    }
    if config.kl_coef == 0.0 {
        let mut kl = 0.0;
        let mut n = 0usize;
        for t in &batch.trajectories {
            for (obs, m) in t.observations.iter().zip(&t.mask) {
                if *m != 0 {
                    kl += categorical_kl(obs, &policy.weights, &reference.weights).0;
                    n += 1;
                }
            }
        }
        diag.kl = if n > 0 { kl / n as f64 } else { 0.0 };
    }
    Ok((policy, critic, diag))
}
