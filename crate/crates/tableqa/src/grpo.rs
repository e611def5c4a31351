//! Group-relative policy optimization: normalized advantages, per-token
//! importance ratios, the clipped surrogate loss, and its analytic gradient.
//!
//! The loss is the unnormalized double sum
//! `-sum_i sum_t min(r_{i,t} * A_i, clip(r_{i,t}, 1-eps, 1+eps) * A_i)`
//! over policy-generated (masked-in) tokens, where `A_i` is the episode's
//! reward minus the group mean, divided by the population standard deviation.
//! Tool-output tokens are masked out: they are not sampled from the policy,
//! so importance ratios over them carry no meaning.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::EpisodeTranscript;
use crate::eval::{exact_match, MatchMode};

/// One generated-token observation under both policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    #[serde(rename = "lp_new")]
    pub logp_new: f64,
    #[serde(rename = "lp_old")]
    pub logp_old: f64,
    /// True for policy-generated tokens; false for prompt/tool-output tokens.
    #[serde(rename = "mask")]
    pub action_mask: bool,
}

/// One episode of a rollout group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutEpisode {
    pub reward: f64,
    pub steps: Vec<TokenStep>,
}

/// G episodes for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub question_id: String,
    pub episodes: Vec<RolloutEpisode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Clip radius, in (0, 1).
    pub epsilon: f64,
    /// Stabilizer added to the population standard deviation.
    pub std_epsilon: f64,
    /// Divide loss and gradients by the number of masked-in tokens.
    /// Off by default: the objective is the plain double sum.
    pub length_normalize: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            epsilon: 0.2,
            std_epsilon: 1e-8,
            length_normalize: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("need at least 2 rewards for group normalization, got {0}")]
    TooFewEpisodes(usize),
    #[error("group {question_id:?} episode {episode} has no masked-in steps")]
    NoMaskedSteps { question_id: String, episode: usize },
    #[error("group {question_id:?} episode {episode} step {step}: log-probability must be finite and <= 0, got {value}")]
    BadLogProb {
        question_id: String,
        episode: usize,
        step: usize,
        value: f64,
    },
    #[error("epsilon must be in (0, 1), got {0}")]
    BadEpsilon(f64),
    #[error("std_epsilon must be >= 0 and finite, got {0}")]
    BadStdEpsilon(f64),
    #[error("duplicate question_id {0:?}")]
    DuplicateQuestionId(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed rollout group: {reason}")]
    MalformedGroup { line: usize, reason: String },
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(GrpoError::BadEpsilon(self.epsilon));
        }
        if !(self.std_epsilon >= 0.0 && self.std_epsilon.is_finite()) {
            return Err(GrpoError::BadStdEpsilon(self.std_epsilon));
        }
        Ok(())
    }
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.episodes.len() < 2 {
            return Err(GrpoError::TooFewEpisodes(self.episodes.len()));
        }
        for (e, episode) in self.episodes.iter().enumerate() {
            if !episode.steps.iter().any(|s| s.action_mask) {
                return Err(GrpoError::NoMaskedSteps {
                    question_id: self.question_id.clone(),
                    episode: e,
                });
            }
            for (t, step) in episode.steps.iter().enumerate() {
                for value in [step.logp_new, step.logp_old] {
                    if !(value.is_finite() && value <= 0.0) {
                        return Err(GrpoError::BadLogProb {
                            question_id: self.question_id.clone(),
                            episode: e,
                            step: t,
                            value,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Group-normalized advantages: `(R_i - mean) / (population std + std_epsilon)`.
/// A zero-variance group yields exactly zero advantages.
pub fn normalize_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<Vec<f64>, GrpoError> {
    cfg.validate()?;
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::TooFewEpisodes(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let variance = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = variance.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards
        .iter()
        .map(|r| (r - mean) / (std + cfg.std_epsilon))
        .collect())
}

/// Per-token importance ratio `exp(logp_new - logp_old)`.
pub fn importance_ratio(step: &TokenStep) -> f64 {
    (step.logp_new - step.logp_old).exp()
}

/// The clipped surrogate loss over a rollout group.
pub fn grpo_loss(group: &RolloutGroup, cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    Ok(loss_and_grad(group, cfg, false)?.0)
}

/// Per-step gradients of the loss with respect to `logp_new`, aligned with
/// each episode's step list (masked-out steps get 0).
pub fn grpo_loss_grad(group: &RolloutGroup, cfg: &GrpoConfig) -> Result<Vec<Vec<f64>>, GrpoError> {
    Ok(loss_and_grad(group, cfg, true)?.1)
}

/// Loss and gradient in one pass.
pub fn grpo_loss_and_grad(
    group: &RolloutGroup,
    cfg: &GrpoConfig,
) -> Result<(f64, Vec<Vec<f64>>), GrpoError> {
    loss_and_grad(group, cfg, true)
}

fn loss_and_grad(
    group: &RolloutGroup,
    cfg: &GrpoConfig,
    want_grad: bool,
) -> Result<(f64, Vec<Vec<f64>>), GrpoError> {
    cfg.validate()?;
    group.validate()?;
    let rewards: Vec<f64> = group.episodes.iter().map(|e| e.reward).collect();
    let advantages = normalize_advantages(&rewards, cfg)?;
    let lo = 1.0 - cfg.epsilon;
    let hi = 1.0 + cfg.epsilon;

    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(group.episodes.len());
    let mut masked_tokens = 0u64;
    for (episode, &adv) in group.episodes.iter().zip(&advantages) {
        let mut episode_grads = if want_grad {
            vec![0.0; episode.steps.len()]
        } else {
            Vec::new()
        };
        for (t, step) in episode.steps.iter().enumerate() {
            if !step.action_mask {
                continue;
            }
            masked_tokens += 1;
            let ratio = importance_ratio(step);
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(lo, hi) * adv;
            loss -= unclipped.min(clipped);
            if want_grad {
                // d(ratio)/d(logp_new) = ratio. The unclipped branch is
                // active when min picks it; at the kink it is chosen.
                let active = (adv > 0.0 && ratio <= hi) || (adv < 0.0 && ratio >= lo);
                if active {
                    episode_grads[t] = -adv * ratio;
                }
            }
        }
        grads.push(episode_grads);
    }
    if cfg.length_normalize && masked_tokens > 0 {
        let scale = 1.0 / masked_tokens as f64;
        loss *= scale;
        for episode_grads in &mut grads {
            for g in episode_grads.iter_mut() {
                *g *= scale;
            }
        }
    }
    Ok((loss, grads))
}

/// Episode reward: exact-match indicator minus a linear tool-call cost.
/// `lambda_cost = 0` (the default) reproduces the pure-EM reward.
pub fn episode_reward(
    transcript: &EpisodeTranscript,
    gold: &[String],
    lambda_cost: f64,
    mode: MatchMode,
) -> f64 {
    let em = if exact_match(transcript.final_answer.as_deref(), gold, mode) {
        1.0
    } else {
        0.0
    };
    em - lambda_cost * transcript.tool_calls.len() as f64
}

/// One question's teacher answer joined with its gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub question_id: String,
    /// None when the teacher produced no final answer.
    pub teacher: Option<Vec<String>>,
    pub gold: Vec<String>,
}

/// Simple/difficult split of training questions by teacher correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub simple: Vec<String>,
    pub difficult: Vec<String>,
}

impl Partition {
    pub fn simple_count(&self) -> usize {
        self.simple.len()
    }

    pub fn difficult_count(&self) -> usize {
        self.difficult.len()
    }

    pub fn total(&self) -> usize {
        self.simple.len() + self.difficult.len()
    }
}

/// Partition questions: simple iff the teacher's answer exactly matches gold.
pub fn partition_simple_difficult(
    records: &[PartitionRecord],
    mode: MatchMode,
) -> Result<Partition, GrpoError> {
    let mut seen = std::collections::BTreeSet::new();
    let mut partition = Partition {
        simple: Vec::new(),
        difficult: Vec::new(),
    };
    for record in records {
        if !seen.insert(record.question_id.clone()) {
            return Err(GrpoError::DuplicateQuestionId(record.question_id.clone()));
        }
        if exact_match(record.teacher.as_deref(), &record.gold, mode) {
            partition.simple.push(record.question_id.clone());
        } else {
            partition.difficult.push(record.question_id.clone());
        }
    }
    Ok(partition)
}

/// Load line-delimited rollout groups, validating every group.
pub fn load_rollout_groups(path: &Path) -> Result<Vec<RolloutGroup>, GrpoError> {
    let file = File::open(path).map_err(|source| GrpoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut groups = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| GrpoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let group: RolloutGroup =
            serde_json::from_str(&line).map_err(|e| GrpoError::MalformedGroup {
                line: line_no,
                reason: e.to_string(),
            })?;
        group.validate()?;
        groups.push(group);
    }
    Ok(groups)
}



#[cfg(test)]
mod prop_tests {
    use super::test_support::*;
    use super::*;
    use proptest::prelude::*;

    fn reward_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-4.0f64..4.0, 2..8).prop_filter("non-degenerate", |rw| {
            let mean = rw.iter().sum::<f64>() / rw.len() as f64;
            let var = rw.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rw.len() as f64;
            var.sqrt() > 0.3
        })
    }

    // Ratios kept clear of the clip kinks at 0.8 and 1.2.
    fn ratio_strategy() -> impl Strategy<Value = f64> {
        (0.4f64..1.6).prop_filter("kink-free", |r| {
            (r - 0.8).abs() > 1e-2 && (r - 1.2).abs() > 1e-2
        })
    }

    fn group_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
        reward_strategy().prop_flat_map(|rewards| {
            let g = rewards.len();
            (
                Just(rewards),
                proptest::collection::vec(
                    proptest::collection::vec(ratio_strategy(), 1..5),
                    g..=g,
                ),
            )
        })
    }

    fn build(rewards: &[f64], ratios: &[Vec<f64>]) -> RolloutGroup {
        group(
            &rewards
                .iter()
                .zip(ratios)
                .map(|(&r, rs)| (r, rs.as_slice()))
                .collect::<Vec<_>>(),
        )
    }

    proptest! {
        #[test]
        fn advantages_recompute_oracle((rewards, _r) in group_strategy()) {
            let cfg = cfg_exact();
            let adv = normalize_advantages(&rewards, &cfg).unwrap();
            // Independent recomputation.
            let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
            let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>()
                / rewards.len() as f64)
                .sqrt();
            for (a, r) in adv.iter().zip(&rewards) {
                prop_assert!((a - (r - mean) / std).abs() < 1e-12);
            }
            let out_mean = adv.iter().sum::<f64>() / adv.len() as f64;
            prop_assert!(out_mean.abs() < 1e-12);
            let out_std = (adv.iter().map(|a| (a - out_mean).powi(2)).sum::<f64>()
                / adv.len() as f64)
                .sqrt();
            prop_assert!((out_std - 1.0).abs() < 1e-9);
        }

        #[test]
        fn translation_invariance_close((rewards, ratios) in group_strategy(), c in -3.0f64..3.0) {
            let cfg = GrpoConfig::default();
            let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
            let l1 = grpo_loss(&build(&rewards, &ratios), &cfg).unwrap();
            let l2 = grpo_loss(&build(&shifted, &ratios), &cfg).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-9, "{} vs {}", l1, l2);
        }

        #[test]
        fn clip_bounds_every_token_term((rewards, ratios) in group_strategy()) {
            let cfg = cfg_exact();
            let g = build(&rewards, &ratios);
            let adv = normalize_advantages(&rewards, &cfg).unwrap();
            for (episode, &a) in g.episodes.iter().zip(&adv) {
                for step in &episode.steps {
                    let r = importance_ratio(step);
                    let term = (r * a).min(r.clamp(0.8, 1.2) * a);
                    prop_assert!(term.abs() <= (r * a).abs().max(1.2 * a.abs()) + 1e-12);
                    if a > 0.0 {
                        prop_assert!(term <= 1.2 * a + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn gradient_matches_finite_differences((rewards, ratios) in group_strategy()) {
            let cfg = cfg_exact();
            let g = build(&rewards, &ratios);
            let analytic = grpo_loss_grad(&g, &cfg).unwrap();
            let numeric = finite_difference_grads(&g, &cfg, 1e-6);
            for (a_row, n_row) in analytic.iter().zip(&numeric) {
                for (a, n) in a_row.iter().zip(n_row) {
                    prop_assert!(
                        (a - n).abs() <= 1e-6 * a.abs().max(1.0),
                        "analytic {} vs fd {}", a, n
                    );
                }
            }
        }
    }
}
