//! Self-consistency rewards from a graph-grounded answer oracle, and
//! reward-weighted training of the preference policy.
//!
//! Each trajectory is scored by asking its template question `K_q` times
//! against an oracle that follows the trajectory's relation chain and, with
//! probability `noise`, answers with a uniformly random wrong entity instead.
//! The reward is the fraction of correct answers, so over many trajectories
//! the reward histogram follows `Binomial(K_q, 1 - noise) / K_q`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntityId, KnowledgeGraph};
use crate::numeric::KahanSum;
use crate::policy::{PolicyGradient, TokenPolicy};
use crate::seeding;
use crate::verbal::{
    verbalize_with_question, TemplateSet, VerbalError, VerbalizedEpisode, Vocabulary,
};
use crate::walk::Trajectory;

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("noise must lie in [0, 1], got {0}")]
    BadNoise(f64),

    #[error("questions_per_trajectory must be positive")]
    ZeroQuestions,

    #[error("vocabulary mismatch between policy and episode set")]
    VocabMismatch,

    #[error(transparent)]
    Verbal(#[from] VerbalError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed rewarded-set file: {0}")]
    Malformed(String),
}

/// Graph-grounded answerer: follows the trajectory's chain exactly, except
/// that with probability `noise` it returns a uniformly random wrong entity.
#[derive(Debug, Clone)]
pub struct AnswerOracle<'g> {
    graph: &'g KnowledgeGraph,
    noise: f64,
}

impl<'g> AnswerOracle<'g> {
    pub fn new(graph: &'g KnowledgeGraph, noise: f64) -> Result<Self, PreferenceError> {
        if !(0.0..=1.0).contains(&noise) {
            return Err(PreferenceError::BadNoise(noise));
        }
        Ok(Self { graph, noise })
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Answer the trajectory's question once. With zero noise this is always
    /// the trajectory's final entity.
    pub fn answer<R: Rng>(&self, trajectory: &Trajectory, rng: &mut R) -> EntityId {
        let truth = trajectory.final_entity();
        if self.noise > 0.0 && rng.random::<f64>() < self.noise {
            let n = self.graph.entity_count() as u32;
            if n <= 1 {
                return truth; // no wrong entity exists
            }
            let mut wrong = EntityId(rng.random_range(0..n));
            while wrong == truth {
                wrong = EntityId(rng.random_range(0..n));
            }
            return wrong;
        }
        truth
    }
}

/// Fraction of `questions` oracle answers that equal the trajectory's final
/// entity; always a multiple of `1/questions` in `[0, 1]`.
pub fn self_consistency_reward(
    trajectory: &Trajectory,
    oracle: &AnswerOracle<'_>,
    questions: u32,
    rng_seed: u64,
) -> Result<f64, PreferenceError> {
    if questions == 0 {
        return Err(PreferenceError::ZeroQuestions);
    }
    let truth = trajectory.final_entity();
    let mut rng = seeding::rng_for(rng_seed, "oracle", 0);
    let correct = (0..questions)
        .filter(|_| oracle.answer(trajectory, &mut rng) == truth)
        .count();
    Ok(correct as f64 / f64::from(questions))
}

/// A trajectory with its verbalized episode and self-consistency reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedItem {
    pub trajectory: Trajectory,
    pub episode: VerbalizedEpisode,
    pub reward: f64,
}

/// The training set for the preference policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedTrajectorySet {
    pub items: Vec<RewardedItem>,
    pub questions_per_trajectory: u32,
}

/// Verbalize, question, and reward a walk set in one pass.
///
/// Scoring of distinct trajectories uses independent derived seeds, so the
/// result does not depend on evaluation order.
pub fn score_trajectories(
    graph: &KnowledgeGraph,
    templates: &TemplateSet,
    vocab: &Vocabulary,
    walks: &[Trajectory],
    noise: f64,
    questions: u32,
    rng_seed: u64,
) -> Result<RewardedTrajectorySet, PreferenceError> {
    let oracle = AnswerOracle::new(graph, noise)?;
    if questions == 0 {
        return Err(PreferenceError::ZeroQuestions);
    }
    let mut items = Vec::with_capacity(walks.len());
    for (i, walk) in walks.iter().enumerate() {
        let episode = verbalize_with_question(walk, graph, templates, vocab)?;
        let seed = seeding::derive_seed(rng_seed, "score", i as u64);
        let reward = self_consistency_reward(walk, &oracle, questions, seed)?;
        let mut trajectory = walk.clone();
        trajectory.reward = Some(reward);
        items.push(RewardedItem {
            trajectory,
            episode,
            reward,
        });
    }
    Ok(RewardedTrajectorySet {
        items,
        questions_per_trajectory: questions,
    })
}

/// Histogram over the reward levels `{0, 1/K, …, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardHistogram {
    pub questions_per_trajectory: u32,
    /// `counts[k]` holds the number of items with reward `k / K`.
    pub counts: Vec<u64>,
}

impl RewardHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Probability mass per reward level; empty set gives an all-zero row.
    pub fn mass(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect()
    }
}

/// Count items per reward level. Rewards are exact multiples of `1/K` so the
/// binning is exact.
pub fn reward_distribution(set: &RewardedTrajectorySet) -> RewardHistogram {
    let k = set.questions_per_trajectory as usize;
    let mut counts = vec![0u64; k + 1];
    for item in &set.items {
        let level = (item.reward * k as f64).round() as usize;
        counts[level.min(k)] += 1;
    }
    RewardHistogram {
        questions_per_trajectory: set.questions_per_trajectory,
        counts,
    }
}

// ── JSONL persistence ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct RewardedHeader {
    items: usize,
    questions_per_trajectory: u32,
}

#[derive(Serialize, Deserialize)]
struct RewardedRecord {
    reward: f64,
    trajectory: Vec<u32>,
    episode: serde_json::Value,
}

/// One JSON header line, then one line per item joining trajectory, episode,
/// and reward.
pub fn save_rewarded(
    path: &std::path::Path,
    set: &RewardedTrajectorySet,
) -> Result<(), PreferenceError> {
    let mut body = String::new();
    let header = RewardedHeader {
        items: set.items.len(),
        questions_per_trajectory: set.questions_per_trajectory,
    };
    body.push_str(&serde_json::to_string(&header).expect("header serializes"));
    body.push('\n');
    for item in &set.items {
        let record = RewardedRecord {
            reward: item.reward,
            trajectory: item.trajectory.to_flat_ids(),
            episode: serde_json::to_value(&item.episode).expect("episode serializes"),
        };
        body.push_str(&serde_json::to_string(&record).expect("item serializes"));
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|source| PreferenceError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_rewarded(path: &std::path::Path) -> Result<RewardedTrajectorySet, PreferenceError> {
    let text = std::fs::read_to_string(path).map_err(|source| PreferenceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: RewardedHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| PreferenceError::Malformed("missing header".into()))?,
    )
    .map_err(|e| PreferenceError::Malformed(e.to_string()))?;
    let mut items = Vec::with_capacity(header.items);
    for line in lines {
        let record: RewardedRecord =
            serde_json::from_str(line).map_err(|e| PreferenceError::Malformed(e.to_string()))?;
        let trajectory = Trajectory::from_flat_ids(&record.trajectory, Some(record.reward))
            .map_err(|e| PreferenceError::Malformed(e.to_string()))?;
        let episode: VerbalizedEpisode = serde_json::from_value(record.episode)
            .map_err(|e| PreferenceError::Malformed(e.to_string()))?;
        items.push(RewardedItem {
            trajectory,
            episode,
            reward: record.reward,
        });
    }
    if items.len() != header.items {
        return Err(PreferenceError::Malformed(format!(
            "header claims {} items, found {}",
            header.items,
            items.len()
        )));
    }
    Ok(RewardedTrajectorySet {
        items,
        questions_per_trajectory: header.questions_per_trajectory,
    })
}

// ── Preference-policy training ───────────────────────────────────────────

/// Full-batch reward-weighted ascent settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrefTrainConfig {
    /// Base learning rate; the tabular default is the reference recipe's
    /// 1e-4 scaled by 10.
    pub learning_rate: f64,
    pub epochs: usize,
    /// Linear learning-rate decay across epochs.
    pub linear_decay: bool,
    /// Step halvings allowed per epoch before accepting a zero step.
    pub backtrack_limit: u32,
}

impl Default for PrefTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 10,
            linear_decay: true,
            backtrack_limit: 40,
        }
    }
}

/// One accepted epoch of preference training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective after the accepted step.
    pub objective: f64,
    pub learning_rate: f64,
    pub backtracks: u32,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub initial_objective: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn final_objective(&self) -> f64 {
        self.epochs
            .last()
            .map_or(self.initial_objective, |e| e.objective)
    }
}

/// Reward-weighted log-likelihood `J = sum_k R_k * episode_log_prob(k)`.
pub fn preference_objective(policy: &TokenPolicy, set: &RewardedTrajectorySet) -> f64 {
    let mut acc = KahanSum::new();
    for item in &set.items {
        if item.reward != 0.0 {
            acc.add(item.reward * policy.episode_log_prob(&item.episode));
        }
    }
    acc.value()
}

/// Exact gradient of [`preference_objective`] with respect to the policy
/// logits.
pub fn preference_gradient(policy: &TokenPolicy, set: &RewardedTrajectorySet) -> PolicyGradient {
    let mut grad = PolicyGradient::zero_like(policy);
    for item in &set.items {
        if item.reward == 0.0 {
            continue;
        }
        let flat = item.episode.flat_tokens();
        for ev in item.episode.events() {
            grad.accumulate_log_prob(policy, &flat[..ev.state_len], ev.token, item.reward);
        }
    }
    grad
}

/// Ascend the reward-weighted objective with backtracking: the step is halved
/// until the objective does not decrease, so `J` is non-decreasing across
/// accepted epochs.
pub fn train_preference(
    policy: &mut TokenPolicy,
    set: &RewardedTrajectorySet,
    config: &PrefTrainConfig,
) -> Result<TrainingLog, PreferenceError> {
    if let Some(item) = set.items.first() {
        // Cheap structural check: episodes must tokenize under the policy's
        // vocabulary, so every token id has to be in range.
        let max = item.episode.flat_tokens().iter().map(|t| t.index()).max();
        if max.is_some_and(|m| m >= policy.vocab_size()) {
            return Err(PreferenceError::VocabMismatch);
        }
    }

    // Materialize every context the training set touches so gradient mass
    // lands on per-context rows rather than pooling in the default row.
    for item in &set.items {
        let flat = item.episode.flat_tokens();
        for ev in item.episode.events() {
            let key = policy.context_key(&flat[..ev.state_len]);
            policy.logits_mut(&key);
        }
    }

    let mut log = TrainingLog {
        initial_objective: preference_objective(policy, set),
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut current = log.initial_objective;

    for epoch in 0..config.epochs {
        let grad = preference_gradient(policy, set);
        let base_lr = if config.linear_decay {
            config.learning_rate * (1.0 - epoch as f64 / config.epochs as f64)
        } else {
            config.learning_rate
        };

        let mut lr = base_lr;
        let mut backtracks = 0;
        let accepted = loop {
            let mut candidate = policy.clone();
            candidate.apply_gradient(&grad, lr);
            let objective = preference_objective(&candidate, set);
            if objective >= current {
                *policy = candidate;
                break Some((objective, lr));
            }
            if backtracks >= config.backtrack_limit {
                break None;
            }
            lr /= 2.0;
            backtracks += 1;
        };

        let (objective, lr_used) = accepted.unwrap_or((current, 0.0));
        current = objective;
        log.epochs.push(EpochRecord {
            epoch,
            objective,
            learning_rate: lr_used,
            backtracks,
        });
    }
    Ok(log)
}
