//! Importance-weighted offline value estimation with split propensities.
//!
//! The main estimator reweights each logged token by the ratio of the target
//! policy's probability to the token's behavior propensity: the preference
//! policy's probability on entity-mention tokens and the base policy's
//! probability on the surrounding context tokens. The per-token reward is the
//! base policy's log-likelihood of the logged token, so the estimate reads as
//! "how much base-policy likelihood would the target policy have collected on
//! this data". Per-step and per-token normalization keeps episodes of
//! different shapes comparable:
//!
//! `V = (1/N) sum_i (1/T_i) sum_t (1/|c_t|) sum_e ratio(e|s) * ln base(e|s)`
//!
//! Two baselines are included for contrast: plain trajectory-level importance
//! sampling (one product weight per episode, the classic high-variance form)
//! and its self-normalized variant.
//!
//! The confidence radius `M * sqrt(ln(1/delta) / (2n))` and the variance
//! proxy `M^2 / (4n)` come from treating each bounded episode term as
//! sub-Gaussian after scaling by the maximum importance ratio `M`; the
//! [`crate::verify`] module checks both empirically.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::{EpisodeError, LoggedDataset, LoggedEpisode};
use crate::numeric::{kahan_sum, sample_variance, KahanSum};
use crate::policy::{TokenId, TokenPolicy};
use crate::verbal::VerbalizedEpisode;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Episode(#[from] EpisodeError),

    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
}

/// Behavior propensity of one logged token: the preference policy's
/// probability when the action mask marks it as an entity token, otherwise
/// the base policy's probability. Strictly positive under softmax policies.
pub fn lambda_propensity(
    masked: bool,
    pref: &TokenPolicy,
    base: &TokenPolicy,
    state: &[TokenId],
    token: TokenId,
) -> f64 {
    if masked {
        pref.prob(state, token)
    } else {
        base.prob(state, token)
    }
}

/// Anything that can supply target-policy probabilities for logged tokens.
///
/// The estimate is linear in these probabilities, which the property tests
/// exercise by evaluating convex combinations of policy tables directly.
pub trait TargetProbs: Sync {
    fn target_prob(&self, state: &[TokenId], token: TokenId) -> f64;
}

impl TargetProbs for TokenPolicy {
    fn target_prob(&self, state: &[TokenId], token: TokenId) -> f64 {
        self.prob(state, token)
    }
}

impl<F> TargetProbs for F
where
    F: Fn(&[TokenId], TokenId) -> f64 + Sync,
{
    fn target_prob(&self, state: &[TokenId], token: TokenId) -> f64 {
        self(state, token)
    }
}

/// Estimator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Confidence level parameter for the reported radius.
    pub delta: f64,
    /// Optional hard truncation of importance ratios (plain/self-normalized
    /// variants truncate the per-episode product weight instead). `None`
    /// leaves ratios untouched; the maximum pre-truncation ratio is always
    /// reported as `M`.
    pub weight_cap: Option<f64>,
    /// Floor on the per-token log-likelihood reward. `ln base` is unbounded
    /// below, which would break the bounded-reward assumption behind the
    /// confidence radius; the floor makes the assumption checkable and the
    /// report says whether it ever bound.
    pub reward_floor: f64,
    /// Verify dataset snapshot hashes before estimating.
    pub validate_snapshots: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            delta: 0.05,
            weight_cap: None,
            reward_floor: -20.0,
            validate_snapshots: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.delta.is_nan() || self.delta <= 0.0 || self.delta >= 1.0 {
            return Err(EstimatorError::Domain(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if let Some(cap) = self.weight_cap {
            if cap.is_nan() || cap <= 0.0 {
                return Err(EstimatorError::Domain(format!(
                    "weight_cap must be positive, got {cap}"
                )));
            }
        }
        if !self.reward_floor.is_finite() {
            return Err(EstimatorError::Domain("reward_floor must be finite".into()));
        }
        Ok(())
    }
}

/// An estimate plus its diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueEstimate {
    /// Mean of `per_episode_terms` (compensated summation, fixed order).
    pub value: f64,
    pub per_episode_terms: Vec<f64>,
    pub n: usize,
    /// Maximum observed importance ratio before any truncation.
    pub m_max: f64,
    /// Whether any ratio (or product weight) was actually truncated.
    pub truncated: bool,
    pub delta: f64,
    /// `m_max * sqrt(ln(1/delta) / (2n))`.
    pub ci_radius: f64,
    /// Estimated variance of the estimate: sample variance of the
    /// per-episode terms divided by `n`.
    pub empirical_variance: f64,
    /// `m_max^2 / (4n)`, the sub-Gaussian proxy at the same scale.
    pub variance_proxy_bound: f64,
    /// Number of tokens whose log-likelihood reward hit the floor.
    pub reward_floor_hits: usize,
}

/// JSON report shape for the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub value: f64,
    pub n: usize,
    #[serde(rename = "M")]
    pub m: f64,
    pub truncated: bool,
    pub delta: f64,
    pub ci_radius: f64,
    pub variance: f64,
    pub proxy_bound: f64,
    pub reward_floor_hits: usize,
    /// Set when the per-episode terms were exported as CSV.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_episode_terms_path: Option<String>,
}

impl ValueEstimate {
    fn from_terms(
        terms: Vec<f64>,
        m_max: f64,
        truncated: bool,
        floor_hits: usize,
        config: &EstimatorConfig,
    ) -> Self {
        let n = terms.len();
        let value = kahan_sum(&terms) / n as f64;
        let ci_radius = confidence_radius(m_max, n, config.delta)
            .expect("m_max > 0 under softmax policies and n >= 1");
        let empirical_variance = sample_variance(&terms) / n as f64;
        let variance_proxy_bound =
            variance_proxy_bound(m_max, n).expect("m_max > 0 under softmax policies and n >= 1");
        Self {
            value,
            per_episode_terms: terms,
            n,
            m_max,
            truncated,
            delta: config.delta,
            ci_radius,
            empirical_variance,
            variance_proxy_bound,
            reward_floor_hits: floor_hits,
        }
    }

    pub fn report(&self) -> EstimateReport {
        EstimateReport {
            value: self.value,
            n: self.n,
            m: self.m_max,
            truncated: self.truncated,
            delta: self.delta,
            ci_radius: self.ci_radius,
            variance: self.empirical_variance,
            proxy_bound: self.variance_proxy_bound,
            reward_floor_hits: self.reward_floor_hits,
            per_episode_terms_path: None,
        }
    }

    /// One `episode,term` row per episode, for external plotting.
    pub fn per_episode_terms_csv(&self) -> String {
        let mut out = String::from("episode,term\n");
        for (i, term) in self.per_episode_terms.iter().enumerate() {
            out.push_str(&format!("{i},{term}\n"));
        }
        out
    }
}

struct EpisodeTermStats {
    term: f64,
    m_max: f64,
    truncated: bool,
    floor_hits: usize,
}

/// Split-propensity per-episode term: mean over steps of the mean over step
/// tokens of `ratio * floored ln base`.
fn split_propensity_term(
    ep: &LoggedEpisode,
    target: &dyn TargetProbs,
    base: &TokenPolicy,
    config: &EstimatorConfig,
) -> EpisodeTermStats {
    let flat = ep.episode.flat_tokens();
    let steps = ep.episode.steps.len().max(1);
    let mut m_max: f64 = 0.0;
    let mut truncated = false;
    let mut floor_hits = 0;
    let mut term = KahanSum::new();
    for ev in ep.episode.events() {
        let state = &flat[..ev.state_len];
        let lambda = ep.lambdas[ev.step][ev.index_in_step];
        let mut ratio = target.target_prob(state, ev.token) / lambda;
        m_max = m_max.max(ratio);
        if let Some(cap) = config.weight_cap {
            if ratio > cap {
                ratio = cap;
                truncated = true;
            }
        }
        let mut reward = base.log_prob(state, ev.token);
        if reward < config.reward_floor {
            reward = config.reward_floor;
            floor_hits += 1;
        }
        let step_len = ep.episode.steps[ev.step].tokens.len() as f64;
        term.add(ratio * reward / (steps as f64 * step_len));
    }
    EpisodeTermStats {
        term: term.value(),
        m_max,
        truncated,
        floor_hits,
    }
}

fn reduce_terms(stats: Vec<EpisodeTermStats>, config: &EstimatorConfig) -> ValueEstimate {
    let mut m_max: f64 = 0.0;
    let mut truncated = false;
    let mut floor_hits = 0;
    let mut terms = Vec::with_capacity(stats.len());
    for s in stats {
        m_max = m_max.max(s.m_max);
        truncated |= s.truncated;
        floor_hits += s.floor_hits;
        terms.push(s.term);
    }
    ValueEstimate::from_terms(terms, m_max, truncated, floor_hits, config)
}

fn check_inputs(
    dataset: &LoggedDataset,
    pref: Option<&TokenPolicy>,
    base: &TokenPolicy,
    config: &EstimatorConfig,
) -> Result<(), EstimatorError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(EstimatorError::EmptyDataset);
    }
    base.check_vocab(dataset.vocab_hash)?;
    if config.validate_snapshots {
        if let Some(pref) = pref {
            dataset.check_snapshots(pref, base)?;
        }
    }
    Ok(())
}

/// Split-propensity estimate of the target policy's value on a logged
/// dataset, with per-episode terms computed in parallel and reduced in fixed
/// order.
pub fn kg_ips_estimate(
    dataset: &LoggedDataset,
    target: &TokenPolicy,
    pref: &TokenPolicy,
    base: &TokenPolicy,
    config: &EstimatorConfig,
) -> Result<ValueEstimate, EstimatorError> {
    target.check_vocab(dataset.vocab_hash)?;
    pref.check_vocab(dataset.vocab_hash)?;
    check_inputs(dataset, Some(pref), base, config)?;
    Ok(kg_ips_with(dataset, target, base, config))
}

/// Core estimator over any target-probability source. Callers are
/// responsible for input validation; [`kg_ips_estimate`] is the checked
/// entry point.
pub fn kg_ips_with<T: TargetProbs>(
    dataset: &LoggedDataset,
    target: &T,
    base: &TokenPolicy,
    config: &EstimatorConfig,
) -> ValueEstimate {
    let stats: Vec<EpisodeTermStats> = dataset
        .episodes
        .par_iter()
        .map(|ep| split_propensity_term(ep, target, base, config))
        .collect();
    reduce_terms(stats, config)
}

/// Per-episode product weight and normalized reward for the trajectory-level
/// baselines.
fn trajectory_weight_and_reward(
    ep: &LoggedEpisode,
    target: &dyn TargetProbs,
    base: &TokenPolicy,
    config: &EstimatorConfig,
) -> (f64, f64, usize) {
    let flat = ep.episode.flat_tokens();
    let steps = ep.episode.steps.len().max(1);
    let mut weight = 1.0;
    let mut floor_hits = 0;
    let mut reward = KahanSum::new();
    for ev in ep.episode.events() {
        let state = &flat[..ev.state_len];
        let lambda = ep.lambdas[ev.step][ev.index_in_step];
        weight *= target.target_prob(state, ev.token) / lambda;
        let mut r = base.log_prob(state, ev.token);
        if r < config.reward_floor {
            r = config.reward_floor;
            floor_hits += 1;
        }
        let step_len = ep.episode.steps[ev.step].tokens.len() as f64;
        reward.add(r / (steps as f64 * step_len));
    }
    (weight, reward.value(), floor_hits)
}

/// Plain trajectory-level importance sampling: one product weight per
/// episode applied to that episode's normalized reward. Unbiased under the
/// same propensities but with variance that compounds along the chain.
pub fn plain_ips_estimate(
    dataset: &LoggedDataset,
    target: &TokenPolicy,
    pref: &TokenPolicy,
    base: &TokenPolicy,
    config: &EstimatorConfig,
) -> Result<ValueEstimate, EstimatorError> {
    target.check_vocab(dataset.vocab_hash)?;
    pref.check_vocab(dataset.vocab_hash)?;
    check_inputs(dataset, Some(pref), base, config)?;
    let stats: Vec<EpisodeTermStats> = dataset
        .episodes
        .par_iter()
        .map(|ep| {
            let (weight, reward, floor_hits) =
                trajectory_weight_and_reward(ep, target, base, config);
            let mut w = weight;
            let mut truncated = false;
            if let Some(cap) = config.weight_cap {
                if w > cap {
                    w = cap;
                    truncated = true;
                }
            }
            EpisodeTermStats {
                term: w * reward,
                m_max: weight,
                truncated,
                floor_hits,
            }
        })
        .collect();
    Ok(reduce_terms(stats, config))
}

/// Self-normalized variant of [`plain_ips_estimate`]: divides by the mean
/// product weight, so a dataset with constant reward `c` estimates exactly
/// `c`. Per-episode terms are rescaled so their mean equals the estimate.
pub fn snips_estimate(
    dataset: &LoggedDataset,
    target: &TokenPolicy,
    pref: &TokenPolicy,
    base: &TokenPolicy,
    config: &EstimatorConfig,
) -> Result<ValueEstimate, EstimatorError> {
    target.check_vocab(dataset.vocab_hash)?;
    pref.check_vocab(dataset.vocab_hash)?;
    check_inputs(dataset, Some(pref), base, config)?;
    let raw: Vec<(f64, f64, usize)> = dataset
        .episodes
        .par_iter()
        .map(|ep| trajectory_weight_and_reward(ep, target, base, config))
        .collect();
    let mut m_max: f64 = 0.0;
    let mut truncated = false;
    let mut floor_hits = 0;
    let mut weights = Vec::with_capacity(raw.len());
    let mut weighted = Vec::with_capacity(raw.len());
    for (weight, reward, hits) in raw {
        m_max = m_max.max(weight);
        floor_hits += hits;
        let mut w = weight;
        if let Some(cap) = config.weight_cap {
            if w > cap {
                w = cap;
                truncated = true;
            }
        }
        weights.push(w);
        weighted.push(w * reward);
    }
    let weight_sum = kahan_sum(&weights);
    let scale = weights.len() as f64 / weight_sum;
    let terms: Vec<f64> = weighted.iter().map(|&x| x * scale).collect();
    Ok(ValueEstimate::from_terms(
        terms, m_max, truncated, floor_hits, config,
    ))
}

/// `M * sqrt(ln(1/delta) / (2n))`.
pub fn confidence_radius(m: f64, n: usize, delta: f64) -> Result<f64, EstimatorError> {
    if m.is_nan() || m <= 0.0 {
        return Err(EstimatorError::Domain(format!(
            "M must be positive, got {m}"
        )));
    }
    if n == 0 {
        return Err(EstimatorError::Domain("n must be positive".into()));
    }
    if delta.is_nan() || delta <= 0.0 || delta >= 1.0 {
        return Err(EstimatorError::Domain(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    Ok(m * ((1.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

/// Sub-Gaussian variance proxy for the n-term average: `M^2 / (4n)`.
pub fn variance_proxy_bound(m: f64, n: usize) -> Result<f64, EstimatorError> {
    if m.is_nan() || m <= 0.0 {
        return Err(EstimatorError::Domain(format!(
            "M must be positive, got {m}"
        )));
    }
    if n == 0 {
        return Err(EstimatorError::Domain("n must be positive".into()));
    }
    Ok(m * m / (4.0 * n as f64))
}

// ── Reward decomposition ─────────────────────────────────────────────────

/// Entity-token and context-token halves of one episode's term. The two
/// halves add up exactly to the episode's contribution to the estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardDecomposition {
    /// Weighted reward over entity (masked) tokens.
    pub kg_term: f64,
    /// Weighted reward over context (unmasked) tokens.
    pub reg_term: f64,
    pub total: f64,
}

/// Split one episode's normalized term into its entity and context halves,
/// recomputing propensities from the supplied policy snapshots.
pub fn decompose_reward(
    episode: &VerbalizedEpisode,
    target: &impl TargetProbs,
    pref: &TokenPolicy,
    base: &TokenPolicy,
    config: &EstimatorConfig,
) -> RewardDecomposition {
    let flat = episode.flat_tokens();
    let steps = episode.steps.len().max(1);
    let mut kg = KahanSum::new();
    let mut reg = KahanSum::new();
    for ev in episode.events() {
        let state = &flat[..ev.state_len];
        let lambda = lambda_propensity(ev.masked, pref, base, state, ev.token);
        let mut ratio = target.target_prob(state, ev.token) / lambda;
        if let Some(cap) = config.weight_cap {
            ratio = ratio.min(cap);
        }
        let reward = base.log_prob(state, ev.token).max(config.reward_floor);
        let step_len = episode.steps[ev.step].tokens.len() as f64;
        let contribution = ratio * reward / (steps as f64 * step_len);
        if ev.masked {
            kg.add(contribution);
        } else {
            reg.add(contribution);
        }
    }
    let kg_term = kg.value();
    let reg_term = reg.value();
    RewardDecomposition {
        kg_term,
        reg_term,
        total: kg_term + reg_term,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{log_episodes, LoggingConfig};
    use crate::graph::{EntityId, EntityRecord, KnowledgeGraph, RelationId, RelationRecord};
    use crate::policy::{PolicyRole, TokenPolicy};
    use crate::verbal::{build_vocabulary, Step, TemplateSet, Vocabulary};
    use crate::walk::HopRange;

    fn toy_world() -> (KnowledgeGraph, TemplateSet, Vocabulary) {
        let entities = ["mercury", "venus", "terra", "mars"]
            .iter()
            .map(|l| EntityRecord {
                ext_id: (*l).into(),
                label: (*l).into(),
            })
            .collect();
        let relations = vec![RelationRecord {
            ext_id: "next".into(),
            label: "next".into(),
        }];
        let mut edges = Vec::new();
        for i in 0u32..4 {
            edges.push((EntityId(i), RelationId(0), EntityId((i + 1) % 4)));
            edges.push((EntityId(i), RelationId(0), EntityId((i + 2) % 4)));
        }
        let graph = KnowledgeGraph::from_parts(entities, relations, edges).unwrap();
        let templates = TemplateSet::default_for_graph(&graph);
        let vocab = build_vocabulary(&graph, &templates);
        (graph, templates, vocab)
    }

    fn logged_world(n: usize, seed: u64) -> (LoggedDataset, TokenPolicy, TokenPolicy, Vocabulary) {
        let (graph, templates, vocab) = toy_world();
        let pref = TokenPolicy::uniform(&vocab, 1, PolicyRole::Preference);
        let base = TokenPolicy::uniform(&vocab, 1, PolicyRole::Base);
        let config = LoggingConfig::new(n, HopRange { min: 1, max: 2 }, seed);
        let ds = log_episodes(&graph, &templates, &vocab, &pref, &base, &config).unwrap();
        (ds, pref, base, vocab)
    }

    /// Hand-built dataset: one episode, one step, one token.
    fn single_token_dataset(
        vocab: &Vocabulary,
        pref: &TokenPolicy,
        base: &TokenPolicy,
        token: TokenId,
        masked: bool,
    ) -> LoggedDataset {
        let episode = VerbalizedEpisode {
            question: vec![],
            steps: vec![Step {
                tokens: vec![token],
                action_mask: vec![masked],
            }],
            answer: EntityId(0),
            source: None,
        };
        let lambda = lambda_propensity(masked, pref, base, &[], token);
        LoggedDataset {
            episodes: vec![LoggedEpisode {
                episode,
                lambdas: vec![vec![lambda]],
            }],
            vocab_hash: vocab.content_hash(),
            pref_hash: pref.param_hash(),
            base_hash: base.param_hash(),
            seed: 0,
            hop_range: HopRange { min: 1, max: 1 },
        }
    }

    #[test]
    fn unit_weight_single_token() {
        let (_, _, vocab) = toy_world();
        // Base assigns ~0.5 to token 0; target equals the behavior policy.
        let mut base = TokenPolicy::uniform(&vocab, 0, PolicyRole::Base);
        let mut row = vec![-50.0; vocab.len()];
        row[0] = 0.0;
        row[1] = 0.0;
        *base.logits_mut(&[]) = row;
        let pref = base.clone_as(PolicyRole::Preference);
        let target = base.clone_as(PolicyRole::Target);
        let ds = single_token_dataset(&vocab, &pref, &base, TokenId(0), true);
        let est = kg_ips_estimate(&ds, &target, &pref, &base, &EstimatorConfig::default()).unwrap();
        assert!(
            (est.value - 0.5f64.ln()).abs() < 1e-10,
            "value {}",
            est.value
        );
        assert!((est.m_max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn on_policy_degeneracy_recovers_mean_base_loglik() {
        let (ds, pref, base, _) = logged_world(50, 3);
        // Target equal to the behavior mixture: both propensities came from
        // uniform policies, so the uniform target gives ratio one everywhere.
        let target = base.clone_as(PolicyRole::Target);
        let est = kg_ips_estimate(&ds, &target, &pref, &base, &EstimatorConfig::default()).unwrap();
        for (ep, &term) in ds.episodes.iter().zip(&est.per_episode_terms) {
            let flat = ep.episode.flat_tokens();
            let steps = ep.episode.steps.len() as f64;
            let mut expected = 0.0;
            for ev in ep.episode.events() {
                let len = ep.episode.steps[ev.step].tokens.len() as f64;
                expected += base.log_prob(&flat[..ev.state_len], ev.token) / (steps * len);
            }
            assert!((term - expected).abs() < 1e-10);
        }
        assert!((est.value - kahan_sum(&est.per_episode_terms) / est.n as f64).abs() < 1e-12);
    }

    #[test]
    fn value_is_mean_of_terms() {
        let (ds, pref, base, vocab) = logged_world(100, 7);
        let mut target = base.clone_as(PolicyRole::Target);
        target.logits_mut(&[vocab.token_id("venus")])[0] = 0.7;
        let est = kg_ips_estimate(&ds, &target, &pref, &base, &EstimatorConfig::default()).unwrap();
        let naive: f64 = est.per_episode_terms.iter().sum::<f64>() / est.n as f64;
        assert!((est.value - naive).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (_, pref, base, vocab) = logged_world(1, 3);
        let ds = LoggedDataset {
            episodes: vec![],
            vocab_hash: vocab.content_hash(),
            pref_hash: pref.param_hash(),
            base_hash: base.param_hash(),
            seed: 0,
            hop_range: HopRange { min: 1, max: 1 },
        };
        let target = base.clone_as(PolicyRole::Target);
        assert!(matches!(
            kg_ips_estimate(&ds, &target, &pref, &base, &EstimatorConfig::default()),
            Err(EstimatorError::EmptyDataset)
        ));
    }

    #[test]
    fn stale_snapshots_rejected() {
        let (ds, pref, base, vocab) = logged_world(5, 9);
        let mut drifted = pref.clone();
        drifted.logits_mut(&[vocab.bos()])[1] += 0.5;
        let target = base.clone_as(PolicyRole::Target);
        assert!(
            kg_ips_estimate(&ds, &target, &drifted, &base, &EstimatorConfig::default()).is_err()
        );
        let waived = EstimatorConfig {
            validate_snapshots: false,
            ..Default::default()
        };
        assert!(kg_ips_estimate(&ds, &target, &drifted, &base, &waived).is_ok());
    }

    #[test]
    fn weight_cap_truncates_and_reports_pretruncation_max() {
        let (ds, pref, base, vocab) = logged_world(30, 11);
        let mut target = base.clone_as(PolicyRole::Target);
        // Push the target hard toward one entity token to inflate ratios.
        let keys: Vec<Vec<TokenId>> = (0..vocab.len() as u32).map(|t| vec![TokenId(t)]).collect();
        for key in keys {
            target.logits_mut(&key)[vocab.token_id("venus").index()] = 3.0;
        }
        let uncapped =
            kg_ips_estimate(&ds, &target, &pref, &base, &EstimatorConfig::default()).unwrap();
        assert!(uncapped.m_max > 1.0);
        assert!(!uncapped.truncated);
        let capped_cfg = EstimatorConfig {
            weight_cap: Some(1.0),
            ..Default::default()
        };
        let capped = kg_ips_estimate(&ds, &target, &pref, &base, &capped_cfg).unwrap();
        assert!(capped.truncated);
        assert!((capped.m_max - uncapped.m_max).abs() < 1e-12);
        assert!(capped.value != uncapped.value);
    }

    #[test]
    fn plain_ips_equals_split_on_policy() {
        let (ds, pref, base, _) = logged_world(40, 13);
        let target = base.clone_as(PolicyRole::Target);
        let cfg = EstimatorConfig::default();
        let split = kg_ips_estimate(&ds, &target, &pref, &base, &cfg).unwrap();
        let plain = plain_ips_estimate(&ds, &target, &pref, &base, &cfg).unwrap();
        assert!((split.value - plain.value).abs() < 1e-10);
    }

    #[test]
    fn snips_of_constant_reward_is_exact() {
        // With base logits flat, every token reward is ln(1/V): constant.
        let (ds, pref, base, vocab) = logged_world(25, 17);
        let mut target = base.clone_as(PolicyRole::Target);
        let keys: Vec<Vec<TokenId>> = (0..vocab.len() as u32).map(|t| vec![TokenId(t)]).collect();
        for key in keys {
            target.logits_mut(&key)[vocab.token_id("mars").index()] = 2.0;
        }
        let est = snips_estimate(&ds, &target, &pref, &base, &EstimatorConfig::default()).unwrap();
        let constant = (1.0 / vocab.len() as f64).ln();
        assert!(
            (est.value - constant).abs() < 1e-10,
            "snips {} vs constant {constant}",
            est.value
        );
    }

    #[test]
    fn radius_closed_form() {
        let r = confidence_radius(1.0, 2, (-1.0f64).exp()).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        let r = confidence_radius(2.0, 100, 0.05).unwrap();
        let expected = 2.0 * (20f64.ln() / 200.0).sqrt();
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.2448).abs() < 1e-4);
    }

    #[test]
    fn radius_monotonicity_grid() {
        let mut last = f64::INFINITY;
        for n in [10, 20, 40, 80, 160] {
            let r = confidence_radius(1.5, n, 0.05).unwrap();
            assert!(r < last);
            last = r;
        }
        let mut last = 0.0;
        for m in [0.5, 1.0, 2.0, 4.0] {
            let r = confidence_radius(m, 50, 0.05).unwrap();
            assert!(r > last);
            last = r;
        }
    }

    #[test]
    fn radius_domain_errors() {
        assert!(confidence_radius(0.0, 10, 0.05).is_err());
        assert!(confidence_radius(1.0, 0, 0.05).is_err());
        assert!(confidence_radius(1.0, 10, 1.5).is_err());
    }

    #[test]
    fn proxy_bound_plug_ins() {
        assert!((variance_proxy_bound(1.0, 25).unwrap() - 0.01).abs() < 1e-15);
        assert!((variance_proxy_bound(2.0, 1).unwrap() - 1.0).abs() < 1e-15);
        for n in [5, 10, 20, 40] {
            let a = variance_proxy_bound(1.7, n).unwrap();
            let b = variance_proxy_bound(1.7, 2 * n).unwrap();
            assert!((a / b - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decomposition_edges_and_additivity() {
        let (ds, pref, base, vocab) = logged_world(100, 19);
        let mut target = base.clone_as(PolicyRole::Target);
        let keys: Vec<Vec<TokenId>> = (0..vocab.len() as u32).map(|t| vec![TokenId(t)]).collect();
        for (i, key) in keys.iter().enumerate() {
            target.logits_mut(key)[i % vocab.len()] = 1.3;
        }
        let cfg = EstimatorConfig::default();
        let est = kg_ips_estimate(&ds, &target, &pref, &base, &cfg).unwrap();
        for (ep, &term) in ds.episodes.iter().zip(&est.per_episode_terms) {
            let d = decompose_reward(&ep.episode, &target, &pref, &base, &cfg);
            assert!((d.total - (d.kg_term + d.reg_term)).abs() < 1e-12);
            assert!(
                (d.total - term).abs() < 1e-12,
                "decomposition {} vs term {term}",
                d.total
            );
        }
    }

    #[test]
    fn decomposition_all_masked_has_zero_reg_term() {
        let (_, _, vocab) = toy_world();
        let base = TokenPolicy::uniform(&vocab, 1, PolicyRole::Base);
        let pref = TokenPolicy::uniform(&vocab, 1, PolicyRole::Preference);
        let target = base.clone_as(PolicyRole::Target);
        let episode = VerbalizedEpisode {
            question: vec![],
            steps: vec![Step {
                tokens: vec![TokenId(3), TokenId(4)],
                action_mask: vec![true, true],
            }],
            answer: EntityId(0),
            source: None,
        };
        let d = decompose_reward(&episode, &target, &pref, &base, &EstimatorConfig::default());
        assert_eq!(d.reg_term, 0.0);
        assert!(d.kg_term < 0.0);
        let episode = VerbalizedEpisode {
            question: vec![],
            steps: vec![Step {
                tokens: vec![TokenId(3), TokenId(4)],
                action_mask: vec![false, false],
            }],
            answer: EntityId(0),
            source: None,
        };
        let d = decompose_reward(&episode, &target, &pref, &base, &EstimatorConfig::default());
        assert_eq!(d.kg_term, 0.0);
        assert!(d.reg_term < 0.0);
    }

    #[test]
    fn estimate_is_linear_in_target_probability_table() {
        let (ds, pref, base, vocab) = logged_world(60, 23);
        let mut a = base.clone_as(PolicyRole::Target);
        let mut b = base.clone_as(PolicyRole::Target);
        let keys: Vec<Vec<TokenId>> = (0..vocab.len() as u32).map(|t| vec![TokenId(t)]).collect();
        for (i, key) in keys.iter().enumerate() {
            a.logits_mut(key)[i % vocab.len()] = 1.0;
            b.logits_mut(key)[(i + 3) % vocab.len()] = -0.8;
        }
        let cfg = EstimatorConfig::default();
        let ea = kg_ips_estimate(&ds, &a, &pref, &base, &cfg).unwrap();
        let eb = kg_ips_estimate(&ds, &b, &pref, &base, &cfg).unwrap();
        let w = 0.3;
        let mix = |state: &[TokenId], token: TokenId| {
            w * a.prob(state, token) + (1.0 - w) * b.prob(state, token)
        };
        let em = kg_ips_with(&ds, &mix, &base, &cfg);
        let expected = w * ea.value + (1.0 - w) * eb.value;
        assert!(
            (em.value - expected).abs() < 1e-12,
            "mixture {} vs {expected}",
            em.value
        );
    }

    #[test]
    fn plain_ips_variance_exceeds_split_variance_under_divergence() {
        let (graph, templates, vocab) = toy_world();
        let pref = TokenPolicy::uniform(&vocab, 1, PolicyRole::Preference);
        let base = TokenPolicy::uniform(&vocab, 1, PolicyRole::Base);
        let mut target = base.clone_as(PolicyRole::Target);
        // Entity logits shifted +3 in the object-slot context: strong
        // divergence exactly where the behavior draws are stochastic, so the
        // trajectory-level product weight spreads over orders of magnitude.
        let next = vocab.token_id("next");
        target.logits_mut(&[next])[vocab.token_id("venus").index()] = 3.0;
        let cfg = EstimatorConfig::default();
        let mut split_vals = Vec::new();
        let mut plain_vals = Vec::new();
        for rep in 0..200 {
            let lcfg = LoggingConfig::new(40, HopRange { min: 2, max: 2 }, 1000 + rep);
            let ds = log_episodes(&graph, &templates, &vocab, &pref, &base, &lcfg).unwrap();
            split_vals.push(
                kg_ips_estimate(&ds, &target, &pref, &base, &cfg)
                    .unwrap()
                    .value,
            );
            plain_vals.push(
                plain_ips_estimate(&ds, &target, &pref, &base, &cfg)
                    .unwrap()
                    .value,
            );
        }
        let v_split = sample_variance(&split_vals);
        let v_plain = sample_variance(&plain_vals);
        assert!(
            v_plain > v_split,
            "plain variance {v_plain} not above split variance {v_split}"
        );
    }
}
