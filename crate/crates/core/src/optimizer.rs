//! Direct gradient ascent of the estimated value over a fixed logged
//! dataset.
//!
//! The estimate is linear in the target policy's probabilities with
//! per-token coefficients `reward / propensity` fixed by the dataset, so its
//! exact gradient is a coefficient-weighted sum of probability gradients.
//! Steps use backtracking (halve the rate until the value does not decrease)
//! which makes the accepted-step trace monotone by construction.
//!
//! Two drift monitors run alongside: the exact KL divergence of the target
//! policy from the preference policy over logged entity-token contexts, and
//! from the base policy over logged context-token contexts. Weighting entity
//! tokens by the preference policy pulls the target toward graph-grounded
//! entity choices, while scoring context tokens by the base policy's own
//! likelihood keeps the target pinned to the base on everything else; the
//! second monitor is the degeneration alarm.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::LoggedDataset;
use crate::estimator::EstimatorError;
use crate::numeric::KahanSum;
use crate::policy::{PolicyGradient, TokenId, TokenPolicy};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("non-finite gradient at step {step}")]
    NonFinite { step: usize, trace: Vec<TracePoint> },

    #[error(transparent)]
    Estimator(#[from] EstimatorError),

    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
}

/// Which tokens contribute to the optimized objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveTerms {
    /// Entity and context tokens (the full estimate).
    Full,
    /// Entity (masked) tokens only.
    EntityOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub weight_cap: Option<f64>,
    pub reward_floor: f64,
    /// Step halvings allowed before accepting a zero step.
    pub backtrack_limit: u32,
    pub objective: ObjectiveTerms,
    /// Verify dataset snapshot hashes before optimizing.
    pub validate_snapshots: bool,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            steps: 100,
            weight_cap: None,
            reward_floor: -20.0,
            backtrack_limit: 40,
            objective: ObjectiveTerms::Full,
            validate_snapshots: true,
        }
    }
}

/// One accepted optimization step (step 0 records the initial state).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub kl_entity: f64,
    pub kl_nonentity: f64,
}

/// Full record of one optimization: initial state, accepted steps, and the
/// initial/final policy snapshots.
#[derive(Debug, Clone)]
pub struct OptimizationRun {
    pub initial: TracePoint,
    pub trace: Vec<TracePoint>,
    pub initial_policy: TokenPolicy,
    pub final_policy: TokenPolicy,
    pub config: OptimizeConfig,
}

impl OptimizationRun {
    pub fn initial_value(&self) -> f64 {
        self.initial.value
    }

    pub fn final_value(&self) -> f64 {
        self.trace.last().map_or(self.initial.value, |p| p.value)
    }

    pub fn final_kl_entity(&self) -> f64 {
        self.trace
            .last()
            .map_or(self.initial.kl_entity, |p| p.kl_entity)
    }

    /// CSV rows `(step, value, grad_norm, kl_entity, kl_nonentity)` with the
    /// initial state as step 0.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,value,grad_norm,kl_entity,kl_nonentity\n");
        for p in std::iter::once(&self.initial).chain(&self.trace) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.step, p.value, p.grad_norm, p.kl_entity, p.kl_nonentity
            ));
        }
        out
    }
}

fn in_scope(masked: bool, objective: ObjectiveTerms) -> bool {
    match objective {
        ObjectiveTerms::Full => true,
        ObjectiveTerms::EntityOnly => masked,
    }
}

/// Objective value for the configured token scope, using cached propensities.
pub fn objective_value(
    dataset: &LoggedDataset,
    target: &TokenPolicy,
    base: &TokenPolicy,
    config: &OptimizeConfig,
) -> f64 {
    let mut total = KahanSum::new();
    for ep in &dataset.episodes {
        let flat = ep.episode.flat_tokens();
        let steps = ep.episode.steps.len().max(1) as f64;
        let mut term = KahanSum::new();
        for ev in ep.episode.events() {
            if !in_scope(ev.masked, config.objective) {
                continue;
            }
            let state = &flat[..ev.state_len];
            let lambda = ep.lambdas[ev.step][ev.index_in_step];
            let mut ratio = target.prob(state, ev.token) / lambda;
            if let Some(cap) = config.weight_cap {
                ratio = ratio.min(cap);
            }
            let reward = base.log_prob(state, ev.token).max(config.reward_floor);
            let step_len = ep.episode.steps[ev.step].tokens.len() as f64;
            term.add(ratio * reward / (steps * step_len));
        }
        total.add(term.value());
    }
    total.value() / dataset.len().max(1) as f64
}

/// Exact gradient of [`objective_value`] with respect to the target policy's
/// logits. Tokens whose importance ratio sits above the weight cap are flat
/// under truncation and contribute nothing.
pub fn grad_value(
    dataset: &LoggedDataset,
    target: &TokenPolicy,
    pref: &TokenPolicy,
    base: &TokenPolicy,
    config: &OptimizeConfig,
) -> Result<PolicyGradient, OptimizerError> {
    target.check_vocab(dataset.vocab_hash)?;
    if config.validate_snapshots {
        dataset
            .check_snapshots(pref, base)
            .map_err(EstimatorError::from)?;
    }
    let mut grad = PolicyGradient::zero_like(target);
    let n = dataset.len().max(1) as f64;
    for ep in &dataset.episodes {
        let flat = ep.episode.flat_tokens();
        let steps = ep.episode.steps.len().max(1) as f64;
        for ev in ep.episode.events() {
            if !in_scope(ev.masked, config.objective) {
                continue;
            }
            let state = &flat[..ev.state_len];
            let lambda = ep.lambdas[ev.step][ev.index_in_step];
            if let Some(cap) = config.weight_cap {
                if target.prob(state, ev.token) / lambda > cap {
                    continue;
                }
            }
            let reward = base.log_prob(state, ev.token).max(config.reward_floor);
            let step_len = ep.episode.steps[ev.step].tokens.len() as f64;
            let coefficient = reward / (lambda * n * steps * step_len);
            grad.accumulate_prob(target, state, ev.token, coefficient);
        }
    }
    Ok(grad)
}

/// Occurrence-weighted context sets of a logged dataset, keyed by the target
/// policy's context keys: entity-token contexts and context-token contexts.
pub fn logged_contexts(
    dataset: &LoggedDataset,
    target: &TokenPolicy,
) -> (BTreeMap<Vec<TokenId>, u64>, BTreeMap<Vec<TokenId>, u64>) {
    let mut entity: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
    let mut context: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
    for ep in &dataset.episodes {
        let flat = ep.episode.flat_tokens();
        for ev in ep.episode.events() {
            let key = target.context_key(&flat[..ev.state_len]);
            let map = if ev.masked { &mut entity } else { &mut context };
            *map.entry(key).or_default() += 1;
        }
    }
    (entity, context)
}

fn weighted_kl(
    target: &TokenPolicy,
    other: &TokenPolicy,
    contexts: &BTreeMap<Vec<TokenId>, u64>,
) -> f64 {
    let total: u64 = contexts.values().sum();
    if total == 0 {
        return 0.0;
    }
    let mut acc = KahanSum::new();
    for (key, &count) in contexts {
        acc.add(count as f64 * target.kl_row(other, key));
    }
    acc.value() / total as f64
}

/// Exact KL drift monitors over the dataset's logged contexts:
/// `(KL(target || pref) on entity contexts, KL(target || base) on context contexts)`.
pub fn kl_monitors(
    dataset: &LoggedDataset,
    target: &TokenPolicy,
    pref: &TokenPolicy,
    base: &TokenPolicy,
) -> (f64, f64) {
    let (entity, context) = logged_contexts(dataset, target);
    (
        weighted_kl(target, pref, &entity),
        weighted_kl(target, base, &context),
    )
}

/// Ascend the estimated value from `target_init` over the fixed dataset.
///
/// Each step computes the exact gradient, then backtracks on the learning
/// rate until the value does not decrease; the accepted-step trace is
/// therefore monotone and the final value is at least the initial one.
/// Fully deterministic: no randomness enters the loop.
pub fn optimize_target(
    dataset: &LoggedDataset,
    target_init: &TokenPolicy,
    pref: &TokenPolicy,
    base: &TokenPolicy,
    config: &OptimizeConfig,
) -> Result<OptimizationRun, OptimizerError> {
    config_validate(config)?;
    target_init.check_vocab(dataset.vocab_hash)?;
    if config.validate_snapshots {
        dataset
            .check_snapshots(pref, base)
            .map_err(EstimatorError::from)?;
    }
    if dataset.is_empty() {
        return Err(EstimatorError::EmptyDataset.into());
    }

    let mut current = target_init.clone();
    // Materialize every logged context so updates differentiate per context
    // instead of pooling in the shared default row.
    {
        let (entity, context) = logged_contexts(dataset, &current);
        for key in entity.keys().chain(context.keys()) {
            current.logits_mut(key);
        }
    }

    let mut value = objective_value(dataset, &current, base, config);
    let inner_config = OptimizeConfig {
        validate_snapshots: false,
        ..config.clone()
    };
    let first_grad = grad_value(dataset, &current, pref, base, &inner_config)?;
    let (kl_entity, kl_nonentity) = kl_monitors(dataset, &current, pref, base);
    let initial = TracePoint {
        step: 0,
        value,
        grad_norm: first_grad.l2_norm(),
        kl_entity,
        kl_nonentity,
    };
    let initial_policy = current.clone();

    let mut trace = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let grad = grad_value(dataset, &current, pref, base, &inner_config)?;
        if !grad.is_finite() {
            return Err(OptimizerError::NonFinite { step, trace });
        }
        let grad_norm = grad.l2_norm();

        let mut lr = config.learning_rate;
        let mut accepted = false;
        for _ in 0..=config.backtrack_limit {
            let mut candidate = current.clone();
            candidate.apply_gradient(&grad, lr);
            let candidate_value = objective_value(dataset, &candidate, base, config);
            if candidate_value >= value {
                current = candidate;
                value = candidate_value;
                accepted = true;
                break;
            }
            lr /= 2.0;
        }
        // Retries exhausted: keep the current policy (zero step, value flat).
        let _ = accepted;

        let (kl_entity, kl_nonentity) = kl_monitors(dataset, &current, pref, base);
        trace.push(TracePoint {
            step,
            value,
            grad_norm,
            kl_entity,
            kl_nonentity,
        });
    }

    Ok(OptimizationRun {
        initial,
        trace,
        initial_policy,
        final_policy: current,
        config: config.clone(),
    })
}

fn config_validate(config: &OptimizeConfig) -> Result<(), OptimizerError> {
    if config.learning_rate.is_nan()
        || config.learning_rate < 0.0
        || !config.learning_rate.is_finite()
    {
        return Err(EstimatorError::Domain(format!(
            "learning_rate must be non-negative, got {}",
            config.learning_rate
        ))
        .into());
    }
    if !config.reward_floor.is_finite() {
        return Err(EstimatorError::Domain("reward_floor must be finite".into()).into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{log_episodes, LoggingConfig};
    use crate::estimator::{kg_ips_estimate, EstimatorConfig};
    use crate::graph::{EntityId, EntityRecord, KnowledgeGraph, RelationId, RelationRecord};
    use crate::policy::PolicyRole;
    use crate::verbal::{build_vocabulary, TemplateSet, Vocabulary};
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

    fn logged(n: usize, seed: u64) -> (LoggedDataset, TokenPolicy, TokenPolicy, Vocabulary) {
        let (graph, templates, vocab) = toy_world();
        let pref = TokenPolicy::uniform(&vocab, 1, PolicyRole::Preference);
        let base = TokenPolicy::uniform(&vocab, 1, PolicyRole::Base);
        let cfg = LoggingConfig::new(n, HopRange { min: 1, max: 2 }, seed);
        let ds = log_episodes(&graph, &templates, &vocab, &pref, &base, &cfg).unwrap();
        (ds, pref, base, vocab)
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (ds, pref, base, _) = logged(20, 3);
        let target = base.clone_as(PolicyRole::Target);
        let config = OptimizeConfig {
            learning_rate: 0.0,
            steps: 5,
            ..Default::default()
        };
        let run = optimize_target(&ds, &target, &pref, &base, &config).unwrap();
        assert_eq!(run.trace.len(), 5);
        for p in &run.trace {
            assert_eq!(p.value, run.initial.value);
        }
    }

    #[test]
    fn zero_steps_keeps_initial_policy() {
        let (ds, pref, base, _) = logged(10, 5);
        let target = base.clone_as(PolicyRole::Target);
        let config = OptimizeConfig {
            steps: 0,
            ..Default::default()
        };
        let run = optimize_target(&ds, &target, &pref, &base, &config).unwrap();
        assert!(run.trace.is_empty());
        assert_eq!(run.initial_policy, run.final_policy);
    }

    #[test]
    fn near_zero_coefficients_give_near_zero_gradient() {
        // Single 1-hop episode, so every context precedes exactly one logged
        // token and a near-deterministic base gives rewards ln(base) ~ 0.
        let (ds, pref, base, vocab) = logged(1, 7);
        let ep = &ds.episodes[0];
        let flat = ep.episode.flat_tokens();
        let contexts: Vec<Vec<TokenId>> = ep
            .episode
            .events()
            .iter()
            .map(|ev| base.context_key(&flat[..ev.state_len]))
            .collect();
        let distinct: std::collections::BTreeSet<_> = contexts.iter().cloned().collect();
        assert_eq!(
            distinct.len(),
            contexts.len(),
            "seed produced a repeated context"
        );
        let mut sure_base = base.clone();
        for ev in ep.episode.events() {
            let key = sure_base.context_key(&flat[..ev.state_len]);
            sure_base.logits_mut(&key)[ev.token.index()] = 60.0;
        }
        let target = TokenPolicy::uniform(&vocab, 1, PolicyRole::Target);
        let config = OptimizeConfig {
            validate_snapshots: false,
            ..Default::default()
        };
        let grad = grad_value(&ds, &target, &pref, &sure_base, &config).unwrap();
        assert!(grad.l2_norm() < 1e-10, "norm {}", grad.l2_norm());
    }

    #[test]
    fn gradient_is_mean_of_per_episode_gradients() {
        let (ds, pref, base, _) = logged(3, 11);
        let target = base.clone_as(PolicyRole::Target);
        let config = OptimizeConfig::default();
        let full = grad_value(&ds, &target, &pref, &base, &config).unwrap();
        // Uniform target has no materialized rows, so everything lands on the
        // default row; the mean of single-episode gradients must match.
        let mut acc = vec![0.0f64; target.vocab_size()];
        for ep in &ds.episodes {
            let single = LoggedDataset {
                episodes: vec![ep.clone()],
                ..ds.clone()
            };
            let g = grad_value(&single, &target, &pref, &base, &config).unwrap();
            for (t, slot) in acc.iter_mut().enumerate() {
                *slot += g.component(None, TokenId(t as u32)) / ds.len() as f64;
            }
        }
        for (t, &v) in acc.iter().enumerate() {
            let token = TokenId(t as u32);
            assert!((v - full.component(None, token)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_of_estimate() {
        let (ds, pref, base, vocab) = logged(5, 13);
        let mut target = base.clone_as(PolicyRole::Target);
        // Materialize logged contexts with random logits.
        let (entity, context) = logged_contexts(&ds, &target);
        let mut rng = crate::seeding::rng_for(17, "fd-opt", 0);
        for key in entity.keys().chain(context.keys()) {
            let row = target.logits_mut(key);
            for x in row.iter_mut() {
                *x = rand::Rng::random_range(&mut rng, -1.5..1.5);
            }
        }
        let opt_config = OptimizeConfig::default();
        let est_config = EstimatorConfig::default();
        let grad = grad_value(&ds, &target, &pref, &base, &opt_config).unwrap();
        let h = 1e-5;
        let mut probes = 0;
        let keys: Vec<Vec<TokenId>> = target.contexts().map(<[TokenId]>::to_vec).collect();
        for key in keys.iter().take(10) {
            for t in 0..vocab.len() {
                let token = TokenId(t as u32);
                let analytic = grad.component(Some(key), token);
                target.nudge(Some(key), token, h);
                let up = kg_ips_estimate(&ds, &target, &pref, &base, &est_config)
                    .unwrap()
                    .value;
                target.nudge(Some(key), token, -2.0 * h);
                let down = kg_ips_estimate(&ds, &target, &pref, &base, &est_config)
                    .unwrap()
                    .value;
                target.nudge(Some(key), token, h);
                let numeric = (up - down) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-5,
                    "coord ({key:?}, {token}): {analytic} vs {numeric}"
                );
                probes += 1;
            }
        }
        assert!(probes >= 50);
    }

    #[test]
    fn accepted_steps_never_decrease_value() {
        let (ds, pref, base, _) = logged(50, 19);
        let target = base.clone_as(PolicyRole::Target);
        let config = OptimizeConfig {
            learning_rate: 0.2,
            steps: 30,
            ..Default::default()
        };
        let run = optimize_target(&ds, &target, &pref, &base, &config).unwrap();
        let mut last = run.initial.value;
        for p in &run.trace {
            assert!(p.value >= last, "value decreased at step {}", p.step);
            last = p.value;
        }
        assert!(run.final_value() >= run.initial_value());
    }

    #[test]
    fn optimization_is_deterministic() {
        let (ds, pref, base, _) = logged(25, 23);
        let target = base.clone_as(PolicyRole::Target);
        let config = OptimizeConfig {
            learning_rate: 0.1,
            steps: 12,
            ..Default::default()
        };
        let a = optimize_target(&ds, &target, &pref, &base, &config).unwrap();
        let b = optimize_target(&ds, &target, &pref, &base, &config).unwrap();
        assert_eq!(a.trace_csv(), b.trace_csv());
        assert_eq!(a.final_policy, b.final_policy);
    }

    #[test]
    fn objective_value_matches_estimator_for_full_scope() {
        let (ds, pref, base, _) = logged(30, 29);
        let target = base.clone_as(PolicyRole::Target);
        let v = objective_value(&ds, &target, &base, &OptimizeConfig::default());
        let est = kg_ips_estimate(&ds, &target, &pref, &base, &EstimatorConfig::default()).unwrap();
        assert!((v - est.value).abs() < 1e-12);
    }

    #[test]
    fn kl_monitors_are_zero_on_identical_policies() {
        let (ds, pref, base, _) = logged(10, 31);
        let target = base.clone_as(PolicyRole::Target);
        let (_, kl_nonentity) = kl_monitors(&ds, &target, &pref, &base);
        assert!(kl_nonentity.abs() < 1e-12);
    }
}
