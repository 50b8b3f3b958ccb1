//! Tabular order-k softmax token policies.
//!
//! A policy conditions on the last `k` tokens of the state (BOS-padded) and
//! holds one logit row per materialized context plus a shared trainable
//! default row for unseen contexts, so probabilities are defined and strictly
//! positive for every state. Strict positivity is what guarantees nonzero
//! behavior propensities in the estimator.
//!
//! Log-probabilities, sampling, and the gradients of `ln p` and `p` with
//! respect to the logits are all exact and cheap, which keeps the
//! finite-difference checks and the enumeration oracle in [`crate::verify`]
//! honest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{log_softmax, sample_categorical, softmax, KahanSum};
use crate::seeding::{self, fnv64};
use crate::verbal::{VerbalizedEpisode, Vocabulary};

/// Dense token index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyRole {
    Target,
    Base,
    Preference,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("vocabulary mismatch: policy hash {policy:#x}, expected {expected:#x}")]
    VocabMismatch { policy: u64, expected: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed policy file: {0}")]
    MalformedFile(String),
}

/// Context-conditioned categorical distribution over a finite vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPolicy {
    vocab_size: usize,
    vocab_hash: u64,
    bos: TokenId,
    context_order: usize,
    role: PolicyRole,
    rows: BTreeMap<Vec<TokenId>, Vec<f64>>,
    default_row: Vec<f64>,
}

impl TokenPolicy {
    /// Uniform policy: no materialized rows, zero default logits.
    pub fn uniform(vocab: &Vocabulary, context_order: usize, role: PolicyRole) -> Self {
        Self {
            vocab_size: vocab.len(),
            vocab_hash: vocab.content_hash(),
            bos: vocab.bos(),
            context_order,
            role,
            rows: BTreeMap::new(),
            default_row: vec![0.0; vocab.len()],
        }
    }

    /// Count-based fit over the step tokens of a corpus: materializes one row
    /// per observed context with logits `ln(count + smoothing)`.
    ///
    /// `smoothing` must be positive so every token keeps support.
    pub fn fit_from_episodes(
        vocab: &Vocabulary,
        context_order: usize,
        role: PolicyRole,
        episodes: &[VerbalizedEpisode],
        smoothing: f64,
    ) -> Self {
        let weighted: Vec<(&VerbalizedEpisode, f64)> = episodes.iter().map(|e| (e, 1.0)).collect();
        Self::fit_from_weighted_episodes(vocab, context_order, role, &weighted, smoothing)
    }

    /// [`Self::fit_from_episodes`] with a non-negative weight per episode:
    /// logits become `ln(weighted_count + smoothing)`.
    pub fn fit_from_weighted_episodes(
        vocab: &Vocabulary,
        context_order: usize,
        role: PolicyRole,
        episodes: &[(&VerbalizedEpisode, f64)],
        smoothing: f64,
    ) -> Self {
        assert!(smoothing > 0.0, "smoothing must be positive");
        let mut policy = Self::uniform(vocab, context_order, role);
        let mut counts: BTreeMap<Vec<TokenId>, Vec<f64>> = BTreeMap::new();
        for (ep, weight) in episodes {
            debug_assert!(*weight >= 0.0);
            let flat = ep.flat_tokens();
            for ev in ep.events() {
                let key = policy.context_key(&flat[..ev.state_len]);
                counts.entry(key).or_insert_with(|| vec![0.0; vocab.len()])[ev.token.index()] +=
                    weight;
            }
        }
        policy.rows = counts
            .into_iter()
            .map(|(key, row)| {
                let logits = row.iter().map(|&c| (c + smoothing).ln()).collect();
                (key, logits)
            })
            .collect();
        policy
    }

    pub fn role(&self) -> PolicyRole {
        self.role
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    /// Check this policy was built over the same vocabulary.
    pub fn check_vocab(&self, expected: u64) -> Result<(), PolicyError> {
        if self.vocab_hash != expected {
            return Err(PolicyError::VocabMismatch {
                policy: self.vocab_hash,
                expected,
            });
        }
        Ok(())
    }

    /// Last `k` state tokens, BOS-padded on the left.
    pub fn context_key(&self, state: &[TokenId]) -> Vec<TokenId> {
        let k = self.context_order;
        let mut key = Vec::with_capacity(k);
        let pad = k.saturating_sub(state.len());
        key.extend(std::iter::repeat_n(self.bos, pad));
        key.extend_from_slice(&state[state.len() - (k - pad)..]);
        key
    }

    fn row_logits(&self, key: &[TokenId]) -> &[f64] {
        self.rows.get(key).map_or(&self.default_row, Vec::as_slice)
    }

    /// Log-softmax row for the given state.
    pub fn log_prob_row(&self, state: &[TokenId]) -> Vec<f64> {
        let key = self.context_key(state);
        log_softmax(self.row_logits(&key))
    }

    /// Softmax row for the given state.
    pub fn prob_row(&self, state: &[TokenId]) -> Vec<f64> {
        let key = self.context_key(state);
        softmax(self.row_logits(&key))
    }

    /// `ln p(token | last-k context)`; finite, with `exp` in (0, 1).
    pub fn log_prob(&self, state: &[TokenId], token: TokenId) -> f64 {
        self.log_prob_row(state)[token.index()]
    }

    pub fn prob(&self, state: &[TokenId], token: TokenId) -> f64 {
        self.log_prob(state, token).exp()
    }

    /// Draw a token from the state's softmax row.
    pub fn sample<R: rand::Rng>(&self, state: &[TokenId], rng: &mut R) -> TokenId {
        let probs = self.prob_row(state);
        TokenId(sample_categorical(&probs, rng) as u32)
    }

    /// [`Self::sample`] with a fresh deterministic RNG for `rng_seed`.
    pub fn sample_seeded(&self, state: &[TokenId], rng_seed: u64) -> TokenId {
        let mut rng = seeding::rng_for(rng_seed, "policy-sample", 0);
        self.sample(state, &mut rng)
    }

    /// Gradient of `ln p(token | state)` with respect to the logits:
    /// `one_hot(token) - softmax(row)` on the row the state resolves to.
    pub fn grad_log_prob(&self, state: &[TokenId], token: TokenId) -> PolicyGradient {
        let mut grad = PolicyGradient::zero_like(self);
        grad.accumulate_log_prob(self, state, token, 1.0);
        grad
    }

    /// Gradient of `p(token | state)`: `p * (one_hot(token) - softmax(row))`.
    pub fn grad_prob(&self, state: &[TokenId], token: TokenId) -> PolicyGradient {
        let mut grad = PolicyGradient::zero_like(self);
        grad.accumulate_prob(self, state, token, 1.0);
        grad
    }

    /// Sum of step-token log-probabilities under growing states. Question
    /// tokens are conditioned on, never scored.
    pub fn episode_log_prob(&self, episode: &VerbalizedEpisode) -> f64 {
        let flat = episode.flat_tokens();
        let mut acc = KahanSum::new();
        for ev in episode.events() {
            acc.add(self.log_prob(&flat[..ev.state_len], ev.token));
        }
        acc.value()
    }

    /// Deep copy with a new role.
    pub fn clone_as(&self, role: PolicyRole) -> Self {
        let mut out = self.clone();
        out.role = role;
        out
    }

    /// Mutable logits for `context`, materializing the row from the default
    /// row on first touch.
    pub fn logits_mut(&mut self, context: &[TokenId]) -> &mut Vec<f64> {
        self.rows
            .entry(context.to_vec())
            .or_insert_with(|| self.default_row.clone())
    }

    /// Materialized context keys, in canonical order.
    pub fn contexts(&self) -> impl Iterator<Item = &[TokenId]> {
        self.rows.keys().map(Vec::as_slice)
    }

    pub fn has_context(&self, context: &[TokenId]) -> bool {
        self.rows.contains_key(context)
    }

    /// Add `scale * grad` to the logits. Gradient rows must align with the
    /// policy's materialized rows (they do for gradients built against it).
    pub fn apply_gradient(&mut self, grad: &PolicyGradient, scale: f64) {
        for (g, d) in grad.default_row.iter().zip(self.default_row.iter_mut()) {
            *d += scale * g;
        }
        for (key, grow) in &grad.rows {
            let row = self
                .rows
                .entry(key.clone())
                .or_insert_with(|| self.default_row.clone());
            for (g, l) in grow.iter().zip(row.iter_mut()) {
                *l += scale * g;
            }
        }
    }

    /// Nudge one logit coordinate; used by finite-difference checks.
    /// `context = None` addresses the shared default row.
    pub fn nudge(&mut self, context: Option<&[TokenId]>, token: TokenId, delta: f64) {
        match context {
            None => self.default_row[token.index()] += delta,
            Some(key) => {
                let row = self
                    .rows
                    .get_mut(key)
                    .expect("nudge requires a materialized context row");
                row[token.index()] += delta;
            }
        }
    }

    /// Exact KL divergence between this policy's row and `other`'s row at the
    /// same context key.
    pub fn kl_row(&self, other: &TokenPolicy, context: &[TokenId]) -> f64 {
        let lp = log_softmax(self.row_logits(context));
        let lq = log_softmax(other.row_logits(context));
        crate::numeric::kl_divergence(&lp, &lq)
    }

    /// Stable hash of the full parameterization; used to pin policy
    /// snapshots in dataset headers.
    pub fn param_hash(&self) -> u64 {
        let file = PolicyFile::from(self);
        fnv64(
            serde_json::to_string(&file)
                .expect("policy serializes")
                .as_bytes(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let file = PolicyFile::from(self);
        let body = serde_json::to_string_pretty(&file).expect("policy serializes");
        fs::write(path, body).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: PolicyFile =
            serde_json::from_str(&text).map_err(|e| PolicyError::MalformedFile(e.to_string()))?;
        file.try_into()
    }
}

/// Serialized form: `{vocab_hash, k, role, rows: [{context, logits}], default_row}`.
#[derive(Debug, Serialize, Deserialize)]
struct PolicyFile {
    vocab_hash: String,
    vocab_size: usize,
    bos: TokenId,
    context_order: usize,
    role: PolicyRole,
    rows: Vec<PolicyRowFile>,
    default_row: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyRowFile {
    context: Vec<TokenId>,
    logits: Vec<f64>,
}

impl From<&TokenPolicy> for PolicyFile {
    fn from(p: &TokenPolicy) -> Self {
        Self {
            vocab_hash: format!("{:016x}", p.vocab_hash),
            vocab_size: p.vocab_size,
            bos: p.bos,
            context_order: p.context_order,
            role: p.role,
            rows: p
                .rows
                .iter()
                .map(|(context, logits)| PolicyRowFile {
                    context: context.clone(),
                    logits: logits.clone(),
                })
                .collect(),
            default_row: p.default_row.clone(),
        }
    }
}

impl TryFrom<PolicyFile> for TokenPolicy {
    type Error = PolicyError;

    fn try_from(file: PolicyFile) -> Result<Self, PolicyError> {
        let vocab_hash = u64::from_str_radix(&file.vocab_hash, 16)
            .map_err(|e| PolicyError::MalformedFile(format!("bad vocab hash: {e}")))?;
        if file.default_row.len() != file.vocab_size {
            return Err(PolicyError::MalformedFile(
                "default row length does not match vocab size".into(),
            ));
        }
        let mut rows = BTreeMap::new();
        for row in file.rows {
            if row.logits.len() != file.vocab_size {
                return Err(PolicyError::MalformedFile(
                    "row length does not match vocab size".into(),
                ));
            }
            if row.context.len() != file.context_order {
                return Err(PolicyError::MalformedFile(
                    "context length does not match context order".into(),
                ));
            }
            rows.insert(row.context, row.logits);
        }
        Ok(Self {
            vocab_size: file.vocab_size,
            vocab_hash,
            bos: file.bos,
            context_order: file.context_order,
            role: file.role,
            rows,
            default_row: file.default_row,
        })
    }
}

// ── Gradients ────────────────────────────────────────────────────────────

/// Per-logit partials aligned with a policy's row layout. Contributions at
/// unmaterialized contexts land on the shared default row, mirroring where
/// the probability actually comes from.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    rows: BTreeMap<Vec<TokenId>, Vec<f64>>,
    default_row: Vec<f64>,
}

impl PolicyGradient {
    /// Zero gradient with the same row layout as `policy`.
    pub fn zero_like(policy: &TokenPolicy) -> Self {
        Self {
            rows: policy
                .rows
                .keys()
                .map(|k| (k.clone(), vec![0.0; policy.vocab_size]))
                .collect(),
            default_row: vec![0.0; policy.vocab_size],
        }
    }

    fn row_mut(&mut self, policy: &TokenPolicy, key: &[TokenId]) -> &mut Vec<f64> {
        if policy.rows.contains_key(key) {
            self.rows
                .get_mut(key)
                .expect("gradient aligned with policy")
        } else {
            &mut self.default_row
        }
    }

    /// Add `weight * d(ln p(token|state))/d(logits)` in place.
    pub fn accumulate_log_prob(
        &mut self,
        policy: &TokenPolicy,
        state: &[TokenId],
        token: TokenId,
        weight: f64,
    ) {
        let key = policy.context_key(state);
        let probs = softmax(policy.row_logits(&key));
        let row = self.row_mut(policy, &key);
        for (j, p) in probs.iter().enumerate() {
            row[j] -= weight * p;
        }
        row[token.index()] += weight;
    }

    /// Add `weight * d(p(token|state))/d(logits)` in place.
    pub fn accumulate_prob(
        &mut self,
        policy: &TokenPolicy,
        state: &[TokenId],
        token: TokenId,
        weight: f64,
    ) {
        let key = policy.context_key(state);
        let probs = softmax(policy.row_logits(&key));
        let p_tok = probs[token.index()];
        let row = self.row_mut(policy, &key);
        for (j, p) in probs.iter().enumerate() {
            row[j] -= weight * p_tok * p;
        }
        row[token.index()] += weight * p_tok;
    }

    /// Read one gradient component; `context = None` addresses the default row.
    pub fn component(&self, context: Option<&[TokenId]>, token: TokenId) -> f64 {
        match context {
            None => self.default_row[token.index()],
            Some(key) => self.rows.get(key).map_or(0.0, |r| r[token.index()]),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[TokenId], &[f64])> {
        self.rows.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    pub fn default_row(&self) -> &[f64] {
        &self.default_row
    }

    pub fn l2_norm(&self) -> f64 {
        let mut sq = KahanSum::new();
        for v in self.rows.values().chain(std::iter::once(&self.default_row)) {
            for &x in v {
                sq.add(x * x);
            }
        }
        sq.value().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.rows
            .values()
            .chain(std::iter::once(&self.default_row))
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self
            .rows
            .values_mut()
            .chain(std::iter::once(&mut self.default_row))
        {
            for x in v {
                *x *= factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::KnowledgeGraph;
    use crate::verbal::{build_vocabulary, TemplateSet};

    fn tiny_vocab(n: usize) -> Vocabulary {
        // Specials plus synthetic label tokens; easiest route is through a
        // synthetic graph's vocabulary.
        let spec = crate::graph::SyntheticSpec {
            entities: n.saturating_sub(3).max(1),
            relations: 1,
            edges_per_entity: 1,
            relation_skew: 0.0,
            seed: 1,
        };
        let graph = crate::graph::generate_synthetic(&spec).unwrap();
        let templates = TemplateSet::new(
            [(
                "r0".to_string(),
                crate::verbal::RelationTemplates {
                    statement: "<SUBJ> r0 <OBJ> .".into(),
                    question: "what does <SUBJ> r0 ?".into(),
                },
            )]
            .into(),
        )
        .unwrap();
        build_vocabulary(&graph, &templates)
    }

    fn four_token_vocab() -> Vocabulary {
        // exactly |V| = 4: specials + one entity label
        let graph = KnowledgeGraph::from_parts(
            vec![crate::graph::EntityRecord {
                ext_id: "a".into(),
                label: "a".into(),
            }],
            vec![],
            vec![],
        )
        .unwrap();
        let templates = TemplateSet::new(BTreeMap::new()).unwrap();
        build_vocabulary(&graph, &templates)
    }

    use std::collections::BTreeMap;

    #[test]
    fn uniform_log_prob() {
        let vocab = four_token_vocab();
        assert_eq!(vocab.len(), 4);
        let policy = TokenPolicy::uniform(&vocab, 0, PolicyRole::Base);
        let lp = policy.log_prob(&[], TokenId(0));
        assert!((lp - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn closed_form_two_token_softmax() {
        let vocab = four_token_vocab();
        let mut policy = TokenPolicy::uniform(&vocab, 0, PolicyRole::Base);
        // Row over 4 tokens with logits (2, 0, -50, -50) approximates the
        // two-token case (e^2/(e^2+1), 1/(e^2+1)).
        *policy.logits_mut(&[]) = vec![2.0, 0.0, -50.0, -50.0];
        let p0 = policy.prob(&[], TokenId(0));
        let expected = 2f64.exp() / (2f64.exp() + 1.0);
        assert!((p0 - expected).abs() < 1e-12);
        assert!((policy.log_prob(&[], TokenId(0)) - expected.ln()).abs() < 1e-12);
    }

    #[test]
    fn rows_normalize_over_random_contexts() {
        let vocab = tiny_vocab(12);
        let mut policy = TokenPolicy::uniform(&vocab, 1, PolicyRole::Target);
        let mut rng = seeding::rng_for(3, "test", 0);
        for i in 0..100 {
            let ctx = vec![TokenId(i % vocab.len() as u32)];
            let row = policy.logits_mut(&ctx);
            for x in row.iter_mut() {
                *x = rand::Rng::random_range(&mut rng, -3.0..3.0);
            }
            let state = [TokenId(i % vocab.len() as u32)];
            let total: f64 = (0..vocab.len())
                .map(|t| policy.prob(&state, TokenId(t as u32)))
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "row {i} sums to {total}");
        }
    }

    #[test]
    fn degenerate_logits_dominate_sampling() {
        let vocab = four_token_vocab();
        let mut policy = TokenPolicy::uniform(&vocab, 0, PolicyRole::Base);
        policy.logits_mut(&[])[3] = 50.0;
        let mut rng = seeding::rng_for(11, "test", 0);
        let hits = (0..10_000)
            .filter(|_| policy.sample(&[], &mut rng) == TokenId(3))
            .count();
        assert!(
            hits >= 9990,
            "only {hits} of 10000 draws hit the dominant token"
        );
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let vocab = four_token_vocab();
        let policy = TokenPolicy::uniform(&vocab, 0, PolicyRole::Base);
        let mut rng = seeding::rng_for(13, "test", 0);
        let mut counts = [0u32; 4];
        let n = 40_000;
        for _ in 0..n {
            counts[policy.sample(&[], &mut rng).index()] += 1;
        }
        for &c in &counts {
            let freq = f64::from(c) / f64::from(n);
            assert!((freq - 0.25).abs() < 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let vocab = tiny_vocab(10);
        let policy = TokenPolicy::uniform(&vocab, 1, PolicyRole::Base);
        let state = [TokenId(4)];
        assert_eq!(
            policy.sample_seeded(&state, 42),
            policy.sample_seeded(&state, 42)
        );
    }

    #[test]
    fn grad_log_prob_uniform_two_tokens() {
        let vocab = four_token_vocab();
        let mut policy = TokenPolicy::uniform(&vocab, 0, PolicyRole::Base);
        *policy.logits_mut(&[]) = vec![0.0, 0.0, -100.0, -100.0];
        let grad = policy.grad_log_prob(&[], TokenId(0));
        let g0 = grad.component(Some(&[]), TokenId(0));
        let g1 = grad.component(Some(&[]), TokenId(1));
        assert!((g0 - 0.5).abs() < 1e-9);
        assert!((g1 + 0.5).abs() < 1e-9);
    }

    #[test]
    fn grad_log_prob_saturated_row_vanishes() {
        let vocab = four_token_vocab();
        let mut policy = TokenPolicy::uniform(&vocab, 0, PolicyRole::Base);
        policy.logits_mut(&[])[2] = 50.0;
        let grad = policy.grad_log_prob(&[], TokenId(2));
        for t in 0..4 {
            assert!(grad.component(Some(&[]), TokenId(t)).abs() < 1e-9);
        }
    }

    #[test]
    fn grad_prob_uniform_two_tokens() {
        let vocab = four_token_vocab();
        let mut policy = TokenPolicy::uniform(&vocab, 0, PolicyRole::Base);
        *policy.logits_mut(&[]) = vec![0.0, 0.0, -100.0, -100.0];
        let grad = policy.grad_prob(&[], TokenId(0));
        assert!((grad.component(Some(&[]), TokenId(0)) - 0.25).abs() < 1e-9);
        assert!((grad.component(Some(&[]), TokenId(1)) + 0.25).abs() < 1e-9);
    }

    #[test]
    fn grad_prob_row_sums_to_zero() {
        let vocab = tiny_vocab(10);
        let mut policy = TokenPolicy::uniform(&vocab, 1, PolicyRole::Target);
        let ctx = vec![TokenId(3)];
        *policy.logits_mut(&ctx) = (0..vocab.len()).map(|i| i as f64 * 0.3 - 1.0).collect();
        let grad = policy.grad_prob(&[TokenId(3)], TokenId(2));
        let total: f64 = (0..vocab.len())
            .map(|t| grad.component(Some(&ctx), TokenId(t as u32)))
            .sum();
        assert!(total.abs() < 1e-12, "row gradient sums to {total}");
    }

    /// Central finite differences on random (context, token) probes.
    fn finite_diff_check(log_space: bool) {
        let vocab = tiny_vocab(12);
        let mut policy = TokenPolicy::uniform(&vocab, 1, PolicyRole::Target);
        let mut rng = seeding::rng_for(17, "fd", 0);
        let n_ctx = 8;
        for c in 0..n_ctx {
            let ctx = vec![TokenId(c)];
            let row = policy.logits_mut(&ctx);
            for x in row.iter_mut() {
                *x = rand::Rng::random_range(&mut rng, -2.0..2.0);
            }
        }
        let h = 1e-5;
        for probe in 0..50 {
            let c = probe % n_ctx;
            let state = [TokenId(c)];
            let ctx = vec![TokenId(c)];
            let token = TokenId(rand::Rng::random_range(&mut rng, 0..vocab.len() as u32));
            let coord = TokenId(rand::Rng::random_range(&mut rng, 0..vocab.len() as u32));
            let analytic = if log_space {
                policy
                    .grad_log_prob(&state, token)
                    .component(Some(&ctx), coord)
            } else {
                policy.grad_prob(&state, token).component(Some(&ctx), coord)
            };
            let eval = |p: &TokenPolicy| {
                if log_space {
                    p.log_prob(&state, token)
                } else {
                    p.prob(&state, token)
                }
            };
            policy.nudge(Some(&ctx), coord, h);
            let up = eval(&policy);
            policy.nudge(Some(&ctx), coord, -2.0 * h);
            let down = eval(&policy);
            policy.nudge(Some(&ctx), coord, h);
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < 1e-6,
                "probe {probe}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        finite_diff_check(true);
    }

    #[test]
    fn grad_prob_matches_finite_differences() {
        finite_diff_check(false);
    }

    #[test]
    fn clone_isolation() {
        let vocab = four_token_vocab();
        let mut original = TokenPolicy::uniform(&vocab, 0, PolicyRole::Base);
        *original.logits_mut(&[]) = vec![1.0, 0.0, 0.0, 0.0];
        let mut copy = original.clone_as(PolicyRole::Target);
        copy.logits_mut(&[])[0] = 9.0;
        assert!((original.logits_mut(&[])[0] - 1.0).abs() < 1e-15);
        assert_eq!(copy.role(), PolicyRole::Target);
    }

    #[test]
    fn context_truncation_to_last_k() {
        let vocab = tiny_vocab(10);
        let mut policy = TokenPolicy::uniform(&vocab, 1, PolicyRole::Base);
        let ctx = vec![TokenId(5)];
        *policy.logits_mut(&ctx) = (0..vocab.len()).map(|i| 0.1 * i as f64).collect();
        let a = policy.log_prob(&[TokenId(1), TokenId(2), TokenId(5)], TokenId(3));
        let b = policy.log_prob(&[TokenId(8), TokenId(0), TokenId(5)], TokenId(3));
        assert_eq!(a, b);
    }

    #[test]
    fn bos_padding_for_short_states() {
        let vocab = tiny_vocab(10);
        let policy = TokenPolicy::uniform(&vocab, 2, PolicyRole::Base);
        let key = policy.context_key(&[TokenId(7)]);
        assert_eq!(key, vec![vocab.bos(), TokenId(7)]);
        let key = policy.context_key(&[]);
        assert_eq!(key, vec![vocab.bos(), vocab.bos()]);
    }

    #[test]
    fn policy_file_round_trip() {
        let vocab = tiny_vocab(10);
        let mut policy = TokenPolicy::uniform(&vocab, 1, PolicyRole::Preference);
        *policy.logits_mut(&[TokenId(2)]) = (0..vocab.len()).map(|i| i as f64 * 0.5).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        policy.save(&path).unwrap();
        let loaded = TokenPolicy::load(&path).unwrap();
        assert_eq!(policy, loaded);
        assert_eq!(policy.param_hash(), loaded.param_hash());
    }

    #[test]
    fn gradient_lands_on_default_row_for_unseen_context() {
        let vocab = tiny_vocab(10);
        let policy = TokenPolicy::uniform(&vocab, 1, PolicyRole::Target);
        let grad = policy.grad_log_prob(&[TokenId(4)], TokenId(1));
        assert!(grad.component(None, TokenId(1)) > 0.0);
        assert_eq!(grad.rows().count(), 0);
    }
}
