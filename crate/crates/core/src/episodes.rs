//! Production of the offline logged dataset.
//!
//! Each logged episode starts from a uniformly sampled walk skeleton (start
//! entity plus relation sequence). The verbalized episode then follows the
//! statement templates deterministically, except at object-entity slots,
//! which are redrawn from the preference policy's conditional over the
//! graph-valid continuations of the current entity. Entity-mention tokens
//! record the preference policy's probability as their behavior propensity;
//! template tokens record the base policy's probability. Those cached values
//! are exactly what [`crate::estimator::lambda_propensity`] recomputes, and
//! the loader re-verifies them when policy snapshots are supplied.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::lambda_propensity;
use crate::graph::{EntityId, KnowledgeGraph};
use crate::policy::{PolicyError, TokenId, TokenPolicy};
use crate::seeding;
use crate::verbal::{
    propose_question, tokenize, Step, TemplateSet, VerbalError, VerbalizedEpisode, Vocabulary,
    OBJ_PLACEHOLDER, SUBJ_PLACEHOLDER,
};
use crate::walk::{HopRange, Trajectory, WalkError};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("{which} policy snapshot is stale: dataset has {expected:016x}, got {actual:016x}")]
    Staleness {
        which: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("cached propensity mismatch at episode {episode}, step {step}, token {index}")]
    LambdaMismatch {
        episode: usize,
        step: usize,
        index: usize,
    },

    #[error("propensity {value:e} below floor {floor:e} at step {step}, token {index}")]
    PropensityFloor {
        value: f64,
        floor: f64,
        step: usize,
        index: usize,
    },

    #[error("episode sampling exhausted after {attempts} attempts for episode {episode}")]
    Exhausted { episode: usize, attempts: usize },

    #[error(transparent)]
    Walk(#[from] WalkError),

    #[error(transparent)]
    Verbal(#[from] VerbalError),

    #[error(transparent)]
    Policy(#[from] PolicyError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed dataset file: {0}")]
    Malformed(String),
}

/// One logged episode: the verbalized tokens plus the behavior propensity of
/// every step token, cached at logging time.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedEpisode {
    pub episode: VerbalizedEpisode,
    /// `lambdas[t][j]` is the behavior propensity of step `t`'s `j`-th token.
    pub lambdas: Vec<Vec<f64>>,
}

impl LoggedEpisode {
    pub fn step_count(&self) -> usize {
        self.episode.steps.len()
    }
}

/// The offline dataset consumed by the estimator and optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedDataset {
    pub episodes: Vec<LoggedEpisode>,
    pub vocab_hash: u64,
    pub pref_hash: u64,
    pub base_hash: u64,
    pub seed: u64,
    pub hop_range: HopRange,
}

impl LoggedDataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Verify the dataset was logged under these policy snapshots.
    pub fn check_snapshots(
        &self,
        pref: &TokenPolicy,
        base: &TokenPolicy,
    ) -> Result<(), EpisodeError> {
        let actual = pref.param_hash();
        if actual != self.pref_hash {
            return Err(EpisodeError::Staleness {
                which: "preference",
                expected: self.pref_hash,
                actual,
            });
        }
        let actual = base.param_hash();
        if actual != self.base_hash {
            return Err(EpisodeError::Staleness {
                which: "base",
                expected: self.base_hash,
                actual,
            });
        }
        Ok(())
    }
}

/// Settings for [`log_episodes`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoggingConfig {
    pub count: usize,
    pub hop_range: HopRange,
    pub seed: u64,
    /// Guard against vanishing propensities. Softmax policies cannot reach
    /// it, but the check stays on.
    pub propensity_floor: f64,
    /// Attempts per episode before giving up (covers truncated skeletons and
    /// relation slots with no valid continuation).
    pub retry_budget: usize,
}

impl LoggingConfig {
    pub fn new(count: usize, hop_range: HopRange, seed: u64) -> Self {
        Self {
            count,
            hop_range,
            seed,
            propensity_floor: 1e-9,
            retry_budget: 50,
        }
    }
}

/// Recompute every cached propensity from policy snapshots.
pub fn recompute_lambdas(
    episode: &VerbalizedEpisode,
    pref: &TokenPolicy,
    base: &TokenPolicy,
) -> Vec<Vec<f64>> {
    let flat = episode.flat_tokens();
    let mut out: Vec<Vec<f64>> = episode
        .steps
        .iter()
        .map(|s| Vec::with_capacity(s.tokens.len()))
        .collect();
    for ev in episode.events() {
        let lambda = lambda_propensity(ev.masked, pref, base, &flat[..ev.state_len], ev.token);
        out[ev.step].push(lambda);
    }
    out
}

/// Draw the object entity for one relation slot from the preference policy's
/// conditional over the graph-valid continuations, scoring each candidate by
/// the product of its label-token probabilities under the growing state.
fn draw_object<R: rand::Rng>(
    candidates: &[EntityId],
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
    pref: &TokenPolicy,
    state: &[TokenId],
    rng: &mut R,
) -> EntityId {
    debug_assert!(!candidates.is_empty());
    if candidates.len() == 1 {
        return candidates[0];
    }
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&e| {
            let mut prefix = state.to_vec();
            let mut w = 1.0;
            for tok in vocab.encode(&graph.entity(e).label) {
                w *= pref.prob(&prefix, tok);
                prefix.push(tok);
            }
            w
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    candidates[crate::numeric::sample_categorical(&probs, rng)]
}

#[allow(clippy::too_many_arguments)]
fn try_log_one(
    graph: &KnowledgeGraph,
    templates: &TemplateSet,
    vocab: &Vocabulary,
    pref: &TokenPolicy,
    base: &TokenPolicy,
    skeleton: &Trajectory,
    floor: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Option<LoggedEpisode>, EpisodeError> {
    let question = propose_question(skeleton, graph, templates, vocab)?;
    let mut state: Vec<TokenId> = question.clone();
    let mut steps: Vec<Step> = Vec::with_capacity(skeleton.hop_count());
    let mut lambdas: Vec<Vec<f64>> = Vec::with_capacity(skeleton.hop_count());
    let mut hops: Vec<(crate::graph::RelationId, EntityId)> =
        Vec::with_capacity(skeleton.hop_count());
    let mut current = skeleton.start;

    for &(relation, _) in &skeleton.hops {
        let template = templates.get(graph, relation)?;
        let mut tokens = Vec::new();
        let mut mask = Vec::new();
        let mut step_lambdas = Vec::new();
        let mut next = None;

        for word in tokenize(&template.statement) {
            if word == OBJ_PLACEHOLDER {
                let candidates = graph.targets(current, relation);
                if candidates.is_empty() {
                    // The redrawn chain wandered somewhere the skeleton's
                    // relation cannot leave from; retry the whole episode.
                    return Ok(None);
                }
                let object = draw_object(&candidates, graph, vocab, pref, &state, rng);
                for tok in vocab.encode(&graph.entity(object).label) {
                    let lambda = lambda_propensity(true, pref, base, &state, tok);
                    tokens.push(tok);
                    mask.push(true);
                    step_lambdas.push(lambda);
                    state.push(tok);
                }
                next = Some(object);
            } else if word == SUBJ_PLACEHOLDER {
                for tok in vocab.encode(&graph.entity(current).label) {
                    let lambda = lambda_propensity(true, pref, base, &state, tok);
                    tokens.push(tok);
                    mask.push(true);
                    step_lambdas.push(lambda);
                    state.push(tok);
                }
            } else {
                let tok = vocab.token_id(&word);
                let lambda = lambda_propensity(false, pref, base, &state, tok);
                tokens.push(tok);
                mask.push(false);
                step_lambdas.push(lambda);
                state.push(tok);
            }
        }

        for (j, &lambda) in step_lambdas.iter().enumerate() {
            if lambda < floor {
                return Err(EpisodeError::PropensityFloor {
                    value: lambda,
                    floor,
                    step: steps.len(),
                    index: j,
                });
            }
        }

        let object = next.expect("statement template carries exactly one object slot");
        hops.push((relation, object));
        steps.push(Step {
            tokens,
            action_mask: mask,
        });
        lambdas.push(step_lambdas);
        current = object;
    }

    let trajectory = Trajectory {
        start: skeleton.start,
        hops,
        reward: None,
    };
    Ok(Some(LoggedEpisode {
        episode: VerbalizedEpisode {
            question,
            steps,
            answer: current,
            source: Some(trajectory),
        },
        lambdas,
    }))
}

/// Generate `config.count` logged episodes under the behavior protocol.
///
/// Deterministic given the seed; episodes use independent derived seed
/// streams so the result is order-stable under any parallel schedule.
pub fn log_episodes(
    graph: &KnowledgeGraph,
    templates: &TemplateSet,
    vocab: &Vocabulary,
    pref: &TokenPolicy,
    base: &TokenPolicy,
    config: &LoggingConfig,
) -> Result<LoggedDataset, EpisodeError> {
    pref.check_vocab(vocab.content_hash())?;
    base.check_vocab(vocab.content_hash())?;

    let starts = graph.non_sink_entities();
    let mut episodes = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mut logged = None;
        for attempt in 0..config.retry_budget {
            let tag = (i * config.retry_budget + attempt) as u64;
            let mut rng = seeding::rng_for(config.seed, "log-episode", tag);
            if starts.is_empty() {
                break;
            }
            let start = starts[rand::Rng::random_range(&mut rng, 0..starts.len())];
            let hops =
                rand::Rng::random_range(&mut rng, config.hop_range.min..=config.hop_range.max);
            let walk_seed = seeding::derive_seed(config.seed, "log-skeleton", tag);
            let skeleton = match crate::walk::sample_walk(graph, start, hops, walk_seed) {
                Ok(t) => t,
                Err(WalkError::Truncated { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            match try_log_one(
                graph,
                templates,
                vocab,
                pref,
                base,
                &skeleton,
                config.propensity_floor,
                &mut rng,
            )? {
                Some(ep) => {
                    logged = Some(ep);
                    break;
                }
                None => continue,
            }
        }
        match logged {
            Some(ep) => episodes.push(ep),
            None => {
                return Err(EpisodeError::Exhausted {
                    episode: i,
                    attempts: config.retry_budget,
                })
            }
        }
    }

    Ok(LoggedDataset {
        episodes,
        vocab_hash: vocab.content_hash(),
        pref_hash: pref.param_hash(),
        base_hash: base.param_hash(),
        seed: config.seed,
        hop_range: config.hop_range,
    })
}

// ── Persistence ──────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    n: usize,
    vocab_hash: String,
    pref_hash: String,
    base_hash: String,
    seed: u64,
    hop_range: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRecord {
    t: Vec<TokenId>,
    mask: Vec<bool>,
    lambda: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeRecord {
    q: Vec<TokenId>,
    steps: Vec<StepRecord>,
    answer: EntityId,
    #[serde(skip_serializing_if = "Option::is_none")]
    traj: Option<Vec<u32>>,
}

/// How a dataset load went; `validated` is false when no snapshots were
/// supplied and the propensity check was skipped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetLoadReport {
    pub episodes: usize,
    pub validated: bool,
}

/// Canonical serialization: one JSON header line, then one episode per line.
pub fn save_dataset(path: &Path, dataset: &LoggedDataset) -> Result<(), EpisodeError> {
    let mut body = String::new();
    let header = DatasetHeader {
        n: dataset.len(),
        vocab_hash: format!("{:016x}", dataset.vocab_hash),
        pref_hash: format!("{:016x}", dataset.pref_hash),
        base_hash: format!("{:016x}", dataset.base_hash),
        seed: dataset.seed,
        hop_range: [dataset.hop_range.min, dataset.hop_range.max],
    };
    body.push_str(&serde_json::to_string(&header).expect("header serializes"));
    body.push('\n');
    for ep in &dataset.episodes {
        let record = EpisodeRecord {
            q: ep.episode.question.clone(),
            steps: ep
                .episode
                .steps
                .iter()
                .zip(&ep.lambdas)
                .map(|(s, l)| StepRecord {
                    t: s.tokens.clone(),
                    mask: s.action_mask.clone(),
                    lambda: l.clone(),
                })
                .collect(),
            answer: ep.episode.answer,
            traj: ep.episode.source.as_ref().map(Trajectory::to_flat_ids),
        };
        body.push_str(&serde_json::to_string(&record).expect("episode serializes"));
        body.push('\n');
    }
    fs::write(path, body).map_err(|source| EpisodeError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_hash(s: &str) -> Result<u64, EpisodeError> {
    u64::from_str_radix(s, 16).map_err(|e| EpisodeError::Malformed(format!("bad hash: {e}")))
}

/// Load a dataset. With snapshots supplied, hashes are checked and every
/// cached propensity is recomputed and compared at 1e-12; without them the
/// validation is skipped and flagged in the report.
pub fn load_dataset(
    path: &Path,
    snapshots: Option<(&TokenPolicy, &TokenPolicy)>,
) -> Result<(LoggedDataset, DatasetLoadReport), EpisodeError> {
    let f = fs::File::open(path).map_err(|source| EpisodeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| EpisodeError::Malformed("missing header".into()))?
        .map_err(|source| EpisodeError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| EpisodeError::Malformed(format!("header: {e}")))?;

    let mut episodes = Vec::with_capacity(header.n);
    for line in lines {
        let line = line.map_err(|source| EpisodeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpisodeRecord =
            serde_json::from_str(&line).map_err(|e| EpisodeError::Malformed(e.to_string()))?;
        let mut steps = Vec::with_capacity(record.steps.len());
        let mut lambdas = Vec::with_capacity(record.steps.len());
        for s in record.steps {
            if s.t.len() != s.mask.len() || s.t.len() != s.lambda.len() {
                return Err(EpisodeError::Malformed(
                    "step token/mask/propensity arrays are not aligned".into(),
                ));
            }
            steps.push(Step {
                tokens: s.t,
                action_mask: s.mask,
            });
            lambdas.push(s.lambda);
        }
        let source = match record.traj {
            Some(flat) => Some(
                Trajectory::from_flat_ids(&flat, None)
                    .map_err(|e| EpisodeError::Malformed(e.to_string()))?,
            ),
            None => None,
        };
        episodes.push(LoggedEpisode {
            episode: VerbalizedEpisode {
                question: record.q,
                steps,
                answer: record.answer,
                source,
            },
            lambdas,
        });
    }
    if episodes.len() != header.n {
        return Err(EpisodeError::Malformed(format!(
            "header claims {} episodes, found {}",
            header.n,
            episodes.len()
        )));
    }

    let dataset = LoggedDataset {
        episodes,
        vocab_hash: parse_hash(&header.vocab_hash)?,
        pref_hash: parse_hash(&header.pref_hash)?,
        base_hash: parse_hash(&header.base_hash)?,
        seed: header.seed,
        hop_range: HopRange {
            min: header.hop_range[0],
            max: header.hop_range[1],
        },
    };

    let mut validated = false;
    if let Some((pref, base)) = snapshots {
        dataset.check_snapshots(pref, base)?;
        for (i, ep) in dataset.episodes.iter().enumerate() {
            let recomputed = recompute_lambdas(&ep.episode, pref, base);
            for (t, (cached, fresh)) in ep.lambdas.iter().zip(&recomputed).enumerate() {
                for (j, (&c, &f)) in cached.iter().zip(fresh).enumerate() {
                    if (c - f).abs() > 1e-12 {
                        return Err(EpisodeError::LambdaMismatch {
                            episode: i,
                            step: t,
                            index: j,
                        });
                    }
                }
            }
        }
        validated = true;
    }

    let report = DatasetLoadReport {
        episodes: dataset.len(),
        validated,
    };
    Ok((dataset, report))
}
