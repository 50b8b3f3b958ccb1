//! Deterministic verbalization of graph trajectories into token sequences.
//!
//! Each relation carries exactly one statement template and one question
//! template. Statements render one reasoning step per hop with the subject
//! and object entity mentions marked in an action mask; questions are built
//! by nesting the per-relation question templates so the final question names
//! the start entity and every relation phrase on the chain, with the chain's
//! last entity as its designated answer.
//!
//! Tokenization is whitespace word-level over labels and templates: no
//! subwords, so policies stay tabular and masked spans decode back to entity
//! labels verbatim. Multi-word labels occupy multiple masked tokens.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntityId, KnowledgeGraph, RelationId};
use crate::policy::TokenId;
use crate::seeding::fnv64;
use crate::walk::Trajectory;

pub const SUBJ_PLACEHOLDER: &str = "<SUBJ>";
pub const OBJ_PLACEHOLDER: &str = "<OBJ>";

#[derive(Debug, Error)]
pub enum VerbalError {
    #[error("no template for relation {0}")]
    MissingTemplate(String),

    #[error("bad template for relation {relation}: {message}")]
    BadTemplate { relation: String, message: String },

    #[error("trajectory invalid for graph: {0}")]
    InvalidTrajectory(String),

    #[error("trajectory has no hops")]
    EmptyTrajectory,

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed template file: {0}")]
    MalformedFile(String),
}

/// Whitespace word-level tokenizer used for labels and templates.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

// ── Templates ────────────────────────────────────────────────────────────

/// Statement and question surface forms for one relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTemplates {
    /// Contains `<SUBJ>` and `<OBJ>` exactly once each, e.g.
    /// `"<SUBJ> is the capital of <OBJ> ."`.
    pub statement: String,
    /// Contains `<SUBJ>` exactly once, e.g. `"what is <SUBJ> the capital of ?"`.
    pub question: String,
}

/// Template file contents: relation external id to its surface forms.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateSet {
    templates: BTreeMap<String, RelationTemplates>,
}

impl TemplateSet {
    pub fn new(templates: BTreeMap<String, RelationTemplates>) -> Result<Self, VerbalError> {
        let set = Self { templates };
        set.validate()?;
        Ok(set)
    }

    /// One generic template per relation, phrased from the relation label.
    /// Used when no handcrafted template file is supplied.
    pub fn default_for_graph(graph: &KnowledgeGraph) -> Self {
        let templates = graph
            .relations()
            .map(|(_, rec)| {
                (
                    rec.ext_id.clone(),
                    RelationTemplates {
                        statement: format!("{SUBJ_PLACEHOLDER} {} {OBJ_PLACEHOLDER} .", rec.label),
                        question: format!("what does {SUBJ_PLACEHOLDER} {} ?", rec.label),
                    },
                )
            })
            .collect();
        Self { templates }
    }

    fn validate(&self) -> Result<(), VerbalError> {
        for (rel, t) in &self.templates {
            let bad = |message: &str| VerbalError::BadTemplate {
                relation: rel.clone(),
                message: message.into(),
            };
            let st = tokenize(&t.statement);
            if st.iter().filter(|w| *w == SUBJ_PLACEHOLDER).count() != 1 {
                return Err(bad("statement must contain <SUBJ> exactly once"));
            }
            if st.iter().filter(|w| *w == OBJ_PLACEHOLDER).count() != 1 {
                return Err(bad("statement must contain <OBJ> exactly once"));
            }
            let qt = tokenize(&t.question);
            if qt.iter().filter(|w| *w == SUBJ_PLACEHOLDER).count() != 1 {
                return Err(bad("question must contain <SUBJ> exactly once"));
            }
            if qt.iter().any(|w| w == OBJ_PLACEHOLDER) {
                return Err(bad("question must not contain <OBJ>"));
            }
        }
        Ok(())
    }

    pub fn get(
        &self,
        graph: &KnowledgeGraph,
        relation: RelationId,
    ) -> Result<&RelationTemplates, VerbalError> {
        let ext = &graph.relation(relation).ext_id;
        self.templates
            .get(ext)
            .ok_or_else(|| VerbalError::MissingTemplate(ext.clone()))
    }

    pub fn load(path: &Path) -> Result<Self, VerbalError> {
        let text = fs::read_to_string(path).map_err(|source| VerbalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let templates: BTreeMap<String, RelationTemplates> =
            serde_json::from_str(&text).map_err(|e| VerbalError::MalformedFile(e.to_string()))?;
        Self::new(templates)
    }

    pub fn save(&self, path: &Path) -> Result<(), VerbalError> {
        let body = serde_json::to_string_pretty(&self.templates).expect("templates serialize");
        fs::write(path, body).map_err(|source| VerbalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &RelationTemplates)> {
        self.templates.iter()
    }
}

// ── Vocabulary ───────────────────────────────────────────────────────────

/// Finite token vocabulary with `<bos>`, `<eos>`, `<unk>` specials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    token_of: HashMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
    unk: TokenId,
}

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

impl Vocabulary {
    fn from_token_list(tokens: Vec<String>) -> Self {
        let token_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId(i as u32)))
            .collect();
        let mut v = Self {
            tokens,
            token_of,
            bos: TokenId(0),
            eos: TokenId(1),
            unk: TokenId(2),
        };
        v.bos = v.token_of[BOS_TOKEN];
        v.eos = v.token_of[EOS_TOKEN];
        v.unk = v.token_of[UNK_TOKEN];
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn token_id(&self, token: &str) -> TokenId {
        self.token_of.get(token).copied().unwrap_or(self.unk)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_of.contains_key(token)
    }

    pub fn token_str(&self, id: TokenId) -> &str {
        &self.tokens[id.index()]
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.token_id(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token_str(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stable content hash used to detect vocabulary mismatches between
    /// policies and datasets.
    pub fn content_hash(&self) -> u64 {
        fnv64(self.tokens.join("\u{1f}").as_bytes())
    }

    /// Rebuild the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.token_of = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId(i as u32)))
            .collect();
    }
}

/// Build the closed vocabulary over everything [`verbalize`] and
/// [`propose_question`] can emit for this graph and template set: specials,
/// entity label tokens, and all template words.
pub fn build_vocabulary(graph: &KnowledgeGraph, templates: &TemplateSet) -> Vocabulary {
    let mut tokens: Vec<String> = vec![BOS_TOKEN.into(), EOS_TOKEN.into(), UNK_TOKEN.into()];
    let mut seen: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
    let mut push = |tok: String| {
        if seen.insert(tok.clone(), ()).is_none() {
            tokens.push(tok);
        }
    };
    for (_, e) in graph.entities() {
        for tok in tokenize(&e.label) {
            push(tok);
        }
    }
    for (_, t) in templates.iter() {
        for tok in tokenize(&t.statement)
            .into_iter()
            .chain(tokenize(&t.question))
        {
            if tok != SUBJ_PLACEHOLDER && tok != OBJ_PLACEHOLDER {
                push(tok);
            }
        }
    }
    Vocabulary::from_token_list(tokens)
}

// ── Episodes ─────────────────────────────────────────────────────────────

/// One verbalized reasoning step: its tokens plus the entity-action mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub tokens: Vec<TokenId>,
    /// `true` exactly on the subject/object entity-mention tokens.
    pub action_mask: Vec<bool>,
}

/// A tokenized episode: question prefix, one step per hop, and the entity
/// that answers the question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbalizedEpisode {
    pub question: Vec<TokenId>,
    pub steps: Vec<Step>,
    pub answer: EntityId,
    pub source: Option<Trajectory>,
}

/// Position of one step token within its episode, with enough context to
/// rebuild the token's conditioning state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenEvent {
    pub step: usize,
    pub index_in_step: usize,
    pub masked: bool,
    pub token: TokenId,
    /// Length of the state prefix in [`VerbalizedEpisode::flat_tokens`]
    /// preceding this token.
    pub state_len: usize,
}

impl VerbalizedEpisode {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// Question tokens followed by every step's tokens in order.
    pub fn flat_tokens(&self) -> Vec<TokenId> {
        let mut out = self.question.clone();
        for s in &self.steps {
            out.extend_from_slice(&s.tokens);
        }
        out
    }

    /// One event per step token, in generation order. Question tokens are
    /// conditioning context only and never appear as events.
    pub fn events(&self) -> Vec<TokenEvent> {
        let mut out = Vec::new();
        let mut state_len = self.question.len();
        for (si, s) in self.steps.iter().enumerate() {
            for (ti, (&token, &masked)) in s.tokens.iter().zip(&s.action_mask).enumerate() {
                out.push(TokenEvent {
                    step: si,
                    index_in_step: ti,
                    masked,
                    token,
                    state_len,
                });
                state_len += 1;
            }
        }
        out
    }
}

fn entity_tokens(graph: &KnowledgeGraph, vocab: &Vocabulary, entity: EntityId) -> Vec<TokenId> {
    vocab.encode(&graph.entity(entity).label)
}

/// Render one trajectory into reasoning steps (no question).
///
/// Each hop instantiates its relation's statement template; the action mask
/// marks exactly the subject and object label tokens, which decode back to
/// the labels verbatim.
pub fn verbalize(
    trajectory: &Trajectory,
    graph: &KnowledgeGraph,
    templates: &TemplateSet,
    vocab: &Vocabulary,
) -> Result<VerbalizedEpisode, VerbalError> {
    trajectory
        .validate_against(graph)
        .map_err(|e| VerbalError::InvalidTrajectory(e.to_string()))?;

    let mut steps = Vec::with_capacity(trajectory.hop_count());
    let mut subject = trajectory.start;
    for &(relation, object) in &trajectory.hops {
        let template = templates.get(graph, relation)?;
        let mut tokens = Vec::new();
        let mut mask = Vec::new();
        for word in tokenize(&template.statement) {
            if word == SUBJ_PLACEHOLDER {
                for id in entity_tokens(graph, vocab, subject) {
                    tokens.push(id);
                    mask.push(true);
                }
            } else if word == OBJ_PLACEHOLDER {
                for id in entity_tokens(graph, vocab, object) {
                    tokens.push(id);
                    mask.push(true);
                }
            } else {
                tokens.push(vocab.token_id(&word));
                mask.push(false);
            }
        }
        steps.push(Step {
            tokens,
            action_mask: mask,
        });
        subject = object;
    }

    Ok(VerbalizedEpisode {
        question: Vec::new(),
        steps,
        answer: trajectory.final_entity(),
        source: Some(trajectory.clone()),
    })
}

/// Build the question whose designated answer is the trajectory's final
/// entity.
///
/// The first hop instantiates its relation's question template with the start
/// entity; each further hop nests the previous question (with any trailing
/// `?` stripped) into its own template's subject slot. The result names the
/// start entity and every relation phrase on the chain.
pub fn propose_question(
    trajectory: &Trajectory,
    graph: &KnowledgeGraph,
    templates: &TemplateSet,
    vocab: &Vocabulary,
) -> Result<Vec<TokenId>, VerbalError> {
    if trajectory.hop_count() == 0 {
        return Err(VerbalError::EmptyTrajectory);
    }

    let mut subject_words = tokenize(&graph.entity(trajectory.start).label);
    for &(relation, _) in &trajectory.hops {
        let template = templates.get(graph, relation)?;
        let mut words = Vec::new();
        for word in tokenize(&template.question) {
            if word == SUBJ_PLACEHOLDER {
                words.extend(subject_words.iter().cloned());
            } else {
                words.push(word);
            }
        }
        subject_words = words;
        // Strip the inner question mark before nesting into the next hop.
        if subject_words.last().map(String::as_str) == Some("?") {
            subject_words.pop();
        }
    }
    subject_words.push("?".into());
    Ok(subject_words.iter().map(|w| vocab.token_id(w)).collect())
}

/// [`verbalize`] plus [`propose_question`] in one call.
pub fn verbalize_with_question(
    trajectory: &Trajectory,
    graph: &KnowledgeGraph,
    templates: &TemplateSet,
    vocab: &Vocabulary,
) -> Result<VerbalizedEpisode, VerbalError> {
    let mut episode = verbalize(trajectory, graph, templates, vocab)?;
    episode.question = propose_question(trajectory, graph, templates, vocab)?;
    Ok(episode)
}

// ── JSONL persistence ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct StepRecord {
    t: Vec<TokenId>,
    mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    q: Vec<TokenId>,
    steps: Vec<StepRecord>,
    answer: EntityId,
    #[serde(skip_serializing_if = "Option::is_none")]
    traj: Option<Vec<u32>>,
}

impl From<&VerbalizedEpisode> for EpisodeRecord {
    fn from(ep: &VerbalizedEpisode) -> Self {
        Self {
            q: ep.question.clone(),
            steps: ep
                .steps
                .iter()
                .map(|s| StepRecord {
                    t: s.tokens.clone(),
                    mask: s.action_mask.clone(),
                })
                .collect(),
            answer: ep.answer,
            traj: ep.source.as_ref().map(Trajectory::to_flat_ids),
        }
    }
}

impl TryFrom<EpisodeRecord> for VerbalizedEpisode {
    type Error = VerbalError;

    fn try_from(record: EpisodeRecord) -> Result<Self, VerbalError> {
        let steps = record
            .steps
            .into_iter()
            .map(|s| {
                if s.t.len() != s.mask.len() {
                    return Err(VerbalError::MalformedFile(
                        "step mask length does not match tokens".into(),
                    ));
                }
                Ok(Step {
                    tokens: s.t,
                    action_mask: s.mask,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let source = match record.traj {
            Some(flat) => Some(
                Trajectory::from_flat_ids(&flat, None)
                    .map_err(|e| VerbalError::MalformedFile(e.to_string()))?,
            ),
            None => None,
        };
        Ok(Self {
            question: record.q,
            steps,
            answer: record.answer,
            source,
        })
    }
}

/// Write episodes as JSON lines: `{"q": [ids], "steps": [{"t", "mask"}], "answer": id}`.
pub fn save_episodes(path: &Path, episodes: &[VerbalizedEpisode]) -> Result<(), VerbalError> {
    let mut body = String::new();
    for ep in episodes {
        let record = EpisodeRecord::from(ep);
        body.push_str(&serde_json::to_string(&record).expect("episode serializes"));
        body.push('\n');
    }
    fs::write(path, body).map_err(|source| VerbalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_episodes(path: &Path) -> Result<Vec<VerbalizedEpisode>, VerbalError> {
    let text = fs::read_to_string(path).map_err(|source| VerbalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let record: EpisodeRecord = serde_json::from_str(line)
                .map_err(|e| VerbalError::MalformedFile(e.to_string()))?;
            VerbalizedEpisode::try_from(record)
        })
        .collect()
}
