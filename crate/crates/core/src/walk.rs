//! Multi-hop trajectory sampling over the graph's out-edges.
//!
//! The walk policy is uniform over the outgoing edges of the current entity;
//! it is the maximum-entropy choice and keeps the exact-enumeration oracle in
//! [`crate::verify`] closed form. Sampling is pure given `(graph, seed)`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EntityId, GraphError, KnowledgeGraph, RelationId};
use crate::seeding;

/// A sampled chain `(start, (r_1, e_1), …, (r_T, e_T))` with an optional
/// self-consistency reward attached later by [`crate::preference`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: EntityId,
    pub hops: Vec<(RelationId, EntityId)>,
    pub reward: Option<f64>,
}

impl Trajectory {
    pub fn hop_count(&self) -> usize {
        self.hops.len()
    }

    /// Last entity of the chain (the designated answer of its question).
    pub fn final_entity(&self) -> EntityId {
        self.hops.last().map(|&(_, e)| e).unwrap_or(self.start)
    }

    /// Entities in chain order, starting entity first.
    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        std::iter::once(self.start).chain(self.hops.iter().map(|&(_, e)| e))
    }

    /// Check that every consecutive `(e, r, e')` is an edge of `graph`.
    pub fn validate_against(&self, graph: &KnowledgeGraph) -> Result<(), WalkError> {
        if self.start.index() >= graph.entity_count() {
            return Err(WalkError::UnknownEntity(self.start));
        }
        let mut cur = self.start;
        for &(r, e) in &self.hops {
            if !graph.has_edge(cur, r, e) {
                return Err(WalkError::NotAnEdge {
                    head: cur,
                    relation: r,
                    tail: e,
                });
            }
            cur = e;
        }
        if let Some(r) = self.reward {
            if !(0.0..=1.0).contains(&r) {
                return Err(WalkError::RewardOutOfRange(r));
            }
        }
        Ok(())
    }

    /// Flat alternating id list `[e0, r1, e1, …]` used by the JSONL format.
    pub fn to_flat_ids(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(1 + 2 * self.hops.len());
        out.push(self.start.0);
        for &(r, e) in &self.hops {
            out.push(r.0);
            out.push(e.0);
        }
        out
    }

    pub fn from_flat_ids(ids: &[u32], reward: Option<f64>) -> Result<Self, WalkError> {
        if ids.is_empty() || ids.len().is_multiple_of(2) {
            return Err(WalkError::MalformedRecord(
                "flat id list must have odd length >= 1".into(),
            ));
        }
        let start = EntityId(ids[0]);
        let hops = ids[1..]
            .chunks(2)
            .map(|c| (RelationId(c[0]), EntityId(c[1])))
            .collect();
        Ok(Self {
            start,
            hops,
            reward,
        })
    }
}

#[derive(Debug, Error)]
pub enum WalkError {
    #[error("entity {0} does not exist in the graph")]
    UnknownEntity(EntityId),

    #[error("({head}, {relation}, {tail}) is not an edge of the graph")]
    NotAnEdge {
        head: EntityId,
        relation: RelationId,
        tail: EntityId,
    },

    #[error("walk truncated after {} of {wanted} hops", .partial.hop_count())]
    Truncated { partial: Trajectory, wanted: usize },

    #[error("retry budget exhausted after yielding {} of {wanted} walks", .yielded.len())]
    Exhausted {
        yielded: Vec<Trajectory>,
        wanted: usize,
    },

    #[error("reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),

    #[error("invalid hop range: min {min} > max {max}")]
    BadHopRange { min: usize, max: usize },

    #[error("malformed trajectory record: {0}")]
    MalformedRecord(String),

    #[error(transparent)]
    Graph(#[from] GraphError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Inclusive hop-count range for walk sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopRange {
    pub min: usize,
    pub max: usize,
}

impl HopRange {
    pub fn new(min: usize, max: usize) -> Result<Self, WalkError> {
        if min == 0 || min > max {
            return Err(WalkError::BadHopRange { min, max });
        }
        Ok(Self { min, max })
    }
}

/// Knobs shared by the walk samplers.
#[derive(Debug, Clone)]
pub struct WalkOptions {
    /// Exclude already-visited entities from each step's candidate edges.
    pub no_revisit: bool,
    /// Attempts per requested walk before [`WalkError::Exhausted`].
    pub retry_budget: usize,
}

impl Default for WalkOptions {
    fn default() -> Self {
        Self {
            no_revisit: false,
            retry_budget: 50,
        }
    }
}

fn step<R: Rng>(
    graph: &KnowledgeGraph,
    cur: EntityId,
    visited: Option<&[EntityId]>,
    rng: &mut R,
) -> Option<(RelationId, EntityId)> {
    let out = graph.out_edges(cur);
    match visited {
        None => {
            if out.is_empty() {
                None
            } else {
                Some(out[rng.random_range(0..out.len())])
            }
        }
        Some(seen) => {
            let candidates: Vec<(RelationId, EntityId)> = out
                .iter()
                .copied()
                .filter(|(_, e)| !seen.contains(e))
                .collect();
            if candidates.is_empty() {
                None
            } else {
                Some(candidates[rng.random_range(0..candidates.len())])
            }
        }
    }
}

/// Sample one walk of exactly `hops` hops starting at `start`, drawing each
/// transition uniformly from the current entity's out-edges.
///
/// Reaching an entity with no usable out-edge before `hops` returns
/// [`WalkError::Truncated`] carrying the partial trajectory.
pub fn sample_walk(
    graph: &KnowledgeGraph,
    start: EntityId,
    hops: usize,
    rng_seed: u64,
) -> Result<Trajectory, WalkError> {
    sample_walk_with(graph, start, hops, rng_seed, &WalkOptions::default())
}

pub fn sample_walk_with(
    graph: &KnowledgeGraph,
    start: EntityId,
    hops: usize,
    rng_seed: u64,
    options: &WalkOptions,
) -> Result<Trajectory, WalkError> {
    if start.index() >= graph.entity_count() {
        return Err(WalkError::UnknownEntity(start));
    }
    let mut rng = seeding::rng_for(rng_seed, "walk", 0);
    let mut traj = Trajectory {
        start,
        hops: Vec::with_capacity(hops),
        reward: None,
    };
    let mut visited = vec![start];
    let mut cur = start;
    for _ in 0..hops {
        let seen = options.no_revisit.then_some(visited.as_slice());
        match step(graph, cur, seen, &mut rng) {
            Some((r, e)) => {
                traj.hops.push((r, e));
                visited.push(e);
                cur = e;
            }
            None => {
                return Err(WalkError::Truncated {
                    partial: traj,
                    wanted: hops,
                })
            }
        }
    }
    Ok(traj)
}

/// Sample exactly `count` complete walks.
///
/// Hop counts are drawn uniformly from `hop_range` per walk and start
/// entities uniformly over entities with out-degree >= 1. Truncated walks are
/// retried with fresh derived seeds up to `options.retry_budget` attempts per
/// walk; exhaustion returns the walks sampled so far inside the error.
pub fn sample_walk_set(
    graph: &KnowledgeGraph,
    count: usize,
    hop_range: HopRange,
    rng_seed: u64,
) -> Result<Vec<Trajectory>, WalkError> {
    sample_walk_set_with(graph, count, hop_range, rng_seed, &WalkOptions::default())
}

pub fn sample_walk_set_with(
    graph: &KnowledgeGraph,
    count: usize,
    hop_range: HopRange,
    rng_seed: u64,
    options: &WalkOptions,
) -> Result<Vec<Trajectory>, WalkError> {
    HopRange::new(hop_range.min, hop_range.max)?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let starts = graph.non_sink_entities();
    if starts.is_empty() {
        return Err(WalkError::Exhausted {
            yielded: Vec::new(),
            wanted: count,
        });
    }

    let mut walks = Vec::with_capacity(count);
    for i in 0..count {
        let mut done = false;
        for attempt in 0..options.retry_budget {
            let mut pick_rng = seeding::rng_for(
                rng_seed,
                "walk-set",
                (i * options.retry_budget + attempt) as u64,
            );
            let start = starts[pick_rng.random_range(0..starts.len())];
            let hops = pick_rng.random_range(hop_range.min..=hop_range.max);
            let walk_seed = seeding::derive_seed(
                rng_seed,
                "walk-set-walk",
                (i * options.retry_budget + attempt) as u64,
            );
            match sample_walk_with(graph, start, hops, walk_seed, options) {
                Ok(t) => {
                    walks.push(t);
                    done = true;
                    break;
                }
                Err(WalkError::Truncated { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        if !done {
            return Err(WalkError::Exhausted {
                yielded: walks,
                wanted: count,
            });
        }
    }
    Ok(walks)
}

// ── JSONL persistence ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    steps: Vec<u32>,
    hops: usize,
    reward: Option<f64>,
}

/// Write a trajectory set as JSON lines: `{"steps": [ids…], "hops": T, "reward": null|r}`.
pub fn save_walks(path: &Path, walks: &[Trajectory]) -> Result<(), WalkError> {
    let mut body = String::new();
    for w in walks {
        let record = TrajectoryRecord {
            steps: w.to_flat_ids(),
            hops: w.hop_count(),
            reward: w.reward,
        };
        body.push_str(&serde_json::to_string(&record).expect("trajectory serializes"));
        body.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|source| WalkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(body.as_bytes())
        .map_err(|source| WalkError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub fn load_walks(path: &Path) -> Result<Vec<Trajectory>, WalkError> {
    let f = fs::File::open(path).map_err(|source| WalkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| WalkError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| WalkError::MalformedRecord(format!("line {}: {e}", lineno + 1)))?;
        let traj = Trajectory::from_flat_ids(&record.steps, record.reward)?;
        if traj.hop_count() != record.hops {
            return Err(WalkError::MalformedRecord(format!(
                "line {}: hop count {} does not match steps",
                lineno + 1,
                record.hops
            )));
        }
        out.push(traj);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EntityRecord, RelationRecord};

    /// a -> b -> c chain with a single relation.
    fn chain_graph() -> KnowledgeGraph {
        KnowledgeGraph::from_parts(
            vec![
                EntityRecord {
                    ext_id: "a".into(),
                    label: "a".into(),
                },
                EntityRecord {
                    ext_id: "b".into(),
                    label: "b".into(),
                },
                EntityRecord {
                    ext_id: "c".into(),
                    label: "c".into(),
                },
            ],
            vec![RelationRecord {
                ext_id: "r".into(),
                label: "r".into(),
            }],
            vec![
                (EntityId(0), RelationId(0), EntityId(1)),
                (EntityId(1), RelationId(0), EntityId(2)),
            ],
        )
        .unwrap()
    }

    /// Strongly connected 4-cycle with two relations per entity.
    fn cycle_graph() -> KnowledgeGraph {
        let entities = (0..4)
            .map(|i| EntityRecord {
                ext_id: format!("n{i}"),
                label: format!("n{i}"),
            })
            .collect();
        let relations = vec![
            RelationRecord {
                ext_id: "next".into(),
                label: "next".into(),
            },
            RelationRecord {
                ext_id: "skip".into(),
                label: "skip".into(),
            },
        ];
        let mut edges = Vec::new();
        for i in 0u32..4 {
            edges.push((EntityId(i), RelationId(0), EntityId((i + 1) % 4)));
            edges.push((EntityId(i), RelationId(1), EntityId((i + 2) % 4)));
        }
        KnowledgeGraph::from_parts(entities, relations, edges).unwrap()
    }

    #[test]
    fn forced_path_on_chain() {
        let g = chain_graph();
        let t = sample_walk(&g, EntityId(0), 2, 1).unwrap();
        assert_eq!(t.start, EntityId(0));
        assert_eq!(
            t.hops,
            vec![(RelationId(0), EntityId(1)), (RelationId(0), EntityId(2))]
        );
        t.validate_against(&g).unwrap();
    }

    #[test]
    fn sink_start_truncates_with_empty_partial() {
        let g = chain_graph();
        let err = sample_walk(&g, EntityId(2), 1, 1).unwrap_err();
        match err {
            WalkError::Truncated { partial, wanted } => {
                assert_eq!(partial.hop_count(), 0);
                assert_eq!(wanted, 1);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn first_hop_distribution_is_uniform() {
        // Entity with 3 out-edges; 30000 first hops should each land within
        // ±0.02 of 1/3.
        let entities = (0..4)
            .map(|i| EntityRecord {
                ext_id: format!("n{i}"),
                label: format!("n{i}"),
            })
            .collect();
        let relations = vec![RelationRecord {
            ext_id: "r".into(),
            label: "r".into(),
        }];
        let edges = vec![
            (EntityId(0), RelationId(0), EntityId(1)),
            (EntityId(0), RelationId(0), EntityId(2)),
            (EntityId(0), RelationId(0), EntityId(3)),
            (EntityId(1), RelationId(0), EntityId(0)),
            (EntityId(2), RelationId(0), EntityId(0)),
            (EntityId(3), RelationId(0), EntityId(0)),
        ];
        let g = KnowledgeGraph::from_parts(entities, relations, edges).unwrap();
        let n = 30_000;
        let mut counts = [0u32; 4];
        for i in 0..n {
            let t = sample_walk(&g, EntityId(0), 1, 1000 + i).unwrap();
            counts[t.hops[0].1.index()] += 1;
        }
        for &c in &counts[1..4] {
            let freq = f64::from(c) / n as f64;
            assert!(
                (freq - 1.0 / 3.0).abs() < 0.02,
                "frequency {freq} deviates from 1/3"
            );
        }
    }

    #[test]
    fn walk_set_empty_count() {
        let g = cycle_graph();
        let walks = sample_walk_set(&g, 0, HopRange { min: 2, max: 4 }, 3).unwrap();
        assert!(walks.is_empty());
    }

    #[test]
    fn walk_set_contract() {
        let g = cycle_graph();
        let walks = sample_walk_set(&g, 100, HopRange { min: 2, max: 4 }, 3).unwrap();
        assert_eq!(walks.len(), 100);
        for w in &walks {
            assert!((2..=4).contains(&w.hop_count()));
            w.validate_against(&g).unwrap();
        }
    }

    #[test]
    fn walk_set_deterministic() {
        let g = cycle_graph();
        let a = sample_walk_set(&g, 50, HopRange { min: 2, max: 4 }, 9).unwrap();
        let b = sample_walk_set(&g, 50, HopRange { min: 2, max: 4 }, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_revisit_excludes_seen_entities() {
        let g = cycle_graph();
        let options = WalkOptions {
            no_revisit: true,
            ..WalkOptions::default()
        };
        let mut completed = 0;
        for seed in 0..20 {
            // Dead-ending is legitimate under no_revisit; whatever part was
            // produced must still be revisit-free.
            let t = match sample_walk_with(&g, EntityId(0), 3, seed, &options) {
                Ok(t) => {
                    completed += 1;
                    t
                }
                Err(WalkError::Truncated { partial, .. }) => partial,
                Err(e) => panic!("unexpected error {e:?}"),
            };
            let mut seen = vec![t.start];
            for &(_, e) in &t.hops {
                assert!(!seen.contains(&e), "revisited {e}");
                seen.push(e);
            }
        }
        assert!(completed > 0, "every seed dead-ended");
    }

    #[test]
    fn walks_round_trip_through_jsonl() {
        let g = cycle_graph();
        let mut walks = sample_walk_set(&g, 20, HopRange { min: 2, max: 4 }, 5).unwrap();
        walks[0].reward = Some(0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("walks.jsonl");
        save_walks(&path, &walks).unwrap();
        let loaded = load_walks(&path).unwrap();
        assert_eq!(walks, loaded);
    }
}
