//! Directed labeled knowledge graph: storage, TSV ingestion, synthetic
//! generation, and frequency statistics over trajectory sets.
//!
//! External ids (e.g. `Q42`, `P31`) are interned to dense indices at load
//! time; surface labels are kept for verbalization. The graph is immutable
//! after construction and safe to share across threads.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::walk::Trajectory;

/// Dense entity index, assigned in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

/// Dense relation index, assigned in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unresolved ids: {0:?}")]
    Integrity(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A declared entity: external id plus surface label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub ext_id: String,
    pub label: String,
}

/// A declared relation: external id plus surface label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub ext_id: String,
    pub label: String,
}

/// Immutable directed labeled graph with an outgoing-edge adjacency index.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    entities: Vec<EntityRecord>,
    relations: Vec<RelationRecord>,
    /// Sorted, duplicate-free `(head, relation, tail)` triples.
    edges: Vec<(EntityId, RelationId, EntityId)>,
    /// Per-entity outgoing `(relation, tail)` pairs, sorted, duplicate-free.
    out_index: Vec<Vec<(RelationId, EntityId)>>,
    entity_by_ext: HashMap<String, EntityId>,
    relation_by_ext: HashMap<String, RelationId>,
}

impl KnowledgeGraph {
    /// Build a graph from declared records and raw edges.
    ///
    /// Edges are deduplicated and sorted; every id must be in range and all
    /// labels non-empty and unique within their namespace.
    pub fn from_parts(
        entities: Vec<EntityRecord>,
        relations: Vec<RelationRecord>,
        mut edges: Vec<(EntityId, RelationId, EntityId)>,
    ) -> Result<Self, GraphError> {
        let mut seen = HashMap::new();
        for (i, e) in entities.iter().enumerate() {
            if e.label.trim().is_empty() || e.ext_id.trim().is_empty() {
                return Err(GraphError::InvalidArgument(format!(
                    "entity {i} has an empty id or label"
                )));
            }
            if seen.insert(&e.ext_id, i).is_some() {
                return Err(GraphError::InvalidArgument(format!(
                    "duplicate entity id {}",
                    e.ext_id
                )));
            }
        }
        let mut seen = HashMap::new();
        for (i, r) in relations.iter().enumerate() {
            if r.label.trim().is_empty() || r.ext_id.trim().is_empty() {
                return Err(GraphError::InvalidArgument(format!(
                    "relation {i} has an empty id or label"
                )));
            }
            if seen.insert(&r.ext_id, i).is_some() {
                return Err(GraphError::InvalidArgument(format!(
                    "duplicate relation id {}",
                    r.ext_id
                )));
            }
        }

        let mut offenders = Vec::new();
        for (h, r, t) in &edges {
            if h.index() >= entities.len() || t.index() >= entities.len() {
                offenders.push(format!("entity index out of range in ({h}, {r}, {t})"));
            }
            if r.index() >= relations.len() {
                offenders.push(format!("relation index out of range in ({h}, {r}, {t})"));
            }
        }
        if !offenders.is_empty() {
            return Err(GraphError::Integrity(offenders));
        }

        edges.sort_unstable();
        edges.dedup();

        let mut out_index = vec![Vec::new(); entities.len()];
        for &(h, r, t) in &edges {
            out_index[h.index()].push((r, t));
        }
        for out in &mut out_index {
            out.sort_unstable();
        }

        let entity_by_ext = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.ext_id.clone(), EntityId(i as u32)))
            .collect();
        let relation_by_ext = relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.ext_id.clone(), RelationId(i as u32)))
            .collect();

        Ok(Self {
            entities,
            relations,
            edges,
            out_index,
            entity_by_ext,
            relation_by_ext,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn entity(&self, id: EntityId) -> &EntityRecord {
        &self.entities[id.index()]
    }

    pub fn relation(&self, id: RelationId) -> &RelationRecord {
        &self.relations[id.index()]
    }

    pub fn entities(&self) -> impl Iterator<Item = (EntityId, &EntityRecord)> {
        self.entities
            .iter()
            .enumerate()
            .map(|(i, e)| (EntityId(i as u32), e))
    }

    pub fn relations(&self) -> impl Iterator<Item = (RelationId, &RelationRecord)> {
        self.relations
            .iter()
            .enumerate()
            .map(|(i, r)| (RelationId(i as u32), r))
    }

    pub fn edges(&self) -> &[(EntityId, RelationId, EntityId)] {
        &self.edges
    }

    pub fn entity_by_ext(&self, ext_id: &str) -> Option<EntityId> {
        self.entity_by_ext.get(ext_id).copied()
    }

    pub fn relation_by_ext(&self, ext_id: &str) -> Option<RelationId> {
        self.relation_by_ext.get(ext_id).copied()
    }

    /// Outgoing `(relation, tail)` pairs of `e`, sorted and duplicate-free.
    pub fn out_edges(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.out_index[e.index()]
    }

    pub fn has_edge(&self, h: EntityId, r: RelationId, t: EntityId) -> bool {
        self.edges.binary_search(&(h, r, t)).is_ok()
    }

    /// Tails reachable from `h` via `r`.
    pub fn targets(&self, h: EntityId, r: RelationId) -> Vec<EntityId> {
        self.out_edges(h)
            .iter()
            .filter(|(rel, _)| *rel == r)
            .map(|&(_, t)| t)
            .collect()
    }

    /// Entities with at least one outgoing edge, in index order.
    pub fn non_sink_entities(&self) -> Vec<EntityId> {
        self.out_index
            .iter()
            .enumerate()
            .filter(|(_, out)| !out.is_empty())
            .map(|(i, _)| EntityId(i as u32))
            .collect()
    }
}

// ── TSV ingestion ────────────────────────────────────────────────────────

/// Counters emitted by [`load_triples`]; serialized as the load report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadReport {
    pub entities: usize,
    pub relations: usize,
    pub edges: usize,
    /// Duplicate triples dropped silently during the load.
    pub duplicate_edges: usize,
    /// Label rows whose id had already been declared (first label wins).
    pub duplicate_labels: usize,
}

/// A loaded graph together with its load report.
#[derive(Debug, Clone)]
pub struct LoadOutcome {
    pub graph: KnowledgeGraph,
    pub report: LoadReport,
}

fn read_file(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parse a tab-separated label file: `id<TAB>label[<TAB>alias…]`.
///
/// The first label wins on repeated ids; aliases beyond the first label are
/// ignored. Blank lines are skipped. Internal whitespace in labels is
/// collapsed to single spaces so decoded token spans reproduce labels
/// verbatim.
fn parse_label_file(path: &Path) -> Result<(Vec<(String, String)>, usize), GraphError> {
    let text = read_file(path)?;
    let mut out: Vec<(String, String)> = Vec::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    let mut duplicates = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or("").trim();
        let label = cols.next().map(str::trim).unwrap_or("");
        if id.is_empty() || label.is_empty() {
            return Err(GraphError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: "expected id<TAB>label".into(),
            });
        }
        if seen.insert(id.to_string(), ()).is_some() {
            duplicates += 1;
            continue;
        }
        let label = label.split_whitespace().collect::<Vec<_>>().join(" ");
        out.push((id.to_string(), label));
    }
    Ok((out, duplicates))
}

/// Load a graph from Wikidata5M-style TSV files.
///
/// The triple file holds `head_id<TAB>relation_id<TAB>tail_id` rows; the two
/// label files declare the entity and relation namespaces. Triples that
/// reference undeclared ids fail the load with the full offender list.
pub fn load_triples(
    triples_path: &Path,
    entity_labels_path: &Path,
    relation_labels_path: &Path,
) -> Result<LoadOutcome, GraphError> {
    let (entity_rows, dup_ent) = parse_label_file(entity_labels_path)?;
    let (relation_rows, dup_rel) = parse_label_file(relation_labels_path)?;

    let entities: Vec<EntityRecord> = entity_rows
        .into_iter()
        .map(|(ext_id, label)| EntityRecord { ext_id, label })
        .collect();
    let relations: Vec<RelationRecord> = relation_rows
        .into_iter()
        .map(|(ext_id, label)| RelationRecord { ext_id, label })
        .collect();

    let entity_ids: HashMap<&str, EntityId> = entities
        .iter()
        .enumerate()
        .map(|(i, e)| (e.ext_id.as_str(), EntityId(i as u32)))
        .collect();
    let relation_ids: HashMap<&str, RelationId> = relations
        .iter()
        .enumerate()
        .map(|(i, r)| (r.ext_id.as_str(), RelationId(i as u32)))
        .collect();

    let text = read_file(triples_path)?;
    let mut edges = Vec::new();
    let mut offenders = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
            return Err(GraphError::Parse {
                path: triples_path.display().to_string(),
                line: lineno + 1,
                message: format!(
                    "expected head<TAB>relation<TAB>tail, got {} fields",
                    cols.len()
                ),
            });
        }
        let head = entity_ids.get(cols[0]).copied();
        let rel = relation_ids.get(cols[1]).copied();
        let tail = entity_ids.get(cols[2]).copied();
        match (head, rel, tail) {
            (Some(h), Some(r), Some(t)) => edges.push((h, r, t)),
            _ => {
                if head.is_none() {
                    offenders.push(format!("line {}: entity {}", lineno + 1, cols[0]));
                }
                if rel.is_none() {
                    offenders.push(format!("line {}: relation {}", lineno + 1, cols[1]));
                }
                if tail.is_none() {
                    offenders.push(format!("line {}: entity {}", lineno + 1, cols[2]));
                }
            }
        }
    }
    if !offenders.is_empty() {
        return Err(GraphError::Integrity(offenders));
    }

    let raw_count = edges.len();
    let graph = KnowledgeGraph::from_parts(entities, relations, edges)?;
    let report = LoadReport {
        entities: graph.entity_count(),
        relations: graph.relation_count(),
        edges: graph.edge_count(),
        duplicate_edges: raw_count - graph.edge_count(),
        duplicate_labels: dup_ent + dup_rel,
    };
    Ok(LoadOutcome { graph, report })
}

/// Write the graph back to the three TSV files loaded by [`load_triples`].
///
/// Rows are emitted in canonical (sorted) order, so `load ∘ save` is the
/// identity on graphs.
pub fn save_triples(
    graph: &KnowledgeGraph,
    triples_path: &Path,
    entity_labels_path: &Path,
    relation_labels_path: &Path,
) -> Result<(), GraphError> {
    let write = |path: &Path, body: String| -> Result<(), GraphError> {
        let mut f = fs::File::create(path).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(body.as_bytes())
            .map_err(|source| GraphError::Io {
                path: path.display().to_string(),
                source,
            })
    };

    let mut body = String::new();
    for (_, e) in graph.entities() {
        body.push_str(&format!("{}\t{}\n", e.ext_id, e.label));
    }
    write(entity_labels_path, body)?;

    let mut body = String::new();
    for (_, r) in graph.relations() {
        body.push_str(&format!("{}\t{}\n", r.ext_id, r.label));
    }
    write(relation_labels_path, body)?;

    let mut body = String::new();
    for &(h, r, t) in graph.edges() {
        body.push_str(&format!(
            "{}\t{}\t{}\n",
            graph.entity(h).ext_id,
            graph.relation(r).ext_id,
            graph.entity(t).ext_id
        ));
    }
    write(triples_path, body)
}

// ── Synthetic generation ─────────────────────────────────────────────────

/// Parameters for [`generate_synthetic`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub entities: usize,
    pub relations: usize,
    pub edges_per_entity: usize,
    /// Power-law exponent over relation indices; 0 draws relations uniformly.
    pub relation_skew: f64,
    pub seed: u64,
}

/// Generate a random graph where every entity has `edges_per_entity`
/// distinct outgoing edges and relation choice follows Zipf-like weights
/// `(i + 1)^-skew` over relation indices.
///
/// Deterministic given the seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<KnowledgeGraph, GraphError> {
    if spec.entities == 0 {
        return Err(GraphError::InvalidArgument(
            "entities must be positive".into(),
        ));
    }
    if spec.relations == 0 {
        return Err(GraphError::InvalidArgument(
            "relations must be positive".into(),
        ));
    }
    if spec.edges_per_entity == 0 {
        return Err(GraphError::InvalidArgument(
            "edges_per_entity must be positive".into(),
        ));
    }
    if spec.relation_skew.is_nan() || spec.relation_skew < 0.0 {
        return Err(GraphError::InvalidArgument(
            "relation_skew must be non-negative".into(),
        ));
    }
    let max_out = spec.relations * spec.entities;
    if spec.edges_per_entity > max_out {
        return Err(GraphError::InvalidArgument(format!(
            "edges_per_entity {} exceeds the {} distinct (relation, tail) pairs available",
            spec.edges_per_entity, max_out
        )));
    }

    let entities: Vec<EntityRecord> = (0..spec.entities)
        .map(|i| EntityRecord {
            ext_id: format!("e{i}"),
            label: format!("e{i}"),
        })
        .collect();
    let relations: Vec<RelationRecord> = (0..spec.relations)
        .map(|i| RelationRecord {
            ext_id: format!("r{i}"),
            label: format!("r{i}"),
        })
        .collect();

    let weights: Vec<f64> = (0..spec.relations)
        .map(|i| ((i + 1) as f64).powf(-spec.relation_skew))
        .collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let mut rng = crate::seeding::rng_for(spec.seed, "synthetic-graph", 0);
    let mut edges = Vec::with_capacity(spec.entities * spec.edges_per_entity);
    let mut used: std::collections::HashSet<(u32, u32, u32)> = std::collections::HashSet::new();
    for h in 0..spec.entities {
        for _ in 0..spec.edges_per_entity {
            // Rejection loop over (relation, tail); guaranteed to terminate
            // because edges_per_entity <= relations * entities.
            loop {
                let r = crate::numeric::sample_categorical(&probs, &mut rng);
                let t = rand::Rng::random_range(&mut rng, 0..spec.entities);
                if used.insert((h as u32, r as u32, t as u32)) {
                    edges.push((EntityId(h as u32), RelationId(r as u32), EntityId(t as u32)));
                    break;
                }
            }
        }
    }

    KnowledgeGraph::from_parts(entities, relations, edges)
}

// ── Frequency statistics ─────────────────────────────────────────────────

/// Occurrence counts and top-decile concentration shares over a trajectory
/// set (or over the graph's own edges, see [`edge_stats`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphStats {
    pub relation_frequencies: BTreeMap<RelationId, u64>,
    pub entity_frequencies: BTreeMap<EntityId, u64>,
    /// Share of all relation occurrences held by the top 10% of relations.
    pub top_decile_share_relations: f64,
    /// Share of all entity occurrences held by the top 10% of entities.
    pub top_decile_share_entities: f64,
}

/// Fraction of total mass captured by the `ceil(n/10)` most frequent items
/// out of `namespace_size` declared items. Zero when nothing was counted.
fn top_decile_share(counts: &BTreeMap<u32, u64>, namespace_size: usize) -> f64 {
    let total: u64 = counts.values().sum();
    if total == 0 || namespace_size == 0 {
        return 0.0;
    }
    let k = namespace_size.div_ceil(10);
    let mut sorted: Vec<u64> = counts.values().copied().collect();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let top: u64 = sorted.iter().take(k).sum();
    top as f64 / total as f64
}

/// Count relation and entity occurrences across a trajectory set.
///
/// Every trajectory id must resolve in `graph`; the start entity and each
/// hop's relation and tail all count as one occurrence.
pub fn trajectory_stats(
    graph: &KnowledgeGraph,
    trajectories: &[Trajectory],
) -> Result<GraphStats, GraphError> {
    let mut rel_counts: BTreeMap<u32, u64> = BTreeMap::new();
    let mut ent_counts: BTreeMap<u32, u64> = BTreeMap::new();
    let mut offenders = Vec::new();

    for (i, traj) in trajectories.iter().enumerate() {
        if traj.start.index() >= graph.entity_count() {
            offenders.push(format!("trajectory {i}: entity {}", traj.start));
            continue;
        }
        *ent_counts.entry(traj.start.0).or_default() += 1;
        for &(r, e) in &traj.hops {
            if r.index() >= graph.relation_count() {
                offenders.push(format!("trajectory {i}: relation {r}"));
                continue;
            }
            if e.index() >= graph.entity_count() {
                offenders.push(format!("trajectory {i}: entity {e}"));
                continue;
            }
            *rel_counts.entry(r.0).or_default() += 1;
            *ent_counts.entry(e.0).or_default() += 1;
        }
    }
    if !offenders.is_empty() {
        return Err(GraphError::Integrity(offenders));
    }

    Ok(GraphStats {
        top_decile_share_relations: top_decile_share(&rel_counts, graph.relation_count()),
        top_decile_share_entities: top_decile_share(&ent_counts, graph.entity_count()),
        relation_frequencies: rel_counts
            .into_iter()
            .map(|(k, v)| (RelationId(k), v))
            .collect(),
        entity_frequencies: ent_counts
            .into_iter()
            .map(|(k, v)| (EntityId(k), v))
            .collect(),
    })
}

/// Same statistics computed over the graph's own edge set, counting each
/// edge's relation once and both endpoints once.
pub fn edge_stats(graph: &KnowledgeGraph) -> GraphStats {
    let mut rel_counts: BTreeMap<u32, u64> = BTreeMap::new();
    let mut ent_counts: BTreeMap<u32, u64> = BTreeMap::new();
    for &(h, r, t) in graph.edges() {
        *rel_counts.entry(r.0).or_default() += 1;
        *ent_counts.entry(h.0).or_default() += 1;
        *ent_counts.entry(t.0).or_default() += 1;
    }
    GraphStats {
        top_decile_share_relations: top_decile_share(&rel_counts, graph.relation_count()),
        top_decile_share_entities: top_decile_share(&ent_counts, graph.entity_count()),
        relation_frequencies: rel_counts
            .into_iter()
            .map(|(k, v)| (RelationId(k), v))
            .collect(),
        entity_frequencies: ent_counts
            .into_iter()
            .map(|(k, v)| (EntityId(k), v))
            .collect(),
    }
}

/// Stats report with external string ids, for JSON output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub relation_frequencies: BTreeMap<String, u64>,
    pub entity_frequencies: BTreeMap<String, u64>,
    pub top_decile_share_relations: f64,
    pub top_decile_share_entities: f64,
}

impl StatsReport {
    pub fn new(graph: &KnowledgeGraph, stats: &GraphStats) -> Self {
        Self {
            relation_frequencies: stats
                .relation_frequencies
                .iter()
                .map(|(&r, &c)| (graph.relation(r).ext_id.clone(), c))
                .collect(),
            entity_frequencies: stats
                .entity_frequencies
                .iter()
                .map(|(&e, &c)| (graph.entity(e).ext_id.clone(), c))
                .collect(),
            top_decile_share_relations: stats.top_decile_share_relations,
            top_decile_share_entities: stats.top_decile_share_entities,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn toy_files(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
        let triples = write_tmp(dir, "triples.tsv", "Q1\tP1\tQ2\nQ2\tP1\tQ3\nQ1\tP2\tQ3\n");
        let ents = write_tmp(dir, "entities.tsv", "Q1\talpha\nQ2\tbeta\nQ3\tgamma\n");
        let rels = write_tmp(dir, "relations.tsv", "P1\tnext\nP2\tskip\n");
        (triples, ents, rels)
    }

    #[test]
    fn load_toy_graph() {
        let dir = tempfile::tempdir().unwrap();
        let (t, e, r) = toy_files(dir.path());
        let out = load_triples(&t, &e, &r).unwrap();
        assert_eq!(out.graph.entity_count(), 3);
        assert_eq!(out.graph.relation_count(), 2);
        assert_eq!(out.graph.edge_count(), 3);
        let q1 = out.graph.entity_by_ext("Q1").unwrap();
        assert_eq!(out.graph.out_edges(q1).len(), 2);
        assert_eq!(out.report.duplicate_edges, 0);
    }

    #[test]
    fn load_empty_triple_file() {
        let dir = tempfile::tempdir().unwrap();
        let triples = write_tmp(dir.path(), "triples.tsv", "");
        let ents = write_tmp(dir.path(), "entities.tsv", "Q1\talpha\n");
        let rels = write_tmp(dir.path(), "relations.tsv", "P1\tnext\n");
        let out = load_triples(&triples, &ents, &rels).unwrap();
        assert_eq!(out.graph.edge_count(), 0);
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let triples = write_tmp(dir.path(), "triples.tsv", "Q1\tP1\n");
        let ents = write_tmp(dir.path(), "entities.tsv", "Q1\talpha\n");
        let rels = write_tmp(dir.path(), "relations.tsv", "P1\tnext\n");
        let err = load_triples(&triples, &ents, &rels).unwrap_err();
        match err {
            GraphError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn undeclared_id_lists_offenders() {
        let dir = tempfile::tempdir().unwrap();
        let triples = write_tmp(dir.path(), "triples.tsv", "Q1\tP9\tQ2\n");
        let ents = write_tmp(dir.path(), "entities.tsv", "Q1\talpha\nQ2\tbeta\n");
        let rels = write_tmp(dir.path(), "relations.tsv", "P1\tnext\n");
        let err = load_triples(&triples, &ents, &rels).unwrap_err();
        match err {
            GraphError::Integrity(offenders) => {
                assert!(offenders.iter().any(|o| o.contains("P9")));
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_triples_deduplicated_with_count() {
        let dir = tempfile::tempdir().unwrap();
        let triples = write_tmp(dir.path(), "triples.tsv", "Q1\tP1\tQ2\nQ1\tP1\tQ2\n");
        let ents = write_tmp(dir.path(), "entities.tsv", "Q1\talpha\nQ2\tbeta\n");
        let rels = write_tmp(dir.path(), "relations.tsv", "P1\tnext\n");
        let out = load_triples(&triples, &ents, &rels).unwrap();
        assert_eq!(out.graph.edge_count(), 1);
        assert_eq!(out.report.duplicate_edges, 1);
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (t, e, r) = toy_files(dir.path());
        let original = load_triples(&t, &e, &r).unwrap().graph;
        let t2 = dir.path().join("t2.tsv");
        let e2 = dir.path().join("e2.tsv");
        let r2 = dir.path().join("r2.tsv");
        save_triples(&original, &t2, &e2, &r2).unwrap();
        let reloaded = load_triples(&t2, &e2, &r2).unwrap().graph;
        assert_eq!(original, reloaded);
    }

    #[test]
    fn out_index_matches_edges() {
        let dir = tempfile::tempdir().unwrap();
        let (t, e, r) = toy_files(dir.path());
        let graph = load_triples(&t, &e, &r).unwrap().graph;
        for (eid, _) in graph.entities() {
            for &(rel, tail) in graph.out_edges(eid) {
                assert!(graph.has_edge(eid, rel, tail));
            }
            let count = graph.edges().iter().filter(|&&(h, _, _)| h == eid).count();
            assert_eq!(graph.out_edges(eid).len(), count);
        }
    }

    #[test]
    fn synthetic_contract_and_determinism() {
        let spec = SyntheticSpec {
            entities: 5,
            relations: 2,
            edges_per_entity: 1,
            relation_skew: 0.0,
            seed: 7,
        };
        let g1 = generate_synthetic(&spec).unwrap();
        let g2 = generate_synthetic(&spec).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1.edge_count(), 5);
        for (e, _) in g1.entities() {
            assert!(!g1.out_edges(e).is_empty());
        }
    }

    #[test]
    fn synthetic_rejects_zero_entities() {
        let spec = SyntheticSpec {
            entities: 0,
            relations: 1,
            edges_per_entity: 1,
            relation_skew: 0.0,
            seed: 1,
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn skewed_relations_concentrate_above_uniform_baseline() {
        let spec = SyntheticSpec {
            entities: 1000,
            relations: 20,
            edges_per_entity: 3,
            relation_skew: 1.5,
            seed: 1,
        };
        let graph = generate_synthetic(&spec).unwrap();
        let stats = edge_stats(&graph);
        assert!(
            stats.top_decile_share_relations > 0.1,
            "top decile share {} not above uniform baseline",
            stats.top_decile_share_relations
        );
    }

    #[test]
    fn stats_single_chain() {
        let dir = tempfile::tempdir().unwrap();
        let (t, e, r) = toy_files(dir.path());
        let graph = load_triples(&t, &e, &r).unwrap().graph;
        let traj = Trajectory {
            start: EntityId(0),
            hops: vec![(RelationId(0), EntityId(1))],
            reward: None,
        };
        let stats = trajectory_stats(&graph, &[traj]).unwrap();
        assert_eq!(stats.relation_frequencies.get(&RelationId(0)), Some(&1));
        assert_eq!(stats.entity_frequencies.get(&EntityId(0)), Some(&1));
        assert_eq!(stats.entity_frequencies.get(&EntityId(1)), Some(&1));
    }

    #[test]
    fn stats_empty_set_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (t, e, r) = toy_files(dir.path());
        let graph = load_triples(&t, &e, &r).unwrap().graph;
        let stats = trajectory_stats(&graph, &[]).unwrap();
        assert_eq!(stats.top_decile_share_relations, 0.0);
        assert_eq!(stats.top_decile_share_entities, 0.0);
        assert!(stats.relation_frequencies.is_empty());
    }

    #[test]
    fn stats_unresolved_id_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let (t, e, r) = toy_files(dir.path());
        let graph = load_triples(&t, &e, &r).unwrap().graph;
        let traj = Trajectory {
            start: EntityId(99),
            hops: vec![],
            reward: None,
        };
        assert!(matches!(
            trajectory_stats(&graph, &[traj]),
            Err(GraphError::Integrity(_))
        ));
    }
}
