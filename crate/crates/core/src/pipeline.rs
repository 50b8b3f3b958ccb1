//! End-to-end experiment harness: one validated TOML config drives graph
//! construction, walk sampling, verbalization, rewarding, preference
//! training, logging, estimation, optimization, and verification, writing
//! every intermediate artifact into a run directory.
//!
//! All randomness derives from the single root seed through named stage
//! streams, so a rerun with the same config produces byte-identical
//! artifacts. Nothing time- or path-dependent goes into the summary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::{log_episodes, save_dataset, LoggingConfig};
use crate::estimator::{
    kg_ips_estimate, plain_ips_estimate, snips_estimate, EstimateReport, EstimatorConfig,
};
use crate::graph::{
    edge_stats, generate_synthetic, load_triples, save_triples, KnowledgeGraph, LoadReport,
    StatsReport, SyntheticSpec,
};
use crate::optimizer::{optimize_target, ObjectiveTerms, OptimizeConfig};
use crate::policy::{PolicyRole, TokenPolicy};
use crate::preference::{
    reward_distribution, save_rewarded, score_trajectories, train_preference, PrefTrainConfig,
    RewardHistogram,
};
use crate::seeding::{derive_seed, fnv64};
use crate::verbal::{
    build_vocabulary, save_episodes, verbalize_with_question, TemplateSet, VerbalizedEpisode,
};
use crate::verify::{
    coverage_experiment, enumerate_expectation, CoverageReport, EnumerationReport, VerifyError,
    VerifyInstance,
};
use crate::walk::{sample_walk, sample_walk_set, save_walks, HopRange};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config validation: {0}")]
    Validation(String),

    #[error("stage {stage}: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

// ── Config ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    #[serde(default)]
    pub triples: Option<PathBuf>,
    #[serde(default)]
    pub entity_labels: Option<PathBuf>,
    #[serde(default)]
    pub relation_labels: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSection {
    /// Template file; omitted means templates are derived from relation labels.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_context_order() -> usize {
    1
}

fn default_smoothing() -> f64 {
    0.1
}

fn default_popularity() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(default = "default_context_order")]
    pub context_order: usize,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    /// Exponent on `1 + in_degree` in the base policy's entity prior.
    #[serde(default = "default_popularity")]
    pub popularity: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            context_order: default_context_order(),
            smoothing: default_smoothing(),
            popularity: default_popularity(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceSection {
    pub walks: usize,
    pub hop_range: [usize; 2],
    pub noise: f64,
    pub questions_per_trajectory: u32,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "default_true")]
    pub linear_decay: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingSection {
    pub episodes: usize,
    pub hop_range: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub delta: f64,
    pub weight_cap: Option<f64>,
    pub reward_floor: f64,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            delta: 0.05,
            weight_cap: None,
            reward_floor: -20.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub steps: usize,
    pub kl_nonentity_threshold: f64,
    /// Re-log a fresh dataset every this many steps; 0 keeps the dataset
    /// fixed for the whole run (the offline setting).
    pub relog_every: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            steps: 100,
            kl_nonentity_threshold: 0.05,
            relog_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub enumeration: bool,
    pub coverage_replications: usize,
    pub coverage_samples: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            enumeration: true,
            coverage_replications: 200,
            coverage_samples: 150,
        }
    }
}

/// One experiment, fully determined by this config plus nothing else.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub graph: GraphSection,
    #[serde(default)]
    pub templates: TemplateSection,
    #[serde(default)]
    pub policy: PolicySection,
    pub preference: PreferenceSection,
    pub logging: LoggingSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub verify: VerifySection,
    /// Hash of the config file bytes, set on load.
    #[serde(skip)]
    pub config_hash: u64,
}

impl ExperimentConfig {
    /// Parse a TOML config, resolving relative paths against the config
    /// file's directory, and validate it.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Validation(e.to_string()))?;
        config.config_hash = fnv64(text.as_bytes());
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        if let Some(p) = self.graph.triples.as_mut() {
            fix(p);
        }
        if let Some(p) = self.graph.entity_labels.as_mut() {
            fix(p);
        }
        if let Some(p) = self.graph.relation_labels.as_mut() {
            fix(p);
        }
        if let Some(p) = self.templates.path.as_mut() {
            fix(p);
        }
    }

    /// Full validation before any stage runs.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::Validation(msg));
        match (&self.graph.synthetic, &self.graph.triples) {
            (None, None) => {
                return fail("graph needs either file paths or a synthetic spec".into())
            }
            (Some(_), Some(_)) => {
                return fail("graph cannot have both file paths and a synthetic spec".into())
            }
            (None, Some(_)) => {
                if self.graph.entity_labels.is_none() || self.graph.relation_labels.is_none() {
                    return fail(
                        "file-backed graph needs triples, entity_labels, relation_labels".into(),
                    );
                }
                for p in [
                    self.graph.triples.as_ref().unwrap(),
                    self.graph.entity_labels.as_ref().unwrap(),
                    self.graph.relation_labels.as_ref().unwrap(),
                ] {
                    if !p.exists() {
                        return fail(format!("graph file {} does not exist", p.display()));
                    }
                }
            }
            (Some(spec), None) => {
                if spec.entities == 0 || spec.relations == 0 || spec.edges_per_entity == 0 {
                    return fail("synthetic spec fields must be positive".into());
                }
            }
        }
        if let Some(p) = &self.templates.path {
            if !p.exists() {
                return fail(format!("template file {} does not exist", p.display()));
            }
        }
        if !(0.0..=1.0).contains(&self.preference.noise) {
            return fail(format!(
                "preference.noise must lie in [0, 1], got {}",
                self.preference.noise
            ));
        }
        if self.preference.questions_per_trajectory == 0 {
            return fail("preference.questions_per_trajectory must be positive".into());
        }
        if self.preference.walks == 0 {
            return fail("preference.walks must be positive".into());
        }
        for (name, range) in [
            ("preference.hop_range", self.preference.hop_range),
            ("logging.hop_range", self.logging.hop_range),
        ] {
            if range[0] == 0 || range[0] > range[1] {
                return fail(format!("{name} {range:?} is not a valid hop range"));
            }
        }
        if self.logging.episodes == 0 {
            return fail("logging.episodes must be positive".into());
        }
        if self.estimator.delta.is_nan()
            || self.estimator.delta <= 0.0
            || self.estimator.delta >= 1.0
        {
            return fail(format!(
                "estimator.delta must lie in (0, 1), got {}",
                self.estimator.delta
            ));
        }
        if let Some(cap) = self.estimator.weight_cap {
            if cap.is_nan() || cap <= 0.0 {
                return fail(format!("estimator.weight_cap must be positive, got {cap}"));
            }
        }
        if !self.estimator.reward_floor.is_finite() {
            return fail("estimator.reward_floor must be finite".into());
        }
        if self.optimizer.learning_rate.is_nan() || self.optimizer.learning_rate < 0.0 {
            return fail("optimizer.learning_rate must be non-negative".into());
        }
        if self.policy.smoothing <= 0.0 {
            return fail("policy.smoothing must be positive".into());
        }
        Ok(())
    }

    fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            delta: self.estimator.delta,
            weight_cap: self.estimator.weight_cap,
            reward_floor: self.estimator.reward_floor,
            validate_snapshots: true,
        }
    }

    fn optimize_config(&self) -> OptimizeConfig {
        OptimizeConfig {
            learning_rate: self.optimizer.learning_rate,
            steps: self.optimizer.steps,
            weight_cap: self.estimator.weight_cap,
            reward_floor: self.estimator.reward_floor,
            backtrack_limit: 40,
            objective: ObjectiveTerms::Full,
            validate_snapshots: true,
        }
    }
}

/// Derived seed for a named pipeline stage. Exposed so stage-by-stage CLI
/// runs can reproduce the pipeline's artifacts exactly.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    derive_seed(root, stage, 0)
}

/// Fit the frozen base policy as an ungrounded grammar model with a
/// popularity prior: counts over the statement templates instantiated with
/// every (entity, relation, entity) combination, whether or not the edge
/// exists, weighted by `(1 + in_degree(object))^popularity`.
///
/// The result knows the surface forms and which entities are popular, but
/// not which entities actually connect — the analog of a language model's
/// corpus-frequency prior. Graph structure enters only through the
/// preference policy, which trains on real walks.
pub fn fit_ungrounded_base(
    graph: &KnowledgeGraph,
    templates: &TemplateSet,
    vocab: &crate::verbal::Vocabulary,
    context_order: usize,
    smoothing: f64,
    popularity: f64,
) -> Result<TokenPolicy, PipelineError> {
    let entities: Vec<_> = graph.entities().map(|(_, e)| e.clone()).collect();
    let relations: Vec<_> = graph.relations().map(|(_, r)| r.clone()).collect();
    let mut in_degree = vec![0usize; entities.len()];
    for &(_, _, t) in graph.edges() {
        in_degree[t.index()] += 1;
    }
    let mut product_edges = Vec::with_capacity(entities.len() * relations.len() * entities.len());
    for h in 0..entities.len() {
        for r in 0..relations.len() {
            for t in 0..entities.len() {
                product_edges.push((
                    crate::graph::EntityId(h as u32),
                    crate::graph::RelationId(r as u32),
                    crate::graph::EntityId(t as u32),
                ));
            }
        }
    }
    let product = KnowledgeGraph::from_parts(entities, relations, product_edges)
        .map_err(stage_err("fit-policy"))?;
    let pop_weight =
        |e: crate::graph::EntityId| (1.0 + in_degree[e.index()] as f64).powf(popularity);

    // One- and two-hop product chains; the latter prime the sentence-boundary
    // contexts that multi-hop episodes condition on.
    let mut corpus = Vec::new();
    for &(h, r, t) in product.edges() {
        let traj = crate::walk::Trajectory {
            start: h,
            hops: vec![(r, t)],
            reward: None,
        };
        let episode = verbalize_with_question(&traj, &product, templates, vocab)
            .map_err(stage_err("fit-policy"))?;
        corpus.push((episode, pop_weight(t)));
    }
    for &(h, r1, m) in product.edges() {
        for &(h2, r2, t) in product.edges() {
            if h2 != m {
                continue;
            }
            let traj = crate::walk::Trajectory {
                start: h,
                hops: vec![(r1, m), (r2, t)],
                reward: None,
            };
            let episode = verbalize_with_question(&traj, &product, templates, vocab)
                .map_err(stage_err("fit-policy"))?;
            corpus.push((episode, pop_weight(m) * pop_weight(t)));
        }
    }
    let weighted: Vec<(&crate::verbal::VerbalizedEpisode, f64)> =
        corpus.iter().map(|(e, w)| (e, *w)).collect();
    Ok(TokenPolicy::fit_from_weighted_episodes(
        vocab,
        context_order,
        PolicyRole::Base,
        &weighted,
        smoothing,
    ))
}

// ── Summary ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSummary {
    pub entities: usize,
    pub relations: usize,
    pub edges: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizationSummary {
    pub initial_value: f64,
    pub final_value: f64,
    pub improvement: f64,
    pub monotone: bool,
    pub kl_entity_initial: f64,
    pub kl_entity_final: f64,
    pub kl_nonentity_max: f64,
    pub kl_nonentity_threshold: f64,
    pub within_drift_threshold: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifySummary {
    pub enumeration_gap: Option<f64>,
    pub enumeration_skipped: Option<String>,
    pub covered_fraction: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub config_hash: String,
    pub seed: u64,
    pub graph: GraphSummary,
    pub mean_reward: f64,
    pub reward_histogram: RewardHistogram,
    pub preference_initial_objective: f64,
    pub preference_final_objective: f64,
    pub estimate_initial: EstimateReport,
    pub estimate_initial_plain: EstimateReport,
    pub estimate_initial_snips: EstimateReport,
    pub estimate_final: EstimateReport,
    pub optimization: OptimizationSummary,
    pub verify: VerifySummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub stage_seeds: StageSeeds,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSeeds {
    pub walks: u64,
    pub reward: u64,
    pub log: u64,
    pub verify_skeleton: u64,
    pub coverage: u64,
}

fn write_file(path: &Path, body: &str) -> Result<(), PipelineError> {
    fs::write(path, body).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let body = serde_json::to_string_pretty(value).expect("artifact serializes");
    write_file(path, &body)
}

// ── Pipeline ─────────────────────────────────────────────────────────────

/// Execute every stage into `out_dir`, returning the summary that was also
/// written to `summary.json`.
pub fn run_pipeline(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<PipelineSummary, PipelineError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;

    let manifest = RunManifest {
        config_hash: format!("{:016x}", config.config_hash),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        stage_seeds: StageSeeds {
            walks: stage_seed(config.seed, "walks"),
            reward: stage_seed(config.seed, "reward"),
            log: stage_seed(config.seed, "log"),
            verify_skeleton: stage_seed(config.seed, "verify-skeleton"),
            coverage: stage_seed(config.seed, "coverage"),
        },
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;

    // Stage: graph.
    let (graph, load_report) = build_graph(config)?;
    save_triples(
        &graph,
        &out_dir.join("triples.tsv"),
        &out_dir.join("entities.tsv"),
        &out_dir.join("relations.tsv"),
    )
    .map_err(stage_err("graph"))?;
    if let Some(report) = &load_report {
        write_json(&out_dir.join("load_report.json"), report)?;
    }
    write_json(
        &out_dir.join("graph_stats.json"),
        &StatsReport::new(&graph, &edge_stats(&graph)),
    )?;

    let templates = match &config.templates.path {
        Some(path) => TemplateSet::load(path).map_err(stage_err("templates"))?,
        None => TemplateSet::default_for_graph(&graph),
    };
    templates
        .save(&out_dir.join("templates.json"))
        .map_err(stage_err("templates"))?;
    let vocab = build_vocabulary(&graph, &templates);
    write_json(
        &out_dir.join("vocab.json"),
        &serde_json::json!({
            "size": vocab.len(),
            "hash": format!("{:016x}", vocab.content_hash()),
            "tokens": (0..vocab.len())
                .map(|i| vocab.token_str(crate::policy::TokenId(i as u32)).to_string())
                .collect::<Vec<_>>(),
        }),
    )?;

    // Stage: walks.
    let hop_range = HopRange {
        min: config.preference.hop_range[0],
        max: config.preference.hop_range[1],
    };
    let walks = sample_walk_set(
        &graph,
        config.preference.walks,
        hop_range,
        manifest.stage_seeds.walks,
    )
    .map_err(stage_err("walks"))?;
    save_walks(&out_dir.join("walks.jsonl"), &walks).map_err(stage_err("walks"))?;

    // Stage: verbalize.
    let episodes: Vec<VerbalizedEpisode> = walks
        .iter()
        .map(|w| verbalize_with_question(w, &graph, &templates, &vocab))
        .collect::<Result<_, _>>()
        .map_err(stage_err("verbalize"))?;
    save_episodes(&out_dir.join("episodes.jsonl"), &episodes).map_err(stage_err("verbalize"))?;

    // Stage: reward.
    let rewarded = score_trajectories(
        &graph,
        &templates,
        &vocab,
        &walks,
        config.preference.noise,
        config.preference.questions_per_trajectory,
        manifest.stage_seeds.reward,
    )
    .map_err(stage_err("reward"))?;
    save_rewarded(&out_dir.join("rewarded.jsonl"), &rewarded).map_err(stage_err("reward"))?;
    let histogram = reward_distribution(&rewarded);
    write_json(&out_dir.join("reward_histogram.json"), &histogram)?;
    let mean_reward =
        rewarded.items.iter().map(|i| i.reward).sum::<f64>() / rewarded.items.len().max(1) as f64;

    // Stage: policies (fit base, train preference).
    let base = fit_ungrounded_base(
        &graph,
        &templates,
        &vocab,
        config.policy.context_order,
        config.policy.smoothing,
        config.policy.popularity,
    )?;
    base.save(&out_dir.join("policy_base.json"))
        .map_err(stage_err("fit-policy"))?;
    let mut pref = base.clone_as(PolicyRole::Preference);
    let train_config = PrefTrainConfig {
        learning_rate: config.preference.learning_rate,
        epochs: config.preference.epochs,
        linear_decay: config.preference.linear_decay,
        backtrack_limit: 40,
    };
    let training_log =
        train_preference(&mut pref, &rewarded, &train_config).map_err(stage_err("train-pref"))?;
    pref.save(&out_dir.join("policy_pref.json"))
        .map_err(stage_err("train-pref"))?;
    write_json(&out_dir.join("pref_training_log.json"), &training_log)?;

    // Stage: log.
    let logging_config = LoggingConfig::new(
        config.logging.episodes,
        HopRange {
            min: config.logging.hop_range[0],
            max: config.logging.hop_range[1],
        },
        manifest.stage_seeds.log,
    );
    let dataset = log_episodes(&graph, &templates, &vocab, &pref, &base, &logging_config)
        .map_err(stage_err("log"))?;
    save_dataset(&out_dir.join("dataset.jsonl"), &dataset).map_err(stage_err("log"))?;

    // Stage: evaluate (initial target = clone of the base).
    let target_init = base.clone_as(PolicyRole::Target);
    let est_config = config.estimator_config();
    let initial = kg_ips_estimate(&dataset, &target_init, &pref, &base, &est_config)
        .map_err(stage_err("evaluate"))?;
    let initial_plain = plain_ips_estimate(&dataset, &target_init, &pref, &base, &est_config)
        .map_err(stage_err("evaluate"))?;
    let initial_snips = snips_estimate(&dataset, &target_init, &pref, &base, &est_config)
        .map_err(stage_err("evaluate"))?;
    write_json(
        &out_dir.join("estimate_initial.json"),
        &serde_json::json!({
            "kg_ips": initial.report(),
            "plain_ips": initial_plain.report(),
            "snips": initial_snips.report(),
        }),
    )?;

    // Stage: optimize (optionally re-logging between chunks).
    let opt_config = config.optimize_config();
    let run = if config.optimizer.relog_every == 0
        || config.optimizer.relog_every >= config.optimizer.steps
    {
        optimize_target(&dataset, &target_init, &pref, &base, &opt_config)
            .map_err(stage_err("optimize"))?
    } else {
        let mut remaining = config.optimizer.steps;
        let mut current_ds = dataset.clone();
        let mut current_target = target_init.clone();
        let mut merged: Option<crate::optimizer::OptimizationRun> = None;
        let mut chunk_index = 0u64;
        while remaining > 0 {
            let chunk = config.optimizer.relog_every.min(remaining);
            let chunk_config = OptimizeConfig {
                steps: chunk,
                ..opt_config.clone()
            };
            let part = optimize_target(&current_ds, &current_target, &pref, &base, &chunk_config)
                .map_err(stage_err("optimize"))?;
            current_target = part.final_policy.clone();
            merged = Some(match merged {
                None => part,
                Some(mut acc) => {
                    let offset = acc.trace.len();
                    acc.trace.extend(part.trace.into_iter().map(|mut p| {
                        p.step += offset;
                        p
                    }));
                    acc.final_policy = part.final_policy;
                    acc
                }
            });
            remaining -= chunk;
            if remaining > 0 {
                chunk_index += 1;
                let relog = LoggingConfig::new(
                    config.logging.episodes,
                    logging_config.hop_range,
                    derive_seed(config.seed, "relog", chunk_index),
                );
                current_ds = log_episodes(&graph, &templates, &vocab, &pref, &base, &relog)
                    .map_err(stage_err("optimize"))?;
            }
        }
        merged.expect("steps > 0 in relog branch")
    };
    write_file(&out_dir.join("optimize_trace.csv"), &run.trace_csv())?;
    run.final_policy
        .save(&out_dir.join("policy_target_final.json"))
        .map_err(stage_err("optimize"))?;
    write_json(
        &out_dir.join("optimization_run.json"),
        &serde_json::json!({
            "initial": run.initial,
            "trace": run.trace,
            "config": run.config,
        }),
    )?;

    let final_estimate = kg_ips_estimate(&dataset, &run.final_policy, &pref, &base, &est_config)
        .map_err(stage_err("optimize"))?;
    write_json(
        &out_dir.join("estimate_final.json"),
        &final_estimate.report(),
    )?;

    let monotone = run
        .trace
        .iter()
        .scan(run.initial.value, |last, p| {
            let ok = p.value >= *last;
            *last = p.value;
            Some(ok)
        })
        .all(|ok| ok);
    let kl_nonentity_max = run
        .trace
        .iter()
        .map(|p| p.kl_nonentity)
        .fold(run.initial.kl_nonentity, f64::max);
    let optimization = OptimizationSummary {
        initial_value: run.initial_value(),
        final_value: run.final_value(),
        improvement: run.final_value() - run.initial_value(),
        monotone,
        kl_entity_initial: run.initial.kl_entity,
        kl_entity_final: run.final_kl_entity(),
        kl_nonentity_max,
        kl_nonentity_threshold: config.optimizer.kl_nonentity_threshold,
        within_drift_threshold: kl_nonentity_max < config.optimizer.kl_nonentity_threshold,
    };

    // Stage: verify.
    let verify_summary = run_verify_stage(
        config,
        out_dir,
        &graph,
        &templates,
        &vocab,
        &run.final_policy,
        &pref,
        &base,
        &manifest,
    )?;

    let summary = PipelineSummary {
        config_hash: manifest.config_hash.clone(),
        seed: config.seed,
        graph: GraphSummary {
            entities: graph.entity_count(),
            relations: graph.relation_count(),
            edges: graph.edge_count(),
        },
        mean_reward,
        reward_histogram: histogram,
        preference_initial_objective: training_log.initial_objective,
        preference_final_objective: training_log.final_objective(),
        estimate_initial: initial.report(),
        estimate_initial_plain: initial_plain.report(),
        estimate_initial_snips: initial_snips.report(),
        estimate_final: final_estimate.report(),
        optimization,
        verify: verify_summary,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn build_graph(
    config: &ExperimentConfig,
) -> Result<(KnowledgeGraph, Option<LoadReport>), PipelineError> {
    match (&config.graph.synthetic, &config.graph.triples) {
        (Some(spec), None) => Ok((generate_synthetic(spec).map_err(stage_err("graph"))?, None)),
        (None, Some(triples)) => {
            let out = load_triples(
                triples,
                config.graph.entity_labels.as_ref().unwrap(),
                config.graph.relation_labels.as_ref().unwrap(),
            )
            .map_err(stage_err("graph"))?;
            Ok((out.graph, Some(out.report)))
        }
        _ => Err(PipelineError::Validation("invalid graph section".into())),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_verify_stage(
    config: &ExperimentConfig,
    out_dir: &Path,
    graph: &KnowledgeGraph,
    templates: &TemplateSet,
    vocab: &crate::verbal::Vocabulary,
    target: &TokenPolicy,
    pref: &TokenPolicy,
    base: &TokenPolicy,
    manifest: &RunManifest,
) -> Result<VerifySummary, PipelineError> {
    if !config.verify.enumeration && config.verify.coverage_replications == 0 {
        let summary = VerifySummary {
            enumeration_gap: None,
            enumeration_skipped: Some("disabled".into()),
            covered_fraction: None,
            pass: true,
        };
        write_json(&out_dir.join("verify_report.json"), &summary)?;
        return Ok(summary);
    }

    // One-hop skeleton from the first non-sink entity; the instance redraws
    // every step token, so the particular skeleton only fixes the layout.
    let start = graph
        .non_sink_entities()
        .first()
        .copied()
        .ok_or_else(|| PipelineError::Stage {
            stage: "verify",
            message: "graph has no entity with outgoing edges".into(),
        })?;
    let skeleton = sample_walk(graph, start, 1, manifest.stage_seeds.verify_skeleton)
        .map_err(stage_err("verify"))?;
    let instance = VerifyInstance {
        name: "pipeline".into(),
        graph: graph.clone(),
        templates: templates.clone(),
        vocab: vocab.clone(),
        target: target.clone(),
        pref: pref.clone(),
        base: base.clone(),
        skeleton,
        estimator_config: config.estimator_config_for_verify(),
    };

    let mut enumeration: Option<EnumerationReport> = None;
    let mut skipped = None;
    if config.verify.enumeration {
        match enumerate_expectation(&instance) {
            Ok(report) => enumeration = Some(report),
            Err(VerifyError::TooLarge { episodes, bound }) => {
                skipped = Some(format!("{episodes} episodes exceed the {bound} bound"));
            }
            Err(VerifyError::MultiTokenLabel(label)) => {
                skipped = Some(format!("multi-token label {label:?}"));
            }
            Err(e) => return Err(stage_err("verify")(e)),
        }
    } else {
        skipped = Some("disabled".into());
    }

    let coverage: Option<CoverageReport> = if config.verify.coverage_replications > 0 {
        Some(
            coverage_experiment(
                &instance,
                config.verify.coverage_replications,
                config.verify.coverage_samples,
                config.estimator.delta,
                manifest.stage_seeds.coverage,
            )
            .map_err(stage_err("verify"))?,
        )
    } else {
        None
    };

    let gap_ok = enumeration.as_ref().is_none_or(|r| r.gap <= 1e-10);
    let coverage_ok = coverage
        .as_ref()
        .is_none_or(|r| r.covered_fraction >= 1.0 - r.delta);
    let summary = VerifySummary {
        enumeration_gap: enumeration.as_ref().map(|r| r.gap),
        enumeration_skipped: skipped,
        covered_fraction: coverage.as_ref().map(|r| r.covered_fraction),
        pass: gap_ok && coverage_ok,
    };
    write_json(
        &out_dir.join("verify_report.json"),
        &serde_json::json!({
            "enumeration": enumeration,
            "coverage": coverage,
            "pass": summary.pass,
        }),
    )?;
    Ok(summary)
}

impl ExperimentConfig {
    /// Estimator config used inside the verify stage: snapshot validation is
    /// irrelevant there because instances carry their own policies.
    fn estimator_config_for_verify(&self) -> EstimatorConfig {
        EstimatorConfig {
            validate_snapshots: false,
            ..self.estimator_config()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config_text() -> String {
        r#"
seed = 7
output_dir = "runs/test"

[graph.synthetic]
entities = 6
relations = 2
edges_per_entity = 2
relation_skew = 0.0
seed = 5

[preference]
walks = 40
hop_range = [1, 2]
noise = 0.3
questions_per_trajectory = 10
learning_rate = 1e-3
epochs = 3

[logging]
episodes = 30
hop_range = [1, 1]

[optimizer]
learning_rate = 0.05
steps = 10

[verify]
enumeration = false
coverage_replications = 0
"#
        .to_string()
    }

    fn load_config(dir: &Path, text: &str) -> Result<ExperimentConfig, PipelineError> {
        let path = dir.join("config.toml");
        fs::write(&path, text).unwrap();
        ExperimentConfig::load(&path)
    }

    #[test]
    fn config_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let config = load_config(dir.path(), &toy_config_text()).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.estimator.delta, 0.05);
    }

    #[test]
    fn bad_delta_rejected_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let text = toy_config_text() + "\n[estimator]\ndelta = 1.5\n";
        let err = load_config(dir.path(), &text).unwrap_err();
        assert!(matches!(err, PipelineError::Validation(_)), "{err}");
    }

    #[test]
    fn missing_graph_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"
seed = 1
output_dir = "runs/x"

[graph]
triples = "nope.tsv"
entity_labels = "nope-e.tsv"
relation_labels = "nope-r.tsv"

[preference]
walks = 10
hop_range = [1, 2]
noise = 0.0
questions_per_trajectory = 5
learning_rate = 1e-3
epochs = 1

[logging]
episodes = 10
hop_range = [1, 1]
"#;
        let err = load_config(dir.path(), text).unwrap_err();
        assert!(matches!(err, PipelineError::Validation(_)));
    }

    #[test]
    fn pipeline_end_to_end_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let config = load_config(dir.path(), &toy_config_text()).unwrap();
        let out1 = dir.path().join("run1");
        let out2 = dir.path().join("run2");
        let s1 = run_pipeline(&config, &out1).unwrap();
        let s2 = run_pipeline(&config, &out2).unwrap();
        assert!(s1.optimization.final_value >= s1.optimization.initial_value);
        let b1 = fs::read(out1.join("summary.json")).unwrap();
        let b2 = fs::read(out2.join("summary.json")).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(s1.config_hash, s2.config_hash);
        for artifact in [
            "manifest.json",
            "triples.tsv",
            "walks.jsonl",
            "episodes.jsonl",
            "rewarded.jsonl",
            "dataset.jsonl",
            "policy_base.json",
            "policy_pref.json",
            "policy_target_final.json",
            "estimate_initial.json",
            "estimate_final.json",
            "optimize_trace.csv",
        ] {
            let a = fs::read(out1.join(artifact)).unwrap();
            let b = fs::read(out2.join(artifact)).unwrap();
            assert_eq!(a, b, "artifact {artifact} differs between reruns");
        }
    }
}
