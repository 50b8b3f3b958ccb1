//! Offline evaluation and alignment of token-level reasoning policies.
//!
//! The crate builds a small but complete off-policy evaluation pipeline on top
//! of knowledge-graph random walks:
//!
//! 1. [`graph`] stores a directed labeled knowledge graph (loaded from TSV
//!    triple files or generated synthetically) and computes frequency
//!    statistics over walk sets.
//! 2. [`walk`] samples multi-hop trajectories over the graph's out-edges.
//! 3. [`verbal`] renders trajectories into token sequences via per-relation
//!    templates, marking entity-mention tokens, and proposes questions whose
//!    answer is a trajectory's final entity.
//! 4. [`policy`] provides tabular order-k softmax token policies with exact
//!    log-probabilities, sampling, and analytic gradients.
//! 5. [`preference`] scores trajectories by self-consistency against a
//!    graph-grounded answer oracle and trains the preference policy by
//!    reward-weighted gradient ascent.
//! 6. [`episodes`] produces and persists the offline logged dataset with
//!    per-token behavior propensities cached at logging time.
//! 7. [`estimator`] computes the split-propensity importance-weighted value
//!    estimate, plain and self-normalized baselines, Hoeffding-style
//!    confidence radii, and the entity/context reward decomposition.
//! 8. [`optimizer`] ascends the estimated value by exact gradient steps with
//!    backtracking and KL drift monitoring.
//! 9. [`verify`] holds the independent oracles: exact enumeration of the
//!    estimator's expectation, interval-coverage experiments, and the reward
//!    decomposition consistency check.
//!
//! [`pipeline`] ties the stages together behind a single validated config and
//! a reproducible run directory; the `driftwalk` binary wraps each stage as a
//! subcommand.

pub mod episodes;
pub mod estimator;
pub mod graph;
pub mod numeric;
pub mod optimizer;
pub mod pipeline;
pub mod policy;
pub mod preference;
pub mod seeding;
pub mod verbal;
pub mod verify;
pub mod walk;

pub use episodes::{LoggedDataset, LoggedEpisode};
pub use estimator::{EstimatorConfig, RewardDecomposition, ValueEstimate};
pub use graph::{EntityId, GraphStats, KnowledgeGraph, RelationId};
pub use optimizer::{OptimizationRun, OptimizeConfig};
pub use policy::{PolicyGradient, PolicyRole, TokenId, TokenPolicy};
pub use preference::{AnswerOracle, RewardedTrajectorySet};
pub use verbal::{TemplateSet, VerbalizedEpisode, Vocabulary};
pub use verify::{CoverageReport, EnumerationReport, VerifyInstance};
pub use walk::{HopRange, Trajectory};
