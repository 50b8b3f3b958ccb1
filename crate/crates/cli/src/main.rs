//! `driftwalk` — command-line front end for the evaluation pipeline.
//!
//! Every subcommand wraps one library operation with file-based inputs and
//! outputs, so pipelines can be composed stage by stage; `run` executes the
//! whole thing from a single config. Exit codes: 0 success, 1 validation,
//! 2 runtime error, 3 verification failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use driftwalk::episodes::{load_dataset, log_episodes, save_dataset, LoggingConfig};
use driftwalk::estimator::{kg_ips_estimate, plain_ips_estimate, snips_estimate, EstimatorConfig};
use driftwalk::graph::{
    generate_synthetic, load_triples, save_triples, trajectory_stats, KnowledgeGraph, StatsReport,
    SyntheticSpec,
};
use driftwalk::optimizer::{optimize_target, ObjectiveTerms, OptimizeConfig};
use driftwalk::pipeline::{fit_ungrounded_base, run_pipeline, ExperimentConfig};
use driftwalk::policy::{PolicyRole, TokenPolicy};
use driftwalk::preference::{
    load_rewarded, reward_distribution, save_rewarded, score_trajectories, train_preference,
    PrefTrainConfig,
};
use driftwalk::verbal::{
    build_vocabulary, load_episodes, save_episodes, verbalize_with_question, TemplateSet,
};
use driftwalk::verify::{
    builtin_instance, coverage_experiment, decomposition_consistency, enumerate_expectation,
    mc_cross_check, INSTANCE_NAMES,
};
use driftwalk::walk::{load_walks, sample_walk_set_with, save_walks, HopRange, WalkOptions};

#[derive(Parser)]
#[command(
    name = "driftwalk",
    version,
    about = "Offline evaluation and alignment of token-level reasoning policies against knowledge-graph feedback"
)]
struct Cli {
    /// Cap the number of worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline from a TOML config into a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic knowledge graph as TSV files.
    GenKg {
        #[arg(long)]
        entities: usize,
        #[arg(long)]
        relations: usize,
        #[arg(long)]
        edges_per_entity: usize,
        /// Power-law exponent over relation indices (0 = uniform).
        #[arg(long, default_value_t = 0.0)]
        skew: f64,
        #[arg(long)]
        seed: u64,
        /// Directory receiving triples.tsv, entities.tsv, relations.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a trajectory set over a graph's out-edges.
    Walk {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        hop_min: usize,
        #[arg(long)]
        hop_max: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        no_revisit: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verbalize walks into question-bearing token episodes.
    Verbalize {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        walks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score walks by self-consistency against the graph oracle.
    Reward {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        walks: PathBuf,
        /// Oracle error probability in [0, 1].
        #[arg(long)]
        noise: f64,
        #[arg(long, default_value_t = 10)]
        questions: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional reward histogram JSON.
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Fit a tabular policy (ungrounded grammar base, or counts over an
    /// episode corpus).
    FitPolicy {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        templates: PathBuf,
        /// Fit from this episode corpus instead of the ungrounded product.
        #[arg(long)]
        episodes: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        context_order: usize,
        #[arg(long, default_value_t = 0.1)]
        smoothing: f64,
        /// Popularity-prior exponent (ungrounded mode only).
        #[arg(long, default_value_t = 1.0)]
        popularity: f64,
        #[arg(long, value_parser = parse_role, default_value = "base")]
        role: PolicyRole,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the preference policy on a rewarded trajectory set.
    TrainPref {
        #[arg(long)]
        rewarded: PathBuf,
        /// Initial policy (cloned with the preference role).
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        no_linear_decay: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log_out: Option<PathBuf>,
    },
    /// Produce the offline logged dataset with cached propensities.
    Log {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        pref: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        hop_min: usize,
        #[arg(long)]
        hop_max: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate a target policy's value on a logged dataset (JSON on stdout).
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        pref: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long)]
        weight_cap: Option<f64>,
        #[arg(long, default_value_t = -20.0, allow_hyphen_values = true)]
        reward_floor: f64,
        /// Which estimator(s) to report.
        #[arg(long, default_value = "all", value_parser = ["kg-ips", "plain-ips", "snips", "all"])]
        estimator: String,
        /// Skip dataset snapshot validation.
        #[arg(long)]
        no_validate: bool,
        /// Export the kg-ips per-episode terms as CSV.
        #[arg(long)]
        terms_out: Option<PathBuf>,
    },
    /// Gradient-ascend the estimated value over a fixed dataset.
    Optimize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        pref: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        learning_rate: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long)]
        weight_cap: Option<f64>,
        #[arg(long, default_value_t = -20.0, allow_hyphen_values = true)]
        reward_floor: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Empirical checks of the estimator's statistical claims.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Frequency statistics of a trajectory set over a graph.
    Stats {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        walks: PathBuf,
    },
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Exact enumeration of the estimate's expectation versus the true
    /// value, plus a Monte Carlo cross-check.
    Unbiasedness {
        #[arg(long)]
        instance: String,
        #[arg(long, default_value_t = 100_000)]
        mc_samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Replicated confidence-interval coverage study.
    Coverage {
        #[arg(long)]
        instance: String,
        #[arg(long, default_value_t = 1000)]
        replications: usize,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Full-objective versus entity-only argmax agreement.
    Decomposition {
        #[arg(long)]
        instance: String,
        #[arg(long, default_value_t = 300)]
        samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// Graph input: a directory holding triples.tsv, entities.tsv, relations.tsv.
#[derive(Args)]
struct GraphArgs {
    #[arg(long = "graph")]
    graph_dir: PathBuf,
}

fn parse_role(s: &str) -> Result<PolicyRole, String> {
    match s {
        "target" => Ok(PolicyRole::Target),
        "base" => Ok(PolicyRole::Base),
        "preference" => Ok(PolicyRole::Preference),
        other => Err(format!("unknown role {other:?} (target|base|preference)")),
    }
}

enum CliError {
    Validation(String),
    Runtime(String),
    VerificationFailed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::VerificationFailed(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) | CliError::VerificationFailed(m) => m,
        }
    }
}

fn validation<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_graph(args: &GraphArgs) -> Result<KnowledgeGraph, CliError> {
    let dir = &args.graph_dir;
    let outcome = load_triples(
        &dir.join("triples.tsv"),
        &dir.join("entities.tsv"),
        &dir.join("relations.tsv"),
    )
    .map_err(runtime)?;
    Ok(outcome.graph)
}

fn hop_range(min: usize, max: usize) -> Result<HopRange, CliError> {
    HopRange::new(min, max).map_err(validation)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("report serializes")
    );
}

fn instance_or_fail(name: &str) -> Result<driftwalk::verify::VerifyInstance, CliError> {
    builtin_instance(name).map_err(|_| {
        CliError::Validation(format!(
            "unknown instance {name:?}; available: {}",
            INSTANCE_NAMES.join(", ")
        ))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, out } => {
            let config = ExperimentConfig::load(&config).map_err(validation)?;
            let out_dir = out.unwrap_or_else(|| config.output_dir.clone());
            let summary = run_pipeline(&config, &out_dir).map_err(runtime)?;
            print_json(&summary);
            Ok(())
        }

        Command::GenKg {
            entities,
            relations,
            edges_per_entity,
            skew,
            seed,
            out,
        } => {
            let spec = SyntheticSpec {
                entities,
                relations,
                edges_per_entity,
                relation_skew: skew,
                seed,
            };
            let graph = generate_synthetic(&spec).map_err(validation)?;
            std::fs::create_dir_all(&out).map_err(runtime)?;
            save_graph(&graph, &out)?;
            print_json(&serde_json::json!({
                "entities": graph.entity_count(),
                "relations": graph.relation_count(),
                "edges": graph.edge_count(),
            }));
            Ok(())
        }

        Command::Walk {
            graph,
            count,
            hop_min,
            hop_max,
            seed,
            no_revisit,
            out,
        } => {
            let g = load_graph(&graph)?;
            let range = hop_range(hop_min, hop_max)?;
            let options = WalkOptions {
                no_revisit,
                ..WalkOptions::default()
            };
            let walks = sample_walk_set_with(&g, count, range, seed, &options).map_err(runtime)?;
            save_walks(&out, &walks).map_err(runtime)?;
            Ok(())
        }

        Command::Verbalize {
            graph,
            templates,
            walks,
            out,
        } => {
            let g = load_graph(&graph)?;
            let templates = TemplateSet::load(&templates).map_err(validation)?;
            let vocab = build_vocabulary(&g, &templates);
            let walks = load_walks(&walks).map_err(runtime)?;
            let episodes = walks
                .iter()
                .map(|w| verbalize_with_question(w, &g, &templates, &vocab))
                .collect::<Result<Vec<_>, _>>()
                .map_err(runtime)?;
            save_episodes(&out, &episodes).map_err(runtime)?;
            Ok(())
        }

        Command::Reward {
            graph,
            templates,
            walks,
            noise,
            questions,
            seed,
            out,
            histogram,
        } => {
            let g = load_graph(&graph)?;
            let templates = TemplateSet::load(&templates).map_err(validation)?;
            let vocab = build_vocabulary(&g, &templates);
            let walks = load_walks(&walks).map_err(runtime)?;
            let set = score_trajectories(&g, &templates, &vocab, &walks, noise, questions, seed)
                .map_err(validation)?;
            save_rewarded(&out, &set).map_err(runtime)?;
            if let Some(path) = histogram {
                let hist = reward_distribution(&set);
                std::fs::write(&path, serde_json::to_string_pretty(&hist).unwrap())
                    .map_err(runtime)?;
            }
            Ok(())
        }

        Command::FitPolicy {
            graph,
            templates,
            episodes,
            context_order,
            smoothing,
            popularity,
            role,
            out,
        } => {
            let g = load_graph(&graph)?;
            let templates = TemplateSet::load(&templates).map_err(validation)?;
            let vocab = build_vocabulary(&g, &templates);
            if smoothing <= 0.0 {
                return Err(CliError::Validation("smoothing must be positive".into()));
            }
            let policy = match episodes {
                Some(path) => {
                    let corpus = load_episodes(&path).map_err(runtime)?;
                    TokenPolicy::fit_from_episodes(&vocab, context_order, role, &corpus, smoothing)
                }
                None => fit_ungrounded_base(
                    &g,
                    &templates,
                    &vocab,
                    context_order,
                    smoothing,
                    popularity,
                )
                .map_err(runtime)?
                .clone_as(role),
            };
            policy.save(&out).map_err(runtime)?;
            Ok(())
        }

        Command::TrainPref {
            rewarded,
            init,
            learning_rate,
            epochs,
            no_linear_decay,
            out,
            log_out,
        } => {
            let set = load_rewarded(&rewarded).map_err(runtime)?;
            let mut policy = TokenPolicy::load(&init)
                .map_err(runtime)?
                .clone_as(PolicyRole::Preference);
            let config = PrefTrainConfig {
                learning_rate,
                epochs,
                linear_decay: !no_linear_decay,
                ..PrefTrainConfig::default()
            };
            let log = train_preference(&mut policy, &set, &config).map_err(validation)?;
            policy.save(&out).map_err(runtime)?;
            if let Some(path) = log_out {
                std::fs::write(&path, serde_json::to_string_pretty(&log).unwrap())
                    .map_err(runtime)?;
            }
            Ok(())
        }

        Command::Log {
            graph,
            templates,
            pref,
            base,
            count,
            hop_min,
            hop_max,
            seed,
            out,
        } => {
            let g = load_graph(&graph)?;
            let templates = TemplateSet::load(&templates).map_err(validation)?;
            let vocab = build_vocabulary(&g, &templates);
            let pref = TokenPolicy::load(&pref).map_err(runtime)?;
            let base = TokenPolicy::load(&base).map_err(runtime)?;
            let config = LoggingConfig::new(count, hop_range(hop_min, hop_max)?, seed);
            let dataset =
                log_episodes(&g, &templates, &vocab, &pref, &base, &config).map_err(runtime)?;
            save_dataset(&out, &dataset).map_err(runtime)?;
            Ok(())
        }

        Command::Evaluate {
            dataset,
            target,
            pref,
            base,
            delta,
            weight_cap,
            reward_floor,
            estimator,
            no_validate,
            terms_out,
        } => {
            let target = TokenPolicy::load(&target).map_err(runtime)?;
            let pref = TokenPolicy::load(&pref).map_err(runtime)?;
            let base = TokenPolicy::load(&base).map_err(runtime)?;
            let snapshots = if no_validate {
                None
            } else {
                Some((&pref, &base))
            };
            let (ds, _) = load_dataset(&dataset, snapshots).map_err(runtime)?;
            let config = EstimatorConfig {
                delta,
                weight_cap,
                reward_floor,
                validate_snapshots: !no_validate,
            };
            config.validate().map_err(validation)?;
            let report = |kind: &str| -> Result<serde_json::Value, CliError> {
                let estimate = match kind {
                    "kg-ips" => kg_ips_estimate(&ds, &target, &pref, &base, &config),
                    "plain-ips" => plain_ips_estimate(&ds, &target, &pref, &base, &config),
                    "snips" => snips_estimate(&ds, &target, &pref, &base, &config),
                    _ => unreachable!("clap restricts the estimator values"),
                }
                .map_err(runtime)?;
                let mut report = estimate.report();
                if kind == "kg-ips" {
                    if let Some(path) = &terms_out {
                        std::fs::write(path, estimate.per_episode_terms_csv()).map_err(runtime)?;
                        report.per_episode_terms_path = Some(path.display().to_string());
                    }
                }
                Ok(serde_json::to_value(report).unwrap())
            };
            let out = match estimator.as_str() {
                "all" => serde_json::json!({
                    "kg_ips": report("kg-ips")?,
                    "plain_ips": report("plain-ips")?,
                    "snips": report("snips")?,
                }),
                one => report(one)?,
            };
            println!("{}", serde_json::to_string_pretty(&out).unwrap());
            Ok(())
        }

        Command::Optimize {
            dataset,
            target,
            pref,
            base,
            learning_rate,
            steps,
            weight_cap,
            reward_floor,
            out_dir,
        } => {
            let target = TokenPolicy::load(&target).map_err(runtime)?;
            let pref = TokenPolicy::load(&pref).map_err(runtime)?;
            let base = TokenPolicy::load(&base).map_err(runtime)?;
            let (ds, _) = load_dataset(&dataset, Some((&pref, &base))).map_err(runtime)?;
            let config = OptimizeConfig {
                learning_rate,
                steps,
                weight_cap,
                reward_floor,
                objective: ObjectiveTerms::Full,
                ..OptimizeConfig::default()
            };
            let run = optimize_target(
                &ds,
                &target.clone_as(PolicyRole::Target),
                &pref,
                &base,
                &config,
            )
            .map_err(runtime)?;
            std::fs::create_dir_all(&out_dir).map_err(runtime)?;
            std::fs::write(out_dir.join("optimize_trace.csv"), run.trace_csv()).map_err(runtime)?;
            run.final_policy
                .save(&out_dir.join("policy_target_final.json"))
                .map_err(runtime)?;
            let artifact = serde_json::json!({
                "initial": run.initial,
                "trace": run.trace,
                "config": run.config,
            });
            std::fs::write(
                out_dir.join("optimization_run.json"),
                serde_json::to_string_pretty(&artifact).unwrap(),
            )
            .map_err(runtime)?;
            print_json(&serde_json::json!({
                "initial_value": run.initial_value(),
                "final_value": run.final_value(),
                "improvement": run.final_value() - run.initial_value(),
            }));
            Ok(())
        }

        Command::Verify(cmd) => verify_dispatch(cmd),

        Command::Stats { graph, walks } => {
            let g = load_graph(&graph)?;
            let walks = load_walks(&walks).map_err(runtime)?;
            let stats = trajectory_stats(&g, &walks).map_err(runtime)?;
            print_json(&StatsReport::new(&g, &stats));
            Ok(())
        }
    }
}

fn verify_dispatch(cmd: VerifyCommand) -> Result<(), CliError> {
    match cmd {
        VerifyCommand::Unbiasedness {
            instance,
            mc_samples,
            seed,
        } => {
            let inst = instance_or_fail(&instance)?;
            let report = enumerate_expectation(&inst).map_err(runtime)?;
            let check = mc_cross_check(&inst, mc_samples, seed).map_err(runtime)?;
            print_json(&serde_json::json!({
                "enumeration": report,
                "monte_carlo": check,
            }));
            if report.gap <= 1e-10 && check.z_score.abs() < 3.0 {
                Ok(())
            } else {
                Err(CliError::VerificationFailed(format!(
                    "gap {:.3e}, |z| {:.2}",
                    report.gap,
                    check.z_score.abs()
                )))
            }
        }
        VerifyCommand::Coverage {
            instance,
            replications,
            samples,
            delta,
            seed,
        } => {
            let inst = instance_or_fail(&instance)?;
            if !(delta > 0.0 && delta < 1.0) {
                return Err(CliError::Validation(format!(
                    "delta must lie in (0, 1), got {delta}"
                )));
            }
            let report =
                coverage_experiment(&inst, replications, samples, delta, seed).map_err(runtime)?;
            print_json(&report);
            if report.covered_fraction >= 1.0 - delta {
                Ok(())
            } else {
                Err(CliError::VerificationFailed(format!(
                    "coverage {:.4} below {:.4}",
                    report.covered_fraction,
                    1.0 - delta
                )))
            }
        }
        VerifyCommand::Decomposition {
            instance,
            samples,
            seed,
        } => {
            let inst = instance_or_fail(&instance)?;
            let report = decomposition_consistency(&inst, samples, seed).map_err(runtime)?;
            print_json(&report);
            if report.pass {
                Ok(())
            } else {
                Err(CliError::VerificationFailed(
                    "argmax entity tokens disagree".into(),
                ))
            }
        }
    }
}

fn save_graph(graph: &KnowledgeGraph, dir: &Path) -> Result<(), CliError> {
    save_triples(
        graph,
        &dir.join("triples.tsv"),
        &dir.join("entities.tsv"),
        &dir.join("relations.tsv"),
    )
    .map_err(runtime)
}
