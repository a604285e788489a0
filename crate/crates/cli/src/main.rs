//! `relprune`: build fixtures, run pruning sweeps, search composites, and
//! aggregate reports.
//!
//! Exit codes: 0 success, 1 internal error, 2 user or configuration error.
//! Failures print one JSON line `{"error": ..., "exit": ...}` on stderr.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relprune::dataset::Dataset;
use relprune::fixtures::{make_fixture, FixtureKind};
use relprune::graph::{restrict_outputs, ClassRestriction, ComponentKind, Graph, Op};
use relprune::nnix::load_model_from;
use relprune::prune::{component_relevance, rank_components, ref_count_csv, ref_count_study, ReferenceSet, SeededSweep, SweepConfig};
use relprune::report::{flow_csv, heatmap_drift, relevance_flow};
use relprune::search::{grid_search, hybrid_search, BayesConfig, SearchLog, SearchSpace, SpaceSpec, SweepEvaluator};
use relprune::Error;
use serde::Serialize;

use config::{RunConfig, RunFlags};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("cannot write `{path}`: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 2,
            CliError::Write { .. } => 1,
            CliError::Core(e) => match e {
                Error::InvalidArgument(_)
                | Error::Format(_)
                | Error::Dataset(_)
                | Error::MissingComponentKind(_)
                | Error::UnknownPreset(_)
                | Error::Json(_)
                | Error::Io(_) => 2,
                _ => 1,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "relprune", version, about = "Attribution-based structured pruning")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a self-generated model, datasets and manifest to a directory.
    MakeFixture {
        /// planted-cnn, planted-vit, trained-mlp or trained-cnn
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score, rank and prune components over a rate schedule.
    Prune(RunFlags),
    /// Search rule composites for the highest A_PR.
    Search {
        #[command(flatten)]
        run: RunFlags,
        /// Search space as inline JSON or a file (default: the standard space).
        #[arg(long)]
        space: Option<String>,
        /// Bayesian-phase evaluations (default: a quarter of the space).
        #[arg(long)]
        budget: Option<usize>,
        /// Random configurations before the surrogate takes over (default: 10).
        #[arg(long)]
        init: Option<usize>,
        /// Best records whose choices span the reduced grid (default: 5).
        #[arg(long)]
        top_k: Option<usize>,
        /// Evaluate the full grid instead.
        #[arg(long)]
        grid: bool,
    },
    /// Aggregate relevance flow, heatmap drift and reference-count CSVs for a prune run.
    Report {
        /// Directory written by `prune`.
        #[arg(long)]
        run: PathBuf,
        /// Reference counts per class for the study.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ref_counts: Vec<usize>,
        /// Evaluation samples explained for heatmap drift.
        #[arg(long, default_value_t = 8)]
        drift_samples: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            return fail(&CliError::User(format!("cannot set up {j} workers: {e}")));
        }
    }
    let result = match cli.command {
        Command::MakeFixture { kind, seed, out } => cmd_make_fixture(&kind, seed, &out),
        Command::Prune(flags) => RunConfig::load(&flags).and_then(|c| cmd_prune(&c)),
        Command::Search { run, space, budget, init, top_k, grid } => {
            RunConfig::load(&run).and_then(|c| cmd_search(&c, space.as_deref(), budget, init, top_k, grid))
        }
        Command::Report { run, ref_counts, drift_samples } => cmd_report(&run, &ref_counts, drift_samples),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let code = e.exit_code();
    eprintln!("{}", serde_json::json!({ "error": e.to_string(), "exit": code }));
    ExitCode::from(code)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Write { path: dir.to_path_buf(), source })
}

fn cmd_make_fixture(kind: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    let kind: FixtureKind = kind.parse()?;
    let fixture = make_fixture(kind, seed)?;
    create_dir(out)?;
    fixture.write(out)?;
    println!("{}", serde_json::to_string(&fixture.manifest).map_err(Error::from)?);
    Ok(())
}

/// Model and datasets of a run, with the class restriction applied.
struct Loaded {
    graph: Graph,
    pool: Dataset,
    eval: Dataset,
    kind: ComponentKind,
}

fn default_kind(graph: &Graph) -> ComponentKind {
    let has = |f: fn(&Op) -> bool| graph.layers().iter().any(|l| f(&l.op));
    if has(|op| matches!(op, Op::Attention(_))) {
        ComponentKind::AttentionHead
    } else if has(|op| matches!(op, Op::Conv2d(_))) {
        ComponentKind::ConvFilter
    } else {
        ComponentKind::LinearNeuron
    }
}

fn load(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let mut graph = load_model_from(cfg.model()?)?;
    let mut pool = Dataset::read_dset(cfg.data()?)?;
    let mut eval = Dataset::read_dset(cfg.eval()?)?;
    if let Some(classes) = &cfg.classes {
        let r = ClassRestriction::new(classes.clone(), graph.num_classes())?;
        graph = restrict_outputs(&graph, &r)?;
        pool = pool.restrict(&r);
        eval = eval.restrict(&r);
    }
    if pool.is_empty() || eval.is_empty() {
        return Err(CliError::User("no samples left after the class restriction".into()));
    }
    let kind = cfg.target()?.unwrap_or_else(|| default_kind(&graph));
    Ok(Loaded { graph, pool, eval, kind })
}

#[derive(Serialize)]
struct RankedComponent {
    rank: usize,
    id: usize,
    layer: String,
    index: usize,
    score: f64,
}

fn cmd_prune(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load(cfg)?;
    let out = cfg.out()?;
    let attributor = cfg.attributor()?.fit_to(&data.graph);
    let sweep = SweepConfig::new(cfg.steps(), data.kind);
    let run = SeededSweep {
        graph: &data.graph,
        pool: &data.pool,
        eval: &data.eval,
        attributor: &attributor,
        sweep,
        n_ref: cfg.n_ref(),
        master_seed: cfg.master_seed(),
        seeds: cfg.seeds(),
    };
    let result = run.run()?;

    // ranking from the first seed's reference set
    let first = cfg.seeds()[0];
    let refs = ReferenceSet::draw(&data.pool, cfg.n_ref(), cfg.master_seed(), first)?;
    let scores = component_relevance(&data.graph, &refs, &attributor.reseeded_for(cfg.master_seed(), first), data.kind)?;
    let ranking: Vec<RankedComponent> = rank_components(&scores)
        .into_iter()
        .enumerate()
        .map(|(rank, id)| {
            let c = &scores.components[id];
            RankedComponent { rank, id, layer: c.layer_id.clone(), index: c.index, score: scores.scores[id] }
        })
        .collect();

    create_dir(out)?;
    write(&out.join("sweep.csv"), &result.to_csv())?;
    write(&out.join("ranking.json"), &(serde_json::to_string_pretty(&ranking).map_err(Error::from)? + "\n"))?;
    write(&out.join("run.json"), &(serde_json::to_string_pretty(cfg).map_err(Error::from)? + "\n"))?;
    println!(
        "{}",
        serde_json::json!({
            "method": result.method,
            "composite": result.composite_id,
            "a_pr": result.a_pr,
            "a_pr_sem": result.a_pr_sem,
            "top_pr": result.top_pr,
            "seeds": result.seed_count(),
        })
    );
    Ok(())
}

fn cmd_search(
    cfg: &RunConfig,
    space: Option<&str>,
    budget: Option<usize>,
    init: Option<usize>,
    top_k: Option<usize>,
    grid: bool,
) -> Result<(), CliError> {
    let data = load(cfg)?;
    let out = cfg.out()?;
    let space = match space {
        None => SearchSpace::for_graph(&data.graph),
        Some(text) => {
            let text = if text.trim_start().starts_with('{') {
                text.to_string()
            } else {
                std::fs::read_to_string(text).map_err(|e| CliError::User(format!("cannot read space `{text}`: {e}")))?
            };
            let spec: SpaceSpec =
                serde_json::from_str(&text).map_err(|e| CliError::User(format!("invalid search space: {e}")))?;
            SearchSpace::from_spec(&spec)?
        }
    };
    if data.graph.contains_softmax() != !space.softmax().is_empty() {
        return Err(CliError::User("search space softmax handlers must be given exactly when the model has attention".into()));
    }
    let evaluator = SweepEvaluator {
        graph: &data.graph,
        pool: &data.pool,
        eval: &data.eval,
        sweep: SweepConfig::new(cfg.steps(), data.kind),
        n_ref: cfg.n_ref(),
        master_seed: cfg.master_seed(),
        seeds: cfg.seeds(),
    };
    create_dir(out)?;
    let mut log = SearchLog::open(&out.join("search.jsonl"))?;
    let resumed = log.len();
    let mut bayes = BayesConfig::for_space(&space, cfg.master_seed());
    if let Some(b) = budget {
        bayes.budget = b;
    }
    if let Some(i) = init {
        bayes.init = i;
    }
    if let Some(k) = top_k {
        bayes.top_k = k;
    }
    let (outcome, reduced, reduction) = if grid {
        (grid_search(&space, &evaluator, Some(&mut log))?, space.size(), 0.0)
    } else {
        let h = hybrid_search(&space, &evaluator, &bayes, Some(&mut log))?;
        (h.outcome, h.reduced.size(), h.reduction)
    };
    let (best_index, best) = &outcome.best;
    write(&out.join("best_composite.json"), &(best.composite.to_json() + "\n"))?;
    let summary = serde_json::json!({
        "best": best.label,
        "best_index": best_index,
        "a_pr": best.a_pr,
        "space_size": space.size(),
        "reduced_size": reduced,
        "reduction": reduction,
        "evaluations": outcome.evaluations(),
        "evaluator_calls": outcome.calls,
        "resumed_records": resumed,
        "failures": outcome.failures().count(),
    });
    write(&out.join("search_summary.json"), &(serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n"))?;
    println!("{summary}");
    Ok(())
}

fn cmd_report(run_dir: &Path, ref_counts: &[usize], drift_samples: usize) -> Result<(), CliError> {
    let run_file = run_dir.join("run.json");
    if !run_file.exists() {
        return Err(CliError::User(format!("no prune run in `{}` (run.json missing)", run_dir.display())));
    }
    let text = std::fs::read_to_string(&run_file).map_err(Error::from)?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::User(format!("invalid run.json: {e}")))?;
    let data = load(&cfg)?;
    let attributor = cfg.attributor()?.fit_to(&data.graph);
    let explain = cfg.composite()?.fit_to(&data.graph);
    let first = cfg.seeds()[0];
    let refs = ReferenceSet::draw(&data.pool, cfg.n_ref(), cfg.master_seed(), first)?;
    let scores = component_relevance(&data.graph, &refs, &attributor.reseeded_for(cfg.master_seed(), first), data.kind)?;
    write(&run_dir.join("relevance_flow.csv"), &flow_csv(&relevance_flow(&scores)))?;

    let sweep = SweepConfig::new(cfg.steps(), data.kind);
    sweep.validate()?;
    let inputs: Vec<_> = (0..data.eval.len().min(drift_samples.max(1)))
        .map(|i| {
            let (x, y) = data.eval.get(i);
            (x.clone(), y)
        })
        .collect();
    let drift = heatmap_drift(&data.graph, &scores, &sweep.rates(), &inputs, &explain)?;
    write(&run_dir.join("heatmap_drift.csv"), &drift.to_csv())?;

    let available = data.pool.by_class().values().map(Vec::len).min().unwrap_or(0);
    let counts: Vec<usize> = ref_counts.iter().copied().filter(|&c| c >= 1 && c <= available).collect();
    if counts.is_empty() {
        return Err(CliError::User(format!("no usable reference count (pool has {available} samples per class)")));
    }
    let base = SeededSweep {
        graph: &data.graph,
        pool: &data.pool,
        eval: &data.eval,
        attributor: &attributor,
        sweep,
        n_ref: counts[0],
        master_seed: cfg.master_seed(),
        seeds: cfg.seeds(),
    };
    write(&run_dir.join("ref_count.csv"), &ref_count_csv(&ref_count_study(&base, &counts)?))?;
    println!(
        "{}",
        serde_json::json!({
            "relevance_flow": "relevance_flow.csv",
            "heatmap_drift": "heatmap_drift.csv",
            "ref_count": "ref_count.csv",
            "drift_pearson": drift.pearson,
        })
    );
    Ok(())
}
