//! `ans`: generate problems, train the imitation policy, run and summarize
//! experiments, and time policies.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ans_core::dagger::{dagger_train, DaggerConfig};
use ans_core::harness::{
    self, bench_time, build_toy, cumulative_diff, load_policies, read_runs_csv, summarize, toy_demo, write_json,
    write_run_outputs, write_timing_csv, write_toy_outputs, BenchConfig, ItemError, RunConfig, TOY_BUDGETS,
};
use ans_core::knn_model::ModelParams;
use ans_core::neighbors::{Backend, NeighborIndex};
use ans_core::policynet::{random_gradient_checks, PolicyNet};
use ans_core::synthgen::{generate_seeded, GenConfig};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "ans", version, about = "Budget-aware active search with a learned ENS imitation policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed; overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic problems (manifest, CSV and neighbor index).
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of problems; overrides the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the policy network by imitating ENS.
    TrainDagger {
        #[command(flatten)]
        common: Common,
    },
    /// Run policies on problems and write runs.csv and summary.json.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute the summary (and cumulative differences) from runs.csv.
    Summarize {
        #[command(flatten)]
        common: Common,
        /// runs.csv to read; overrides the config.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Score the pinned toy at several budgets.
    ToyDemo {
        #[command(flatten)]
        common: Common,
        /// Policy network to score alongside ENS.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Time policies on generated problems of several sizes.
    BenchTime {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients of the network.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GenerateConfig {
    generator: GenConfig,
    count: usize,
    /// Write a neighbor index with this many neighbors per point (0 = none).
    index_k: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            generator: GenConfig::default(),
            count: 1,
            index_k: 99,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct SummarizeConfig {
    runs: Option<PathBuf>,
    /// Pairs (a, b) for which to write the curve of mean u_a(t) - u_b(t).
    cumulative: Vec<(String, String)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ToyConfig {
    seed: u64,
    budgets: Vec<usize>,
    model: ModelParams,
    model_path: Option<PathBuf>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 0,
            budgets: TOY_BUDGETS.to_vec(),
            model: ModelParams::default(),
            model_path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GradcheckConfig {
    seed: u64,
    configs: usize,
    step: f64,
    tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            configs: 20,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Outcome of a subcommand: per-item failures make the exit status nonzero.
struct Outcome {
    errors: Vec<ItemError>,
}

impl Outcome {
    fn ok() -> Self {
        Outcome { errors: Vec::new() }
    }
}

fn generate(common: &Common, count: Option<usize>) -> anyhow::Result<Outcome> {
    let mut cfg: GenerateConfig = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.generator.seed = seed;
    }
    if let Some(c) = count {
        cfg.count = c;
    }
    fs::create_dir_all(&common.out)?;
    let mut out = Outcome::ok();
    for slot in 0..cfg.count as u64 {
        let item = format!("problem {slot}");
        let result = (|| -> anyhow::Result<()> {
            let g = generate_seeded(&cfg.generator, slot)?;
            let stem = g.problem.name().to_string();
            let manifest = g.problem.save(&common.out, &stem)?;
            write_json(common.out.join(format!("{stem}.meta.json")), &g.meta)?;
            if cfg.index_k > 0 {
                let k = cfg.index_k.min(g.problem.len() - 1);
                let index = NeighborIndex::for_problem(&g.problem, k, Backend::Exact, slot)?;
                index.save(manifest.with_extension("idx"))?;
            }
            log::info!("wrote {} ({} points)", manifest.display(), g.problem.len());
            Ok(())
        })();
        if let Err(e) = result {
            out.errors.push(ItemError {
                item,
                error: format!("{e:#}"),
            });
        }
    }
    Ok(out)
}

fn train_dagger(common: &Common) -> anyhow::Result<Outcome> {
    let mut cfg: DaggerConfig = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&common.out)?;
    let outcome = dagger_train(&cfg)?;
    outcome.net.save(common.out.join("model.bin"))?;
    outcome.dataset.write_jsonl(common.out.join("dataset.jsonl"))?;
    #[derive(Serialize)]
    struct Report<'a> {
        config: &'a DaggerConfig,
        best_iteration: usize,
        expert_validation_utilities: &'a [usize],
        iterations: &'a [ans_core::dagger::IterationReport],
    }
    write_json(
        common.out.join("dagger_report.json"),
        &Report {
            config: &cfg,
            best_iteration: outcome.best_iteration,
            expert_validation_utilities: &outcome.expert_validation_utilities,
            iterations: &outcome.reports,
        },
    )?;
    let mut w = csv::Writer::from_path(common.out.join("dagger_report.csv"))?;
    w.write_record(["iteration", "dataset_size", "final_loss", "mean_validation_utility"])?;
    for r in &outcome.reports {
        w.write_record([
            r.iteration.to_string(),
            r.dataset_size.to_string(),
            r.final_loss.to_string(),
            r.mean_validation_utility.to_string(),
        ])?;
    }
    w.flush()?;
    println!(
        "selected iteration {} of {}; model written to {}",
        outcome.best_iteration,
        outcome.reports.len(),
        common.out.join("model.bin").display()
    );
    Ok(Outcome::ok())
}

fn run(common: &Common) -> anyhow::Result<Outcome> {
    let mut cfg: RunConfig = read_config(common.config.as_deref())?;
    if common.config.is_none() {
        bail!("run needs --config with problems and policies");
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let output = harness::run(&cfg)?;
    let summary = write_run_outputs(&common.out, &output)?;
    for row in &summary.rows {
        println!("{:<16} {:<16} {:8.2} ± {:.2}", row.set, row.policy, row.mean_utility, row.standard_error);
    }
    Ok(Outcome { errors: output.errors })
}

fn summarize_cmd(common: &Common, runs: Option<PathBuf>) -> anyhow::Result<Outcome> {
    let cfg: SummarizeConfig = read_config(common.config.as_deref())?;
    let path = runs
        .or(cfg.runs.clone())
        .unwrap_or_else(|| common.out.join("runs.csv"));
    let results = read_runs_csv(&path).with_context(|| format!("reading {}", path.display()))?;
    fs::create_dir_all(&common.out)?;
    let summary = summarize(&results);
    write_json(common.out.join("summary.json"), &summary)?;
    let mut out = Outcome::ok();
    for (a, b) in &cfg.cumulative {
        match cumulative_diff(&results, a, b) {
            Ok(curve) => {
                let file = common.out.join(format!("cumulative_{a}_vs_{b}.csv"));
                let mut w = csv::Writer::from_path(file)?;
                w.write_record(["t", "mean_difference", "standard_error"])?;
                for (t, (m, s)) in curve.mean.iter().zip(&curve.standard_error).enumerate() {
                    w.write_record([t.to_string(), m.to_string(), s.to_string()])?;
                }
                w.flush()?;
            }
            Err(e) => out.errors.push(ItemError {
                item: format!("cumulative {a} vs {b}"),
                error: e.to_string(),
            }),
        }
    }
    for row in &summary.rows {
        println!("{:<16} {:<16} {:8.2} ± {:.2}", row.set, row.policy, row.mean_utility, row.standard_error);
    }
    Ok(out)
}

fn toy(common: &Common, model: Option<PathBuf>) -> anyhow::Result<Outcome> {
    let mut cfg: ToyConfig = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let model = model.or(cfg.model_path.clone());
    let net = match &model {
        Some(p) => Some(PolicyNet::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let feature_k = cfg.budgets.iter().copied().max().unwrap_or(1).saturating_sub(1);
    let toy = build_toy(cfg.seed, cfg.model, feature_k)?;
    let report = toy_demo(&toy, &cfg.budgets, net.as_ref())?;
    write_toy_outputs(&common.out, &toy, &report)?;
    for b in &report.budgets {
        let learned = b.learned.as_ref().map(|l| format!(" learned {:?}", l.group)).unwrap_or_default();
        println!("budget {:>3}: one-step {:?} ens {:?}{learned}", b.budget, b.one_step.group, b.ens.group);
    }
    Ok(Outcome::ok())
}

fn bench(common: &Common) -> anyhow::Result<Outcome> {
    let mut cfg: BenchConfig = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let (policies, mut errors) = load_policies(&cfg.policies);
    let (rows, bench_errors) = bench_time(&cfg, &policies)?;
    errors.extend(bench_errors);
    fs::create_dir_all(&common.out)?;
    write_timing_csv(common.out.join("timing.csv"), &rows)?;
    write_json(common.out.join("timing.json"), &rows)?;
    for r in &rows {
        println!("{:<16} n={:<7} median {:.3e} s/iter", r.policy, r.n, r.median_seconds);
    }
    Ok(Outcome { errors })
}

fn gradcheck(common: &Common) -> anyhow::Result<Outcome> {
    let mut cfg: GradcheckConfig = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let checks = random_gradient_checks(cfg.seed, cfg.configs, cfg.step)?;
    fs::create_dir_all(&common.out)?;
    write_json(common.out.join("gradcheck.json"), &checks)?;
    let mut out = Outcome::ok();
    for (i, c) in checks.iter().enumerate() {
        println!(
            "config {i:>2}: max relative error {:.3e} ({} checked, {} skipped at kinks)",
            c.max_rel_error, c.checked, c.skipped
        );
        if !(c.max_rel_error <= cfg.tolerance) {
            out.errors.push(ItemError {
                item: format!("config {i}"),
                error: format!("relative error {:.3e} exceeds {:.1e}", c.max_rel_error, cfg.tolerance),
            });
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common, count } => generate(&common, count),
        Command::TrainDagger { common } => train_dagger(&common),
        Command::Run { common } => run(&common),
        Command::Summarize { common, runs } => summarize_cmd(&common, runs),
        Command::ToyDemo { common, model } => toy(&common, model),
        Command::BenchTime { common } => bench(&common),
        Command::Gradcheck { common } => gradcheck(&common),
    };
    match result {
        Ok(out) if out.errors.is_empty() => ExitCode::SUCCESS,
        Ok(out) => {
            for e in &out.errors {
                eprintln!("error: {}: {}", e.item, e.error);
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
