//! Experiment runner: paired multi-repeat evaluation, summaries with paired
//! t-tests, cumulative-difference curves, timing, and the small pinned
//! toy used to show budget awareness.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::featurize;
use crate::knn_model::{ModelParams, PosteriorModel};
use crate::neighbors::NeighborIndex;
use crate::policies::{ens_scores, learned_policy, one_step, EnsBackend, LearnedPolicy, Policy, PolicyKind};
use crate::policynet::PolicyNet;
use crate::problem::{EpisodeState, SearchProblem, SimilarityConfig};
use crate::seeding;
use crate::session::{run_episode, IndexConfig, ProblemContext};
use crate::stats::{self, PairedTest};
use crate::synthgen::{self, GenConfig};

pub const DEFAULT_REPEATS: usize = 10;
pub const DEFAULT_BUDGET: usize = 100;
/// Significance level for the paired comparisons.
pub const ALPHA: f64 = 0.05;

/// Where evaluation problems come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProblemSource {
    /// A problem manifest; the set name defaults to the manifest stem. A
    /// neighbor index saved next to it with extension `idx` is reused.
    File {
        path: PathBuf,
        #[serde(default)]
        set: Option<String>,
    },
    /// `count` generated problems, slots `first_slot..`, of the stream seeded
    /// by `generator.seed`.
    Generated {
        #[serde(default)]
        generator: GenConfig,
        count: usize,
        #[serde(default)]
        first_slot: u64,
        #[serde(default)]
        set: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    /// Column label in outputs; defaults to the policy's own label.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(flatten)]
    pub kind: PolicyKind,
}

impl PolicySpec {
    pub fn new(kind: PolicyKind) -> Self {
        PolicySpec { name: None, kind }
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub problems: Vec<ProblemSource>,
    pub policies: Vec<PolicySpec>,
    pub repeats: usize,
    pub budget: usize,
    pub seed: u64,
    pub model: ModelParams,
    pub index: IndexConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problems: Vec::new(),
            policies: Vec::new(),
            repeats: DEFAULT_REPEATS,
            budget: DEFAULT_BUDGET,
            seed: 0,
            model: ModelParams::default(),
            index: IndexConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.problems.is_empty() || self.policies.is_empty() {
            return Err(Error::Config("need at least one problem source and one policy".into()));
        }
        self.model.validate()?;
        let mut names = Vec::new();
        for p in &self.policies {
            p.kind.validate(self.budget)?;
            let name = p.name();
            if names.contains(&name) {
                return Err(Error::Config(format!("duplicate policy name {name:?}")));
            }
            names.push(name);
        }
        Ok(())
    }
}

/// A failure confined to one problem, model or episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub item: String,
    pub error: String,
}

impl ItemError {
    fn new(item: impl Into<String>, error: impl ToString) -> Self {
        let e = ItemError {
            item: item.into(),
            error: error.to_string(),
        };
        warn!("{}: {}", e.item, e.error);
        e
    }
}

/// An indexed evaluation problem.
#[derive(Debug, Clone)]
pub struct LoadedProblem {
    pub set: String,
    pub ctx: ProblemContext,
}

impl LoadedProblem {
    pub fn key(&self) -> String {
        format!("{}/{}", self.set, self.ctx.problem.name())
    }
}

fn check_set_name(set: &str) -> Result<()> {
    if set.is_empty() || set.contains('/') {
        return Err(Error::Config(format!("set name {set:?} must be nonempty and contain no '/'")));
    }
    Ok(())
}

/// Loads and indexes every problem; failures are reported per item.
pub fn load_problems(config: &RunConfig) -> (Vec<LoadedProblem>, Vec<ItemError>) {
    let mut loaded = Vec::new();
    let mut errors = Vec::new();
    let feature_k = config.budget.saturating_sub(1);
    let mut index_seed = 0u64;
    let mut push = |set: String,
                    problem: Result<SearchProblem>,
                    index_file: Option<PathBuf>,
                    item: String,
                    loaded: &mut Vec<LoadedProblem>| {
        index_seed += 1;
        let built = problem.and_then(|p| {
            check_set_name(&set)?;
            if p.len() < config.budget + 2 {
                return Err(Error::BudgetOutOfRange {
                    budget: config.budget,
                    max: p.len().saturating_sub(2),
                });
            }
            if let Some(path) = index_file.filter(|f| f.exists()) {
                info!("{item}: using neighbor index {}", path.display());
                return ProblemContext::from_index(Arc::new(p), NeighborIndex::load(path)?, config.model);
            }
            ProblemContext::build(
                Arc::new(p),
                config.model,
                feature_k,
                config.index,
                seeding::derive(config.seed, seeding::KMEANS, index_seed),
            )
        });
        match built {
            Ok(ctx) => loaded.push(LoadedProblem { set, ctx }),
            Err(e) => errors.push(ItemError::new(item, e)),
        }
    };
    for source in &config.problems {
        match source {
            ProblemSource::File { path, set } => {
                let set = set.clone().unwrap_or_else(|| {
                    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "file".into())
                });
                push(
                    set,
                    SearchProblem::load(path),
                    Some(path.with_extension("idx")),
                    path.display().to_string(),
                    &mut loaded,
                );
            }
            ProblemSource::Generated {
                generator,
                count,
                first_slot,
                set,
            } => {
                let set = set.clone().unwrap_or_else(|| "synthetic".into());
                for slot in *first_slot..*first_slot + *count as u64 {
                    let problem = synthgen::generate_seeded(generator, slot).map(|g| g.problem);
                    push(set.clone(), problem, None, format!("{set}/generated slot {slot}"), &mut loaded);
                }
            }
        }
    }
    (loaded, errors)
}

/// How to build a fresh policy for each episode.
#[derive(Debug, Clone)]
pub enum PolicyFactory {
    Kind(PolicyKind),
    Net(Arc<PolicyNet>),
}

impl PolicyFactory {
    pub fn instantiate(&self, seed: u64) -> Result<Box<dyn Policy>> {
        match self {
            PolicyFactory::Kind(kind) => kind.instantiate(seed),
            PolicyFactory::Net(net) => Ok(Box::new(LearnedPolicy::new(Arc::clone(net)))),
        }
    }
}

/// Resolves specs into factories, loading each model file once.
pub fn load_policies(specs: &[PolicySpec]) -> (Vec<(String, PolicyFactory)>, Vec<ItemError>) {
    let mut cache: HashMap<PathBuf, Arc<PolicyNet>> = HashMap::new();
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for spec in specs {
        let factory = match &spec.kind {
            PolicyKind::Learned { model_path } => match cache.get(model_path) {
                Some(net) => PolicyFactory::Net(Arc::clone(net)),
                None => match PolicyNet::load(model_path) {
                    Ok(net) => {
                        let net = Arc::new(net);
                        cache.insert(model_path.clone(), Arc::clone(&net));
                        PolicyFactory::Net(net)
                    }
                    Err(e) => {
                        errors.push(ItemError::new(
                            format!("policy {} ({})", spec.name(), model_path.display()),
                            e,
                        ));
                        continue;
                    }
                },
            },
            kind => PolicyFactory::Kind(kind.clone()),
        };
        out.push((spec.name(), factory));
    }
    (out, errors)
}

/// One (problem, policy, repeat) search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub set: String,
    pub problem: String,
    pub policy: String,
    pub repeat: usize,
    /// Targets found after `t` queries, `t = 0..=T`.
    pub trajectory: Vec<usize>,
    /// Seconds spent on iteration `t = 1..=T`.
    pub iter_seconds: Vec<f64>,
}

impl EpisodeResult {
    pub fn final_utility(&self) -> usize {
        *self.trajectory.last().unwrap_or(&0)
    }

    fn problem_key(&self) -> String {
        format!("{}/{}", self.set, self.problem)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub results: Vec<EpisodeResult>,
    pub errors: Vec<ItemError>,
}

/// Episode seed of repeat `repeat` on problem number `problem`; shared by
/// every policy so comparisons are paired.
pub fn episode_seed(master: u64, problem: usize, repeat: usize) -> u64 {
    seeding::derive(seeding::derive(master, seeding::EPISODE, problem as u64), seeding::EPISODE, repeat as u64)
}

/// Runs every policy `repeats` times on every problem.
pub fn evaluate(
    problems: &[LoadedProblem],
    policies: &[(String, PolicyFactory)],
    repeats: usize,
    budget: usize,
    seed: u64,
) -> RunOutput {
    let mut out = RunOutput::default();
    for (p, lp) in problems.iter().enumerate() {
        for (name, factory) in policies {
            for repeat in 0..repeats {
                let es = episode_seed(seed, p, repeat);
                let trace = factory
                    .instantiate(es)
                    .and_then(|mut policy| run_episode(&lp.ctx, policy.as_mut(), budget, es));
                match trace {
                    Ok(trace) => out.results.push(EpisodeResult {
                        set: lp.set.clone(),
                        problem: lp.ctx.problem.name().to_string(),
                        policy: name.clone(),
                        repeat,
                        trajectory: trace.trajectory,
                        iter_seconds: trace.iter_seconds,
                    }),
                    Err(e) => out
                        .errors
                        .push(ItemError::new(format!("{} {name} repeat {repeat}", lp.key()), e)),
                }
            }
            info!("{} {name}: done", lp.key());
        }
    }
    out
}

pub fn run(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let (problems, mut errors) = load_problems(config);
    let (policies, policy_errors) = load_policies(&config.policies);
    errors.extend(policy_errors);
    let mut out = evaluate(&problems, &policies, config.repeats, config.budget, config.seed);
    errors.append(&mut out.errors);
    out.errors = errors;
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct RunRow {
    problem: String,
    policy: String,
    repeat: usize,
    t: usize,
    utility: usize,
    iter_seconds: Option<f64>,
}

pub fn write_runs_csv(path: impl AsRef<Path>, results: &[EpisodeResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        for (t, &utility) in r.trajectory.iter().enumerate() {
            w.serialize(RunRow {
                problem: r.problem_key(),
                policy: r.policy.clone(),
                repeat: r.repeat,
                t,
                utility,
                iter_seconds: if t == 0 { None } else { r.iter_seconds.get(t - 1).copied() },
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_runs_csv(path: impl AsRef<Path>) -> Result<Vec<EpisodeResult>> {
    let path = path.as_ref();
    let mut results: Vec<EpisodeResult> = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let row: RunRow = row?;
        let (set, problem) = row
            .problem
            .split_once('/')
            .ok_or_else(|| Error::format(path, format!("problem {:?} lacks a set prefix", row.problem)))?;
        let continues = results.last().is_some_and(|r| {
            r.set == set && r.problem == problem && r.policy == row.policy && r.repeat == row.repeat
        });
        if !continues {
            if row.t != 0 {
                return Err(Error::format(path, format!("trajectory of {} starts at t = {}", row.problem, row.t)));
            }
            results.push(EpisodeResult {
                set: set.to_string(),
                problem: problem.to_string(),
                policy: row.policy.clone(),
                repeat: row.repeat,
                trajectory: Vec::new(),
                iter_seconds: Vec::new(),
            });
        }
        let r = results.last_mut().expect("pushed above");
        if row.t != r.trajectory.len() {
            return Err(Error::format(path, format!("missing t = {} for {}", r.trajectory.len(), row.problem)));
        }
        r.trajectory.push(row.utility);
        if let Some(s) = row.iter_seconds {
            r.iter_seconds.push(s);
        }
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub set: String,
    pub policy: String,
    pub episodes: usize,
    pub mean_utility: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub set: String,
    pub a: String,
    pub b: String,
    pub test: PairedTest,
    /// `a` is not significantly worse than `b` at [`ALPHA`].
    pub a_not_worse: bool,
    pub b_not_worse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub comparisons: Vec<Comparison>,
}

impl Summary {
    pub fn row(&self, set: &str, policy: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.set == set && r.policy == policy)
    }

    pub fn comparison(&self, set: &str, a: &str, b: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.set == set && c.a == a && c.b == b)
    }
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

/// Final utilities of `policy` in `set`, keyed by (problem, repeat).
fn finals(results: &[EpisodeResult], set: &str, policy: &str) -> HashMap<(String, usize), f64> {
    results
        .iter()
        .filter(|r| r.set == set && r.policy == policy)
        .map(|r| ((r.problem.clone(), r.repeat), r.final_utility() as f64))
        .collect()
}

/// Mean and standard error per (set, policy), plus a paired t-test for every
/// pair of policies within a set.
pub fn summarize(results: &[EpisodeResult]) -> Summary {
    let sets = first_seen(results.iter().map(|r| r.set.as_str()));
    let mut rows = Vec::new();
    let mut comparisons = Vec::new();
    for set in &sets {
        let policies = first_seen(results.iter().filter(|r| &r.set == set).map(|r| r.policy.as_str()));
        for policy in &policies {
            let v: Vec<f64> = results
                .iter()
                .filter(|r| &r.set == set && &r.policy == policy)
                .map(|r| r.final_utility() as f64)
                .collect();
            rows.push(SummaryRow {
                set: set.clone(),
                policy: policy.clone(),
                episodes: v.len(),
                mean_utility: stats::mean(&v),
                standard_error: stats::standard_error(&v),
            });
        }
        for (i, a) in policies.iter().enumerate() {
            let fa = finals(results, set, a);
            for b in &policies[i + 1..] {
                let fb = finals(results, set, b);
                let mut keys: Vec<&(String, usize)> = fa.keys().filter(|k| fb.contains_key(*k)).collect();
                if keys.len() != fa.len() || keys.len() != fb.len() {
                    warn!("{set}: {a} and {b} are not fully paired; comparing {} common episodes", keys.len());
                }
                keys.sort();
                let xa: Vec<f64> = keys.iter().map(|k| fa[*k]).collect();
                let xb: Vec<f64> = keys.iter().map(|k| fb[*k]).collect();
                if let Some(test) = stats::paired_t_test(&xa, &xb) {
                    let significant = test.p_value < ALPHA;
                    comparisons.push(Comparison {
                        set: set.clone(),
                        a: a.clone(),
                        b: b.clone(),
                        a_not_worse: !(significant && test.mean_difference < 0.0),
                        b_not_worse: !(significant && test.mean_difference > 0.0),
                        test,
                    });
                }
            }
        }
    }
    Summary { rows, comparisons }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeDiff {
    pub a: String,
    pub b: String,
    pub pairs: usize,
    /// Mean of `u_a(t) - u_b(t)` over paired episodes, `t = 0..=T`.
    pub mean: Vec<f64>,
    pub standard_error: Vec<f64>,
}

/// Per-iteration mean difference in targets found between two policies
/// over episodes paired by (set, problem, repeat).
pub fn cumulative_diff(results: &[EpisodeResult], a: &str, b: &str) -> Result<CumulativeDiff> {
    let index: HashMap<(String, String, usize), &EpisodeResult> = results
        .iter()
        .filter(|r| r.policy == b)
        .map(|r| ((r.set.clone(), r.problem.clone(), r.repeat), r))
        .collect();
    let mut diffs: Vec<Vec<f64>> = Vec::new();
    let mut matched = 0;
    for ra in results.iter().filter(|r| r.policy == a) {
        let key = (ra.set.clone(), ra.problem.clone(), ra.repeat);
        let rb = index
            .get(&key)
            .ok_or_else(|| Error::Unpaired(format!("{}/{} repeat {} has no {b} episode", key.0, key.1, key.2)))?;
        if ra.trajectory.len() != rb.trajectory.len() {
            return Err(Error::Unpaired(format!("{}/{} repeat {}: trajectory lengths differ", key.0, key.1, key.2)));
        }
        diffs.push(ra.trajectory.iter().zip(&rb.trajectory).map(|(x, y)| *x as f64 - *y as f64).collect());
        matched += 1;
    }
    if matched == 0 || matched != results.iter().filter(|r| r.policy == b).count() {
        return Err(Error::Unpaired(format!("{a} and {b} episodes do not pair up")));
    }
    let len = diffs[0].len();
    let column = |t: usize| diffs.iter().map(|d| d[t]).collect::<Vec<f64>>();
    Ok(CumulativeDiff {
        a: a.to_string(),
        b: b.to_string(),
        pairs: matched,
        mean: (0..len).map(|t| stats::mean(&column(t))).collect(),
        standard_error: (0..len).map(|t| stats::standard_error(&column(t))).collect(),
    })
}

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Writes `runs.csv`, `summary.json` and, if any, `errors.json`.
pub fn write_run_outputs(dir: impl AsRef<Path>, out: &RunOutput) -> Result<Summary> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_runs_csv(dir.join("runs.csv"), &out.results)?;
    let summary = summarize(&out.results);
    write_json(dir.join("summary.json"), &summary)?;
    if !out.errors.is_empty() {
        write_json(dir.join("errors.json"), &out.errors)?;
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Pinned toy

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyGroup {
    Uniform,
    Small,
    Medium,
    Large,
}

impl ToyGroup {
    pub fn prior(self) -> f64 {
        match self {
            ToyGroup::Uniform => 0.1,
            ToyGroup::Small => 0.9,
            ToyGroup::Medium => 0.3,
            ToyGroup::Large => 0.1,
        }
    }
}

/// Group sizes, centers and spreads of the toy, in the unit square.
pub const TOY_LAYOUT: [(ToyGroup, usize, [f64; 2], f64); 3] = [
    (ToyGroup::Small, 10, [0.5, 0.9], 0.02),
    (ToyGroup::Medium, 30, [0.9, 0.45], 0.04),
    (ToyGroup::Large, 100, [0.2, 0.2], 0.04),
];
pub const TOY_UNIFORM: usize = 100;
pub const TOY_LAMBDA: f64 = 0.05;
pub const TOY_BUDGETS: [usize; 3] = [10, 33, 100];

/// The toy: points, groups and pinned posterior probabilities.
#[derive(Debug, Clone)]
pub struct Toy {
    pub problem: Arc<SearchProblem>,
    pub groups: Vec<ToyGroup>,
    pub model: PosteriorModel,
    pub feature_index: Arc<NeighborIndex>,
}

pub fn build_toy(seed: u64, params: ModelParams, feature_k: usize) -> Result<Toy> {
    let mut rng = seeding::stream(seed, seeding::PROBLEMS, 0);
    let mut points = Vec::new();
    let mut groups = Vec::new();
    for _ in 0..TOY_UNIFORM {
        points.push(rng.random::<f64>());
        points.push(rng.random::<f64>());
        groups.push(ToyGroup::Uniform);
    }
    for (group, size, center, spread) in TOY_LAYOUT {
        for _ in 0..size {
            for c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                points.push(c + spread * z);
            }
            groups.push(group);
        }
    }
    let priors: Vec<f64> = groups.iter().map(|g| g.prior()).collect();
    // Labels are never revealed; the oracle only needs both classes present.
    let labels: Vec<bool> = priors.iter().map(|&p| p > 0.5).collect();
    let problem = Arc::new(SearchProblem::new("toy", 2, points, labels, SimilarityConfig::Rbf { lambda: TOY_LAMBDA })?);
    let full = Arc::new(NeighborIndex::for_problem(
        &problem,
        params.k.max(feature_k).min(problem.len() - 1),
        crate::neighbors::Backend::Exact,
        seed,
    )?);
    let model_index = Arc::new(full.truncated(params.k.min(problem.len() - 1))?);
    let model = PosteriorModel::with_priors(model_index, priors, params.pseudocount)?;
    Ok(Toy {
        problem,
        groups,
        model,
        feature_index: full,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyChoice {
    pub index: usize,
    pub group: ToyGroup,
    #[serde(skip)]
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBudget {
    pub budget: usize,
    pub one_step: ToyChoice,
    pub ens: ToyChoice,
    pub learned: Option<ToyChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub budgets: Vec<ToyBudget>,
}

fn toy_choice(toy: &Toy, scores: Vec<f64>, state: &EpisodeState) -> Result<ToyChoice> {
    let index = crate::policies::argmax_unlabeled(&scores, state)?;
    Ok(ToyChoice {
        index,
        group: toy.groups[index],
        scores,
    })
}

/// Scores every toy point at each remaining budget with one-step, naive ENS
/// and, if given, a learned network.
pub fn toy_demo(toy: &Toy, budgets: &[usize], net: Option<&PolicyNet>) -> Result<ToyReport> {
    let n = toy.problem.len();
    let mut out = Vec::new();
    for &budget in budgets {
        let state = EpisodeState::detached(n, budget);
        let one = one_step(&toy.model, &state)?;
        let ens = ens_scores(&toy.model, &state, EnsBackend::Naive, None)?;
        let learned = match net {
            Some(net) => {
                let features = featurize(&toy.model, &toy.feature_index, &state)?;
                let d = learned_policy(net, &features, &state)?;
                Some(toy_choice(toy, d.scores.unwrap_or_default(), &state)?)
            }
            None => None,
        };
        out.push(ToyBudget {
            budget,
            one_step: toy_choice(toy, one.scores.unwrap_or_else(|| toy.model.probs().to_vec()), &state)?,
            ens: toy_choice(toy, ens, &state)?,
            learned,
        });
    }
    Ok(ToyReport { budgets: out })
}

/// One CSV per budget (`toy_budget_<l>.csv`) plus `toy_summary.json`.
pub fn write_toy_outputs(dir: impl AsRef<Path>, toy: &Toy, report: &ToyReport) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for b in &report.budgets {
        let mut w = csv::Writer::from_path(dir.join(format!("toy_budget_{}.csv", b.budget)))?;
        let mut header = vec!["index", "x1", "x2", "group", "prob", "one_step_score", "ens_score"];
        if b.learned.is_some() {
            header.push("learned_score");
        }
        w.write_record(&header)?;
        for i in 0..toy.problem.len() {
            let p = toy.problem.point(i);
            let mut rec = vec![
                i.to_string(),
                format!("{:?}", p[0]),
                format!("{:?}", p[1]),
                format!("{:?}", toy.groups[i]).to_lowercase(),
                format!("{:?}", toy.model.prob(i)),
                format!("{:?}", b.one_step.scores[i]),
                format!("{:?}", b.ens.scores[i]),
            ];
            if let Some(l) = &b.learned {
                rec.push(format!("{:?}", l.scores[i]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    write_json(dir.join("toy_summary.json"), report)
}

// ---------------------------------------------------------------------------
// Timing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub policies: Vec<PolicySpec>,
    pub budget: usize,
    pub repeats: usize,
    pub seed: u64,
    pub generator: GenConfig,
    pub model: ModelParams,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![1000, 2000, 4000],
            policies: vec![
                PolicySpec::new(PolicyKind::OneStep),
                PolicySpec::new(PolicyKind::ens()),
            ],
            budget: DEFAULT_BUDGET,
            repeats: 1,
            seed: 0,
            generator: GenConfig {
                dim_min: 2,
                dim_max: 2,
                ..GenConfig::default()
            },
            model: ModelParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub policy: String,
    pub n: usize,
    pub episodes: usize,
    pub iterations: usize,
    pub median_seconds: f64,
    pub mean_seconds: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-iteration time of each policy on generated problems of each size.
/// Index construction is excluded.
pub fn bench_time(config: &BenchConfig, policies: &[(String, PolicyFactory)]) -> Result<(Vec<TimingRow>, Vec<ItemError>)> {
    if config.repeats == 0 || config.budget == 0 {
        return Err(Error::Config("timing needs positive repeats and budget".into()));
    }
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (s, &n) in config.sizes.iter().enumerate() {
        let mut rng = seeding::stream(config.seed, seeding::PROBLEMS, s as u64);
        let ctx = synthgen::generate_sized(&config.generator, n, &mut rng).and_then(|g| {
            ProblemContext::build(
                Arc::new(g.problem.renamed(format!("n{n}"))),
                config.model,
                config.budget.saturating_sub(1),
                IndexConfig::Auto,
                seeding::derive(config.seed, seeding::KMEANS, s as u64),
            )
        });
        let ctx = match ctx {
            Ok(c) => c,
            Err(e) => {
                errors.push(ItemError::new(format!("n = {n}"), e));
                continue;
            }
        };
        for (name, factory) in policies {
            let mut times = Vec::new();
            let mut episodes = 0;
            for repeat in 0..config.repeats {
                let es = episode_seed(config.seed, s, repeat);
                match factory
                    .instantiate(es)
                    .and_then(|mut p| run_episode(&ctx, p.as_mut(), config.budget, es))
                {
                    Ok(trace) => {
                        episodes += 1;
                        times.extend(trace.iter_seconds);
                    }
                    Err(e) => errors.push(ItemError::new(format!("n = {n} {name} repeat {repeat}"), e)),
                }
            }
            if episodes > 0 {
                let row = TimingRow {
                    policy: name.clone(),
                    n,
                    episodes,
                    iterations: times.len(),
                    median_seconds: median(&times),
                    mean_seconds: stats::mean(&times),
                };
                info!("n = {n} {name}: median {:.3e} s/iter", row.median_seconds);
                rows.push(row);
            }
        }
    }
    Ok((rows, errors))
}

pub fn write_timing_csv(path: impl AsRef<Path>, rows: &[TimingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(policy: &str, problem: &str, repeat: usize, trajectory: Vec<usize>) -> EpisodeResult {
        EpisodeResult {
            set: "s".into(),
            problem: problem.into(),
            policy: policy.into(),
            repeat,
            iter_seconds: vec![0.5; trajectory.len() - 1],
            trajectory,
        }
    }

    #[test]
    fn summary_statistics() {
        let finals_a = [3, 1, 2, 4, 0];
        let mut rs = Vec::new();
        for (r, &f) in finals_a.iter().enumerate() {
            rs.push(result("a", "p", r, vec![0, f]));
            rs.push(result("b", "p", r, vec![0, 1]));
        }
        let s = summarize(&rs);
        let row = s.row("s", "a").unwrap();
        assert_eq!(row.episodes, 5);
        assert_eq!(row.mean_utility, 2.0);
        assert!((row.standard_error - (2.5f64).sqrt() / 5f64.sqrt()).abs() < 1e-12);
        let c = s.comparison("s", "a", "b").unwrap();
        assert_eq!(c.test.mean_difference, 1.0);
        assert!(c.a_not_worse && c.b_not_worse);
    }

    #[test]
    fn identical_policies_compare_as_equal() {
        let rs: Vec<EpisodeResult> = (0..3)
            .flat_map(|r| [result("a", "p", r, vec![0, r, r + 1]), result("b", "p", r, vec![0, r, r + 1])])
            .collect();
        let c = summarize(&rs).comparisons[0].clone();
        assert_eq!(c.test.t, None);
        assert_eq!(c.test.p_value, 1.0);
        let d = cumulative_diff(&rs, "a", "b").unwrap();
        assert_eq!(d.mean, vec![0.0; 3]);
    }

    #[test]
    fn cumulative_diff_endpoints_match_summary() {
        let rs = vec![
            result("a", "p", 0, vec![0, 0, 2]),
            result("b", "p", 0, vec![0, 1, 1]),
            result("a", "p", 1, vec![0, 1, 3]),
            result("b", "p", 1, vec![0, 1, 2]),
        ];
        let d = cumulative_diff(&rs, "a", "b").unwrap();
        assert_eq!(d.mean, vec![0.0, -0.5, 1.0]);
        let s = summarize(&rs);
        assert_eq!(s.comparison("s", "a", "b").unwrap().test.mean_difference, d.mean[2]);
        assert!(matches!(
            cumulative_diff(&rs[..3], "a", "b"),
            Err(Error::Unpaired(_))
        ));
    }

    #[test]
    fn runs_csv_round_trip() {
        let rs = vec![result("a", "p", 0, vec![0, 1, 1]), result("b", "q", 2, vec![0, 0, 1])];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        write_runs_csv(&path, &rs).unwrap();
        let back = read_runs_csv(&path).unwrap();
        assert_eq!(back, rs);
        assert_eq!(summarize(&back), summarize(&rs));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn toy_probabilities_are_pinned() {
        let toy = build_toy(0, ModelParams::default(), 99).unwrap();
        assert_eq!(toy.problem.len(), 240);
        for (i, g) in toy.groups.iter().enumerate() {
            assert_eq!(toy.model.prob(i), g.prior());
        }
        let counts = |g: ToyGroup| toy.groups.iter().filter(|&&x| x == g).count();
        assert_eq!(
            [counts(ToyGroup::Uniform), counts(ToyGroup::Small), counts(ToyGroup::Medium), counts(ToyGroup::Large)],
            [100, 10, 30, 100]
        );
    }

    #[test]
    fn toy_one_step_always_takes_the_small_cluster() {
        let toy = build_toy(1, ModelParams::default(), 99).unwrap();
        let report = toy_demo(&toy, &TOY_BUDGETS, None).unwrap();
        for b in &report.budgets {
            assert_eq!(b.one_step.group, ToyGroup::Small);
        }
    }

    #[test]
    fn config_json() {
        let json = r#"{
            "problems": [{"kind": "generated", "count": 2, "set": "synth"}],
            "policies": [{"kind": "one_step"}, {"kind": "ens", "name": "expert"}, {"kind": "etc", "m": 10}],
            "repeats": 3
        }"#;
        let c: RunConfig = serde_json::from_str(json).unwrap();
        c.validate().unwrap();
        assert_eq!(c.budget, 100);
        assert_eq!(c.policies[1].name(), "expert");
        assert_eq!(c.policies[2].kind, PolicyKind::Etc { m: 10 });
        let dup = RunConfig {
            policies: vec![PolicySpec::new(PolicyKind::OneStep); 2],
            ..c
        };
        assert!(dup.validate().is_err());
    }
}
