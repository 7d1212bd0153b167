//! Wiring for running a policy on a problem: the neighbor indices a problem
//! needs, a live episode, and the per-step loop.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn_model::{ModelParams, PosteriorModel};
use crate::neighbors::{default_n_lists, default_n_probe, Backend, NeighborIndex};
use crate::policies::{Policy, SearchView};
use crate::problem::{new_episode, step, EpisodeState, LabelOracle, PolicyDecision, SearchProblem};

/// Which neighbor search to use when indexing a problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IndexConfig {
    /// Exact up to `AUTO_EXACT_LIMIT` points, IVF with defaults above.
    #[default]
    Auto,
    Exact,
    Ivf {
        #[serde(default)]
        n_lists: Option<usize>,
        #[serde(default)]
        n_probe: Option<usize>,
    },
}

pub const AUTO_EXACT_LIMIT: usize = 20_000;

impl IndexConfig {
    pub fn backend_for(&self, n: usize) -> Backend {
        let ivf = |n_lists: Option<usize>, n_probe: Option<usize>| {
            let n_lists = n_lists.unwrap_or_else(|| default_n_lists(n));
            Backend::Ivf {
                n_lists,
                n_probe: n_probe.unwrap_or_else(|| default_n_probe(n_lists)),
            }
        };
        match *self {
            IndexConfig::Exact => Backend::Exact,
            IndexConfig::Auto if n <= AUTO_EXACT_LIMIT => Backend::Exact,
            IndexConfig::Auto => ivf(None, None),
            IndexConfig::Ivf { n_lists, n_probe } => ivf(n_lists, n_probe),
        }
    }
}

/// A problem together with its neighbor indices.
///
/// The posterior uses the first `params.k` neighbors of every point; the
/// featurizer needs up to `T - 1` unlabeled neighbors, so its lists are as
/// long as `max(params.k, feature_k)`.
#[derive(Debug, Clone)]
pub struct ProblemContext {
    pub problem: Arc<SearchProblem>,
    pub model_index: Arc<NeighborIndex>,
    pub feature_index: Arc<NeighborIndex>,
    pub params: ModelParams,
}

impl ProblemContext {
    pub fn build(
        problem: Arc<SearchProblem>,
        params: ModelParams,
        feature_k: usize,
        index: IndexConfig,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        let backend = index.backend_for(problem.len());
        let full = NeighborIndex::for_problem(&problem, params.k.max(feature_k), backend, seed)?;
        Self::from_index(problem, full, params)
    }

    /// Uses an already built (for example deserialized) index.
    pub fn from_index(problem: Arc<SearchProblem>, full: NeighborIndex, params: ModelParams) -> Result<Self> {
        params.validate()?;
        if full.len() != problem.len() {
            return Err(Error::Shape(format!(
                "index covers {} points, problem has {}",
                full.len(),
                problem.len()
            )));
        }
        let model_index = Arc::new(full.truncated(params.k)?);
        Ok(ProblemContext {
            problem,
            model_index,
            feature_index: Arc::new(full),
            params,
        })
    }

    pub fn fresh_model(&self) -> PosteriorModel {
        PosteriorModel::new(Arc::clone(&self.model_index), self.params.prior, self.params.pseudocount)
            .expect("parameters validated at construction")
    }

    pub fn start(&self, seed: u64, budget: usize) -> Result<Episode> {
        Episode::start(self, seed, budget)
    }
}

/// A running search: state, oracle and posterior kept in lockstep.
#[derive(Debug, Clone)]
pub struct Episode {
    pub state: EpisodeState,
    pub oracle: LabelOracle,
    pub model: PosteriorModel,
    feature_index: Arc<NeighborIndex>,
}

impl Episode {
    pub fn start(ctx: &ProblemContext, seed: u64, budget: usize) -> Result<Self> {
        let (state, oracle) = new_episode(Arc::clone(&ctx.problem), seed, budget)?;
        let mut model = ctx.fresh_model();
        for &(i, y) in state.observed() {
            model.observe(i, y)?;
        }
        Ok(Episode {
            state,
            oracle,
            model,
            feature_index: Arc::clone(&ctx.feature_index),
        })
    }

    pub fn view(&self) -> SearchView<'_> {
        SearchView {
            model: &self.model,
            state: &self.state,
            feature_index: &self.feature_index,
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.remaining_budget() == 0
    }

    pub fn query(&mut self, index: usize) -> Result<bool> {
        let y = step(&mut self.state, &mut self.oracle, index)?;
        self.model.observe(index, y)?;
        Ok(y)
    }

    pub fn decide(&self, policy: &mut dyn Policy) -> Result<PolicyDecision> {
        policy.decide(&self.view())
    }
}

/// What one search produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub queries: Vec<usize>,
    /// Targets found by budgeted queries after `t` steps, `t = 0..=T`.
    pub trajectory: Vec<usize>,
    /// Wall time of each iteration (decision plus label update).
    pub iter_seconds: Vec<f64>,
}

impl EpisodeTrace {
    pub fn final_utility(&self) -> usize {
        *self.trajectory.last().unwrap_or(&0)
    }
}

pub fn run_episode(ctx: &ProblemContext, policy: &mut dyn Policy, budget: usize, seed: u64) -> Result<EpisodeTrace> {
    let mut episode = Episode::start(ctx, seed, budget)?;
    let mut trace = EpisodeTrace {
        queries: Vec::with_capacity(budget),
        trajectory: Vec::with_capacity(budget + 1),
        iter_seconds: Vec::with_capacity(budget),
    };
    trace.trajectory.push(0);
    while !episode.is_done() {
        let started = Instant::now();
        let decision = episode.decide(policy)?;
        episode.query(decision.chosen_index)?;
        trace.iter_seconds.push(started.elapsed().as_secs_f64());
        trace.queries.push(decision.chosen_index);
        trace.trajectory.push(episode.state.targets_found());
    }
    Ok(trace)
}
