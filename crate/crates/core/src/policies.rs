//! Search policies.
//!
//! Every policy picks an unlabeled point; score ties always go to the lowest
//! index. The stateless scoring rules are exposed as free functions and the
//! [`Policy`] trait wraps them for the episode runner.

use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{featurize, FeatureMatrix};
use crate::knn_model::{sorted_top_sum, PosteriorModel, Scratch, TopSumCache};
use crate::neighbors::NeighborIndex;
use crate::policynet::PolicyNet;
use crate::problem::{EpisodeState, PolicyDecision};
use crate::seeding;

/// What a policy may look at when deciding.
#[derive(Clone, Copy)]
pub struct SearchView<'a> {
    pub model: &'a PosteriorModel,
    pub state: &'a EpisodeState,
    /// Neighbor lists long enough for featurization (k >= T - 1 when possible).
    pub feature_index: &'a NeighborIndex,
}

pub trait Policy {
    fn decide(&mut self, view: &SearchView<'_>) -> Result<PolicyDecision>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsBackend {
    /// Re-derives every hypothetical posterior from scratch.
    Naive,
    /// Applies only reverse-neighbor deltas against a sorted baseline.
    #[default]
    Accelerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    OneStep,
    Ucb {
        beta: f64,
    },
    Etc {
        m: usize,
    },
    Ens {
        #[serde(default)]
        backend: EnsBackend,
        /// Score only the `q` most probable candidates (approximation; off by default).
        #[serde(default)]
        candidate_filter: Option<usize>,
    },
    Learned {
        model_path: PathBuf,
    },
}

impl PolicyKind {
    pub fn ens() -> Self {
        PolicyKind::Ens {
            backend: EnsBackend::Accelerated,
            candidate_filter: None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            PolicyKind::Random => "random".into(),
            PolicyKind::OneStep => "one-step".into(),
            PolicyKind::Ucb { beta } => format!("ucb({beta})"),
            PolicyKind::Etc { m } => format!("etc({m})"),
            PolicyKind::Ens {
                backend: EnsBackend::Accelerated,
                candidate_filter: None,
            } => "ens".into(),
            PolicyKind::Ens { backend, candidate_filter } => {
                let mut s = format!("ens-{}", if *backend == EnsBackend::Naive { "naive" } else { "accelerated" });
                if let Some(q) = candidate_filter {
                    s.push_str(&format!("-top{q}"));
                }
                s
            }
            PolicyKind::Learned { .. } => "ans".into(),
        }
    }

    pub fn validate(&self, budget: usize) -> Result<()> {
        match *self {
            PolicyKind::Ucb { beta } if !(beta >= 0.0 && beta.is_finite()) => {
                Err(Error::Config(format!("UCB beta must be nonnegative, got {beta}")))
            }
            PolicyKind::Etc { m } if m > budget => {
                Err(Error::Config(format!("ETC m = {m} exceeds the budget {budget}")))
            }
            PolicyKind::Ens {
                candidate_filter: Some(0), ..
            } => Err(Error::Config("ENS candidate filter must keep at least one point".into())),
            _ => Ok(()),
        }
    }

    /// A fresh policy for one episode; `seed` feeds randomized policies.
    pub fn instantiate(&self, seed: u64) -> Result<Box<dyn Policy>> {
        let exploration = seeding::stream(seed, seeding::EXPLORATION, 0);
        Ok(match self {
            PolicyKind::Random => Box::new(RandomPolicy { rng: exploration }),
            PolicyKind::OneStep => Box::new(OneStepPolicy),
            PolicyKind::Ucb { beta } => {
                self.validate(usize::MAX)?;
                Box::new(UcbPolicy { beta: *beta })
            }
            PolicyKind::Etc { m } => Box::new(EtcPolicy { m: *m, rng: exploration }),
            PolicyKind::Ens { backend, candidate_filter } => {
                self.validate(usize::MAX)?;
                Box::new(EnsPolicy {
                    backend: *backend,
                    candidate_filter: *candidate_filter,
                })
            }
            PolicyKind::Learned { model_path } => Box::new(LearnedPolicy::new(Arc::new(PolicyNet::load(model_path)?))),
        })
    }
}

/// Index of the largest score among unlabeled points, lowest index on ties.
pub fn argmax_unlabeled(scores: &[f64], state: &EpisodeState) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in state.unlabeled_indices() {
        let s = scores[i];
        match best {
            Some((_, b)) if !(s > b) => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i).ok_or(Error::NoCandidates)
}

fn masked_scores(state: &EpisodeState, mut score: impl FnMut(usize) -> f64) -> Vec<f64> {
    (0..state.len())
        .map(|i| if state.is_unlabeled(i) { score(i) } else { f64::NEG_INFINITY })
        .collect()
}

fn decision(scores: Vec<f64>, state: &EpisodeState) -> Result<PolicyDecision> {
    let chosen_index = argmax_unlabeled(&scores, state)?;
    Ok(PolicyDecision {
        chosen_index,
        scores: Some(scores),
    })
}

/// Greedy: the most probable target.
pub fn one_step(model: &PosteriorModel, state: &EpisodeState) -> Result<PolicyDecision> {
    decision(masked_scores(state, |i| model.prob(i)), state)
}

/// `p + beta * sqrt(p (1 - p))`.
pub fn ucb(model: &PosteriorModel, state: &EpisodeState, beta: f64) -> Result<PolicyDecision> {
    PolicyKind::Ucb { beta }.validate(usize::MAX)?;
    decision(
        masked_scores(state, |i| {
            let p = model.prob(i);
            p + beta * (p * (1.0 - p)).sqrt()
        }),
        state,
    )
}

pub fn uniform_unlabeled(state: &EpisodeState, rng: &mut seeding::Rng) -> Result<usize> {
    let count = state.unlabeled_count();
    if count == 0 {
        return Err(Error::NoCandidates);
    }
    let pick = rng.random_range(0..count);
    Ok(state.unlabeled_indices().nth(pick).unwrap())
}

/// Explore-then-commit: uniform for the first `m` queries, greedy afterwards.
pub fn etc(model: &PosteriorModel, state: &EpisodeState, m: usize, rng: &mut seeding::Rng) -> Result<PolicyDecision> {
    if state.t() < m {
        Ok(PolicyDecision {
            chosen_index: uniform_unlabeled(state, rng)?,
            scores: None,
        })
    } else {
        one_step(model, state)
    }
}

fn combine(p: f64, if_positive: f64, if_negative: f64) -> f64 {
    p + p * if_positive + (1.0 - p) * if_negative
}

/// Expected utility of querying `i` now and then the `l - 1` most probable
/// points in one batch, averaged over both labels of `i`.
pub fn ens_score(model: &PosteriorModel, state: &EpisodeState, i: usize) -> Result<f64> {
    let remaining = state.remaining_budget();
    if remaining == 0 {
        return Err(Error::BudgetExhausted);
    }
    if !state.is_unlabeled(i) {
        return Err(Error::AlreadyLabeled(i));
    }
    let p = model.prob(i);
    let batch = remaining - 1;
    Ok(combine(
        p,
        model.hypothetical_top_sum(i, true, batch, &[])?,
        model.hypothetical_top_sum(i, false, batch, &[])?,
    ))
}

fn check_consistent(model: &PosteriorModel, state: &EpisodeState) -> Result<()> {
    if model.len() != state.len() {
        return Err(Error::Shape(format!(
            "model has {} points, state {}",
            model.len(),
            state.len()
        )));
    }
    Ok(())
}

/// ENS score of every unlabeled point (others hold `-inf`).
pub fn ens_scores(
    model: &PosteriorModel,
    state: &EpisodeState,
    backend: EnsBackend,
    candidate_filter: Option<usize>,
) -> Result<Vec<f64>> {
    check_consistent(model, state)?;
    let remaining = state.remaining_budget();
    if remaining == 0 {
        return Err(Error::BudgetExhausted);
    }
    let batch = remaining - 1;
    let n = state.len();
    let cache = TopSumCache::new(model);
    let candidates: Vec<usize> = match candidate_filter {
        Some(q) => {
            let mut top: Vec<usize> = cache
                .order()
                .iter()
                .map(|&j| j as usize)
                .filter(|&j| state.is_unlabeled(j))
                .take(q)
                .collect();
            top.sort_unstable();
            top
        }
        None => state.unlabeled_indices().collect(),
    };
    let mut scores = vec![f64::NEG_INFINITY; n];
    match backend {
        EnsBackend::Accelerated => {
            let mut scratch = Scratch::new(n);
            for &i in &candidates {
                let p = model.prob(i);
                let pos = cache.top_sum(model, i, true, batch, &[], &mut scratch);
                let neg = cache.top_sum(model, i, false, batch, &[], &mut scratch);
                scores[i] = combine(p, pos, neg);
            }
        }
        EnsBackend::Naive => {
            for &i in &candidates {
                let p = model.prob(i);
                let mut sums = [0.0; 2];
                for (slot, label) in [true, false].into_iter().enumerate() {
                    let probs = model.hypothetical_probs_from_scratch(i, label)?;
                    let pool = state
                        .unlabeled_indices()
                        .filter(|&j| j != i)
                        .map(|j| probs[j])
                        .collect();
                    sums[slot] = sorted_top_sum(pool, batch);
                }
                scores[i] = combine(p, sums[0], sums[1]);
            }
        }
    }
    Ok(scores)
}

pub fn ens(model: &PosteriorModel, state: &EpisodeState, backend: EnsBackend) -> Result<PolicyDecision> {
    decision(ens_scores(model, state, backend, None)?, state)
}

/// Argmax of network logits over the candidates of `features`.
pub fn learned_policy(net: &PolicyNet, features: &FeatureMatrix, state: &EpisodeState) -> Result<PolicyDecision> {
    if features.len() != state.unlabeled_count()
        || features.candidates().iter().any(|&c| c >= state.len() || !state.is_unlabeled(c))
    {
        return Err(Error::Shape(format!(
            "{} feature rows for {} unlabeled candidates",
            features.len(),
            state.unlabeled_count()
        )));
    }
    let logits = net.forward(features);
    let mut scores = vec![f64::NEG_INFINITY; state.len()];
    for (&c, &z) in features.candidates().iter().zip(&logits) {
        scores[c] = z;
    }
    decision(scores, state)
}

pub struct RandomPolicy {
    rng: seeding::Rng,
}

impl Policy for RandomPolicy {
    fn decide(&mut self, view: &SearchView<'_>) -> Result<PolicyDecision> {
        Ok(PolicyDecision {
            chosen_index: uniform_unlabeled(view.state, &mut self.rng)?,
            scores: None,
        })
    }
}

pub struct OneStepPolicy;

impl Policy for OneStepPolicy {
    fn decide(&mut self, view: &SearchView<'_>) -> Result<PolicyDecision> {
        one_step(view.model, view.state)
    }
}

pub struct UcbPolicy {
    beta: f64,
}

impl Policy for UcbPolicy {
    fn decide(&mut self, view: &SearchView<'_>) -> Result<PolicyDecision> {
        ucb(view.model, view.state, self.beta)
    }
}

pub struct EtcPolicy {
    m: usize,
    rng: seeding::Rng,
}

impl Policy for EtcPolicy {
    fn decide(&mut self, view: &SearchView<'_>) -> Result<PolicyDecision> {
        etc(view.model, view.state, self.m, &mut self.rng)
    }
}

pub struct EnsPolicy {
    backend: EnsBackend,
    candidate_filter: Option<usize>,
}

impl EnsPolicy {
    pub fn new(backend: EnsBackend) -> Self {
        EnsPolicy {
            backend,
            candidate_filter: None,
        }
    }
}

impl Policy for EnsPolicy {
    fn decide(&mut self, view: &SearchView<'_>) -> Result<PolicyDecision> {
        decision(
            ens_scores(view.model, view.state, self.backend, self.candidate_filter)?,
            view.state,
        )
    }
}

pub struct LearnedPolicy {
    net: Arc<PolicyNet>,
}

impl LearnedPolicy {
    pub fn new(net: Arc<PolicyNet>) -> Self {
        LearnedPolicy { net }
    }
}

impl Policy for LearnedPolicy {
    fn decide(&mut self, view: &SearchView<'_>) -> Result<PolicyDecision> {
        let features = featurize(view.model, view.feature_index, view.state)?;
        learned_policy(&self.net, &features, view.state)
    }
}
