//! Per-candidate state features for the learned policy.
//!
//! Every unlabeled point `x` is described by
//!
//! 0. its posterior probability `p(x)`,
//! 1. the remaining budget `l`,
//! 2. the summed posterior of its `l - 1` nearest unlabeled neighbors,
//! 3. the summed similarity to those same neighbors.
//!
//! Neighbors come from the precomputed k-NN lists filtered to unlabeled
//! points, so a featurization pass reads each list once: O(n * min(k, l))
//! per iteration, independent of any global search. When a list holds fewer
//! than `l - 1` unlabeled entries the sums cover what is available.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn_model::PosteriorModel;
use crate::neighbors::NeighborIndex;
use crate::problem::EpisodeState;

pub const NUM_FEATURES: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: Vec<[f64; NUM_FEATURES]>,
    candidates: Vec<usize>,
    #[serde(skip)]
    truncated: usize,
}

/// Equality ignores the truncation count, which is diagnostic only.
impl PartialEq for FeatureMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.candidates == other.candidates
    }
}

impl FeatureMatrix {
    pub fn new(rows: Vec<[f64; NUM_FEATURES]>, candidates: Vec<usize>) -> Result<Self> {
        if rows.len() != candidates.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} candidates",
                rows.len(),
                candidates.len()
            )));
        }
        Ok(FeatureMatrix {
            rows,
            candidates,
            truncated: 0,
        })
    }

    pub fn rows(&self) -> &[[f64; NUM_FEATURES]] {
        &self.rows
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows whose neighbor sums were cut short by the list length.
    pub fn truncated_rows(&self) -> usize {
        self.truncated
    }

    /// The rows at `positions`, in that order.
    pub fn select(&self, positions: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            rows: positions.iter().map(|&p| self.rows[p]).collect(),
            candidates: positions.iter().map(|&p| self.candidates[p]).collect(),
            truncated: 0,
        }
    }
}

pub fn featurize(model: &PosteriorModel, index: &NeighborIndex, state: &EpisodeState) -> Result<FeatureMatrix> {
    let remaining = state.remaining_budget();
    if remaining == 0 {
        return Err(Error::BudgetExhausted);
    }
    if index.len() != state.len() || model.len() != state.len() {
        return Err(Error::Shape(format!(
            "index has {} points, model {}, state {}",
            index.len(),
            model.len(),
            state.len()
        )));
    }
    let want = remaining - 1;
    let budget = remaining as f64;
    let mask = state.unlabeled_mask();
    let probs = model.probs();
    let mut rows = Vec::with_capacity(state.unlabeled_count());
    let mut candidates = Vec::with_capacity(state.unlabeled_count());
    let mut truncated = 0;
    for x in state.unlabeled_indices() {
        let (js, ss) = index.neighbors(x);
        let mut prob_sum = 0.0;
        let mut sim_sum = 0.0;
        let mut found = 0;
        if want > 0 {
            for (&j, &s) in js.iter().zip(ss) {
                let j = j as usize;
                if mask[j] {
                    prob_sum += probs[j];
                    sim_sum += s;
                    found += 1;
                    if found == want {
                        break;
                    }
                }
            }
        }
        if found < want && found < state.unlabeled_count() - 1 {
            truncated += 1;
        }
        rows.push([probs[x], budget, prob_sum, sim_sum]);
        candidates.push(x);
    }
    if truncated > 0 {
        debug!(
            "{truncated} of {} candidates have fewer than {want} unlabeled neighbors in their k = {} lists",
            rows.len(),
            index.k()
        );
    }
    Ok(FeatureMatrix {
        rows,
        candidates,
        truncated,
    })
}
