//! Similarity-weighted k-NN posterior with pseudocount smoothing.
//!
//! For an unlabeled point `j` with labeled neighbors `L(j)` (taken from its
//! k-NN list),
//!
//! ```text
//! Pr(y_j = 1 | D) = (gamma * prior_j + sum_{i in L(j), y_i = 1} s(j, i))
//!                 / (gamma           + sum_{i in L(j)}          s(j, i))
//! ```
//!
//! Revealing the label of `i` only touches the points whose lists contain
//! `i`, i.e. the reverse neighbors of `i`. The same locality makes
//! hypothetical "what if `i` had label `y`" queries cheap: see
//! [`TopSumCache`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighbors::{NeighborIndex, DEFAULT_K};

pub const DEFAULT_PRIOR: f64 = 0.1;
pub const DEFAULT_PSEUDOCOUNT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    /// Neighbors per point used by the posterior.
    pub k: usize,
    pub prior: f64,
    pub pseudocount: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            k: DEFAULT_K,
            prior: DEFAULT_PRIOR,
            pseudocount: DEFAULT_PSEUDOCOUNT,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("model k must be at least 1".into()));
        }
        check_prior(self.prior)?;
        check_pseudocount(self.pseudocount)
    }
}

fn check_prior(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("prior must lie in (0, 1), got {p}")))
    }
}

fn check_pseudocount(g: f64) -> Result<()> {
    if g > 0.0 && g.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("pseudocount must be positive, got {g}")))
    }
}

#[inline]
fn posterior(gamma: f64, prior: f64, pos: f64, tot: f64) -> f64 {
    if tot == 0.0 {
        prior
    } else {
        (gamma * prior + pos) / (gamma + tot)
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorModel {
    index: Arc<NeighborIndex>,
    gamma: f64,
    prior: Vec<f64>,
    pos_weight: Vec<f64>,
    tot_weight: Vec<f64>,
    probs: Vec<f64>,
    labeled: Vec<bool>,
    observed: Vec<(usize, bool)>,
}

impl PosteriorModel {
    pub fn new(index: Arc<NeighborIndex>, prior: f64, pseudocount: f64) -> Result<Self> {
        check_prior(prior)?;
        let n = index.len();
        Self::with_priors(index, vec![prior; n], pseudocount)
    }

    /// Per-point priors; with nothing observed the posterior equals them
    /// exactly. Used to pin probabilities for hand-built states.
    pub fn with_priors(index: Arc<NeighborIndex>, priors: Vec<f64>, pseudocount: f64) -> Result<Self> {
        check_pseudocount(pseudocount)?;
        if priors.len() != index.len() {
            return Err(Error::Shape(format!(
                "{} priors for {} points",
                priors.len(),
                index.len()
            )));
        }
        for &p in &priors {
            check_prior(p)?;
        }
        let n = index.len();
        Ok(PosteriorModel {
            index,
            gamma: pseudocount,
            probs: priors.clone(),
            prior: priors,
            pos_weight: vec![0.0; n],
            tot_weight: vec![0.0; n],
            labeled: vec![false; n],
            observed: Vec::new(),
        })
    }

    pub fn index(&self) -> &Arc<NeighborIndex> {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn pseudocount(&self) -> f64 {
        self.gamma
    }

    pub fn prior(&self, i: usize) -> f64 {
        self.prior[i]
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Posterior for every point; entries of labeled points are stale.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pos_weight(&self, i: usize) -> f64 {
        self.pos_weight[i]
    }

    pub fn tot_weight(&self, i: usize) -> f64 {
        self.tot_weight[i]
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labeled[i]
    }

    /// Observations in the order they were made.
    pub fn observed(&self) -> &[(usize, bool)] {
        &self.observed
    }

    fn check_unlabeled(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange { index: i, n: self.len() });
        }
        if self.labeled[i] {
            return Err(Error::AlreadyLabeled(i));
        }
        Ok(())
    }

    pub fn observe(&mut self, i: usize, label: bool) -> Result<()> {
        self.check_unlabeled(i)?;
        let index = Arc::clone(&self.index);
        let (js, ss) = index.reverse(i);
        for (&j, &s) in js.iter().zip(ss) {
            let j = j as usize;
            self.tot_weight[j] += s;
            if label {
                self.pos_weight[j] += s;
            }
            self.probs[j] = posterior(self.gamma, self.prior[j], self.pos_weight[j], self.tot_weight[j]);
        }
        self.labeled[i] = true;
        self.observed.push((i, label));
        Ok(())
    }

    /// Posteriors after additionally observing `(i, label)`, replayed from
    /// nothing in observation order. O(|D| * in-degree + n).
    pub fn hypothetical_probs_from_scratch(&self, i: usize, label: bool) -> Result<Vec<f64>> {
        self.check_unlabeled(i)?;
        let n = self.len();
        let mut pos = vec![0.0; n];
        let mut tot = vec![0.0; n];
        for &(o, y) in self.observed.iter().chain(std::iter::once(&(i, label))) {
            let (js, ss) = self.index.reverse(o);
            for (&j, &s) in js.iter().zip(ss) {
                tot[j as usize] += s;
                if y {
                    pos[j as usize] += s;
                }
            }
        }
        Ok((0..n)
            .map(|j| posterior(self.gamma, self.prior[j], pos[j], tot[j]))
            .collect())
    }

    /// Sum of the `count` largest hypothetical posteriors over unlabeled
    /// points other than `i` and `exclude`, had `i` been labeled `label`.
    /// Saturates when fewer points are available. The model is unchanged.
    pub fn hypothetical_top_sum(&self, i: usize, label: bool, count: usize, exclude: &[usize]) -> Result<f64> {
        self.check_unlabeled(i)?;
        let cache = TopSumCache::new(self);
        let mut scratch = Scratch::new(self.len());
        Ok(cache.top_sum(self, i, label, count, exclude, &mut scratch))
    }
}

/// Reusable buffers for [`TopSumCache::top_sum`].
#[derive(Debug, Clone)]
pub struct Scratch {
    stamp: Vec<u32>,
    generation: u32,
    values: Vec<f64>,
}

impl Scratch {
    pub fn new(n: usize) -> Self {
        Scratch {
            stamp: vec![0; n],
            generation: 0,
            values: Vec::new(),
        }
    }

    fn next_generation(&mut self) -> u32 {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
        self.generation
    }
}

/// Unlabeled points sorted by decreasing posterior, built once per
/// iteration. A hypothetical observation changes only the posteriors of the
/// observed point's reverse neighbors, so the top-`count` sum after the
/// update merges this baseline order (minus the changed points) with the
/// re-sorted changed values: O(count + m log m) per query, where m is the
/// in-degree of the hypothetically observed point.
#[derive(Debug, Clone)]
pub struct TopSumCache {
    order: Vec<u32>,
}

impl TopSumCache {
    pub fn new(model: &PosteriorModel) -> Self {
        let mut order: Vec<u32> = (0..model.len() as u32)
            .filter(|&j| !model.labeled[j as usize])
            .collect();
        order.sort_unstable_by(|&a, &b| {
            model.probs[b as usize]
                .total_cmp(&model.probs[a as usize])
                .then(a.cmp(&b))
        });
        TopSumCache { order }
    }

    pub fn order(&self) -> &[u32] {
        &self.order
    }

    pub fn top_sum(
        &self,
        model: &PosteriorModel,
        i: usize,
        label: bool,
        count: usize,
        exclude: &[usize],
        scratch: &mut Scratch,
    ) -> f64 {
        if count == 0 {
            return 0.0;
        }
        let gen = scratch.next_generation();
        scratch.stamp[i] = gen;
        for &e in exclude {
            scratch.stamp[e] = gen;
        }
        scratch.values.clear();
        let (js, ss) = model.index.reverse(i);
        for (&j, &s) in js.iter().zip(ss) {
            let j = j as usize;
            if model.labeled[j] || scratch.stamp[j] == gen {
                continue;
            }
            scratch.stamp[j] = gen;
            let tot = model.tot_weight[j] + s;
            let pos = if label { model.pos_weight[j] + s } else { model.pos_weight[j] };
            scratch.values.push(posterior(model.gamma, model.prior[j], pos, tot));
        }
        scratch.values.sort_unstable_by(|a, b| b.total_cmp(a));

        let changed = &scratch.values;
        let mut sum = 0.0;
        let mut taken = 0;
        let mut c = 0;
        let mut base = self.order.iter().map(|&j| j as usize).filter(|&j| scratch.stamp[j] != gen);
        let mut next_base = base.next();
        while taken < count {
            let from_base = next_base.map(|j| model.probs[j]);
            let from_changed = changed.get(c).copied();
            let v = match (from_base, from_changed) {
                (None, None) => break,
                (Some(b), Some(x)) if x > b => {
                    c += 1;
                    x
                }
                (Some(b), _) => {
                    next_base = base.next();
                    b
                }
                (None, Some(x)) => {
                    c += 1;
                    x
                }
            };
            sum += v;
            taken += 1;
        }
        sum
    }
}

/// Sum of the `count` largest values, in decreasing order.
pub(crate) fn sorted_top_sum(mut values: Vec<f64>, count: usize) -> f64 {
    values.sort_unstable_by(|a, b| b.total_cmp(a));
    values.iter().take(count).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::SimilarityConfig;
    use crate::seeding;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn index_1d(xs: &[f64], k: usize, lambda: f64) -> Arc<NeighborIndex> {
        Arc::new(NeighborIndex::build_exact(xs, 1, k, SimilarityConfig::Rbf { lambda }).unwrap())
    }

    fn random_index(n: usize, k: usize, seed: u64) -> Arc<NeighborIndex> {
        let mut rng = seeding::rng(seed);
        let pts: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
        Arc::new(NeighborIndex::build_exact(&pts, 2, k, SimilarityConfig::Rbf { lambda: 0.2 }).unwrap())
    }

    /// Rebuilds the posterior of every point by scanning its own neighbor list.
    fn rebuild(index: &NeighborIndex, prior: f64, gamma: f64, observed: &[(usize, bool)]) -> Vec<f64> {
        let n = index.len();
        let mut label = vec![None; n];
        for &(i, y) in observed {
            label[i] = Some(y);
        }
        (0..n)
            .map(|j| {
                let (js, ss) = index.neighbors(j);
                let mut pos = 0.0;
                let mut tot = 0.0;
                for (&i, &s) in js.iter().zip(ss) {
                    if let Some(y) = label[i as usize] {
                        tot += s;
                        pos += if y { s } else { 0.0 };
                    }
                }
                if tot == 0.0 {
                    prior
                } else {
                    (gamma * prior + pos) / (gamma + tot)
                }
            })
            .collect()
    }

    fn random_observations(n: usize, count: usize, seed: u64) -> Vec<(usize, bool)> {
        let mut rng = seeding::rng(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        perm.into_iter().take(count).map(|i| (i, rng.random_bool(0.3))).collect()
    }

    #[test]
    fn init_is_uniform_prior() {
        let idx = random_index(30, 5, 0);
        let m = PosteriorModel::new(idx.clone(), 0.1, 1.0).unwrap();
        assert!(m.probs().iter().all(|&p| p == 0.1));
        let m = PosteriorModel::new(idx.clone(), 0.5, 1.0).unwrap();
        assert!(m.probs().iter().all(|&p| p == 0.5));
        assert!(PosteriorModel::new(idx.clone(), 0.0, 1.0).is_err());
        assert!(PosteriorModel::new(idx.clone(), 1.0, 1.0).is_err());
        assert!(PosteriorModel::new(idx, 0.2, 0.0).is_err());
    }

    #[test]
    fn single_neighbor_formula() {
        // Two coincident points have similarity exactly 1.
        let idx = index_1d(&[0.0, 0.0, 50.0], 1, 1.0);
        let mut m = PosteriorModel::new(idx.clone(), 0.1, 1.0).unwrap();
        m.observe(0, true).unwrap();
        assert!((m.prob(1) - 0.55).abs() < 1e-15);
        let mut m = PosteriorModel::new(idx, 0.1, 1.0).unwrap();
        m.observe(0, false).unwrap();
        assert!((m.prob(1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn updates_stay_local() {
        let idx = index_1d(&[0.0, 0.1, 10.0, 10.1, 20.0], 1, 1.0);
        let mut m = PosteriorModel::new(idx.clone(), 0.1, 1.0).unwrap();
        m.observe(0, true).unwrap();
        let (rev, _) = idx.reverse(0);
        for j in 0..5u32 {
            if !rev.contains(&j) {
                assert_eq!(m.prob(j as usize), 0.1);
            }
        }
        assert!(matches!(m.observe(0, false), Err(Error::AlreadyLabeled(0))));
    }

    #[test]
    fn top_sum_examples() {
        let idx = index_1d(&[0.0, 100.0, 200.0, 300.0], 1, 1.0);
        let m = PosteriorModel::with_priors(idx, vec![0.9, 0.5, 0.2, 0.3], 1.0).unwrap();
        // Point 3 is far from everything, so the others keep their priors.
        assert_eq!(m.hypothetical_top_sum(3, true, 0, &[]).unwrap(), 0.0);
        assert!((m.hypothetical_top_sum(3, true, 2, &[]).unwrap() - 1.4).abs() < 1e-15);
        assert!((m.hypothetical_top_sum(3, false, 10, &[]).unwrap() - 1.6).abs() < 1e-15);
        assert!((m.hypothetical_top_sum(3, false, 2, &[0]).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn top_sum_matches_full_rescoring() {
        for seed in 0..20 {
            let n = 50;
            let idx = random_index(n, 6, seed);
            let obs = random_observations(n, 12, seed + 100);
            let mut m = PosteriorModel::new(idx.clone(), 0.1, 1.0).unwrap();
            for &(i, y) in &obs {
                m.observe(i, y).unwrap();
            }
            let mut rng = seeding::rng(seed + 7);
            for _ in 0..10 {
                let i = loop {
                    let i = rng.random_range(0..n);
                    if !m.is_labeled(i) {
                        break i;
                    }
                };
                let y = rng.random_bool(0.5);
                let count = rng.random_range(0..n);
                let mut with = obs.clone();
                with.push((i, y));
                let probs = rebuild(&idx, 0.1, 1.0, &with);
                let vals: Vec<f64> = (0..n)
                    .filter(|&j| j != i && !m.is_labeled(j))
                    .map(|j| probs[j])
                    .collect();
                let expect = sorted_top_sum(vals, count);
                let got = m.hypothetical_top_sum(i, y, count, &[]).unwrap();
                assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn from_scratch_replay_matches_cache_bitwise() {
        let n = 80;
        let idx = random_index(n, 8, 3);
        let mut m = PosteriorModel::new(idx, 0.1, 1.0).unwrap();
        for (i, y) in random_observations(n, 20, 4) {
            m.observe(i, y).unwrap();
        }
        let cache = TopSumCache::new(&m);
        let mut scratch = Scratch::new(n);
        for i in (0..n).filter(|&i| !m.is_labeled(i)) {
            for y in [false, true] {
                let probs = m.hypothetical_probs_from_scratch(i, y).unwrap();
                let vals = (0..n).filter(|&j| j != i && !m.is_labeled(j)).map(|j| probs[j]).collect();
                assert_eq!(sorted_top_sum(vals, 17), cache.top_sum(&m, i, y, 17, &[], &mut scratch));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn incremental_equals_rebuild(n in 5usize..60, k in 1usize..10, count in 0usize..30,
                                      seed in 0u64..10_000, prior in 0.01f64..0.99, gamma in 0.1f64..5.0) {
            let idx = random_index(n, k, seed);
            let obs = random_observations(n, count.min(n), seed ^ 0xabc);
            let mut m = PosteriorModel::new(idx.clone(), prior, gamma).unwrap();
            for &(i, y) in &obs {
                m.observe(i, y).unwrap();
            }
            let expect = rebuild(&idx, prior, gamma, &obs);
            for j in (0..n).filter(|&j| !m.is_labeled(j)) {
                prop_assert!((m.prob(j) - expect[j]).abs() <= 1e-12);
                prop_assert!(m.prob(j) > 0.0 && m.prob(j) < 1.0);
                prop_assert!(m.pos_weight(j) <= m.tot_weight(j) && m.pos_weight(j) >= 0.0);
            }
        }

        #[test]
        fn labels_move_posteriors_monotonically(n in 5usize..40, seed in 0u64..10_000, label in any::<bool>()) {
            let idx = random_index(n, 5, seed);
            let mut m = PosteriorModel::new(idx, 0.1, 1.0).unwrap();
            for (i, y) in random_observations(n, n / 3, seed + 1) {
                m.observe(i, y).unwrap();
            }
            let target = (0..n).find(|&i| !m.is_labeled(i)).unwrap();
            let before = m.probs().to_vec();
            m.observe(target, label).unwrap();
            for j in 0..n {
                if label {
                    prop_assert!(m.prob(j) >= before[j]);
                } else {
                    prop_assert!(m.prob(j) <= before[j]);
                }
            }
        }

        #[test]
        fn top_sum_bounded_and_monotone(n in 5usize..40, seed in 0u64..10_000, label in any::<bool>()) {
            let idx = random_index(n, 4, seed);
            let mut m = PosteriorModel::new(idx, 0.1, 1.0).unwrap();
            for (i, y) in random_observations(n, n / 4, seed + 2) {
                m.observe(i, y).unwrap();
            }
            let i = (0..n).find(|&i| !m.is_labeled(i)).unwrap();
            let mut last = 0.0;
            for count in 0..n + 3 {
                let s = m.hypothetical_top_sum(i, label, count, &[]).unwrap();
                prop_assert!(s <= count as f64);
                prop_assert!(s >= last);
                last = s;
            }
        }
    }
}
