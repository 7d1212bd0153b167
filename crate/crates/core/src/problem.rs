//! Search problems, the label oracle and per-episode state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// How similarity between two points is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SimilarityConfig {
    /// `exp(-|a - b|^2 / (2 lambda^2))`.
    Rbf { lambda: f64 },
    /// Similarities come with a serialized neighbor index next to the problem.
    Precomputed,
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SimilarityConfig::Rbf { lambda } if !(lambda > 0.0 && lambda.is_finite()) => Err(
                Error::Config(format!("RBF length scale must be positive, got {lambda}")),
            ),
            _ => Ok(()),
        }
    }
}

/// A finite search space with hidden binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchProblem {
    name: String,
    dim: usize,
    points: Vec<f64>,
    labels: Vec<bool>,
    similarity: SimilarityConfig,
}

impl SearchProblem {
    /// `points` is row-major with `labels.len()` rows of `dim` coordinates.
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        points: Vec<f64>,
        labels: Vec<bool>,
        similarity: SimilarityConfig,
    ) -> Result<Self> {
        let n = labels.len();
        if n < 2 {
            return Err(Error::InvalidProblem(format!("need at least 2 points, got {n}")));
        }
        if dim == 0 {
            return Err(Error::InvalidProblem("dimension must be at least 1".into()));
        }
        if points.len() != n * dim {
            return Err(Error::InvalidProblem(format!(
                "expected {} coordinates for {n} points in {dim} dimensions, got {}",
                n * dim,
                points.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidProblem("coordinates must be finite".into()));
        }
        let positives = labels.iter().filter(|&&y| y).count();
        if positives == 0 || positives == n {
            return Err(Error::InvalidProblem(
                "labels must contain at least one positive and one negative".into(),
            ));
        }
        similarity.validate()?;
        Ok(SearchProblem {
            name: name.into(),
            dim,
            points,
            labels,
            similarity,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn similarity(&self) -> SimilarityConfig {
        self.similarity
    }

    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|&&y| y).count()
    }

    pub fn prevalence(&self) -> f64 {
        self.positive_count() as f64 / self.len() as f64
    }

    pub(crate) fn label(&self, i: usize) -> bool {
        self.labels[i]
    }

    /// Reads a problem from a JSON manifest and the CSV with the same stem.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(manifest_path)?))?;
        let csv_path = manifest_path.with_extension("csv");
        let mut reader = csv::Reader::from_path(&csv_path)?;
        let headers = reader.headers()?.clone();
        if headers.len() != manifest.d + 1 || &headers[0] != "label" {
            return Err(Error::format(
                &csv_path,
                format!("expected header label,x1..x{}", manifest.d),
            ));
        }
        for (j, h) in headers.iter().skip(1).enumerate() {
            if h != format!("x{}", j + 1) {
                return Err(Error::format(&csv_path, format!("unexpected column {h:?}")));
            }
        }
        let mut points = Vec::with_capacity(manifest.n * manifest.d);
        let mut labels = Vec::with_capacity(manifest.n);
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            let label = match &record[0] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::format(
                        &csv_path,
                        format!("row {row}: label must be 0 or 1, got {other:?}"),
                    ))
                }
            };
            labels.push(label);
            for field in record.iter().skip(1) {
                let x: f64 = field.trim().parse().map_err(|_| {
                    Error::format(&csv_path, format!("row {row}: bad coordinate {field:?}"))
                })?;
                points.push(x);
            }
        }
        if labels.len() != manifest.n {
            return Err(Error::format(
                &csv_path,
                format!("manifest says n = {}, file has {} rows", manifest.n, labels.len()),
            ));
        }
        SearchProblem::new(manifest.name, manifest.d, points, labels, manifest.similarity)
    }

    /// Writes `<stem>.json` and `<stem>.csv`; returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest_path = dir.join(format!("{stem}.json"));
        let manifest = Manifest {
            name: self.name.clone(),
            n: self.len(),
            d: self.dim,
            similarity: self.similarity,
        };
        let mut w = BufWriter::new(File::create(&manifest_path)?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;

        let mut writer = csv::Writer::from_path(manifest_path.with_extension("csv"))?;
        let mut header = vec!["label".to_string()];
        header.extend((1..=self.dim).map(|j| format!("x{j}")));
        writer.write_record(&header)?;
        let mut row = Vec::with_capacity(self.dim + 1);
        for i in 0..self.len() {
            row.clear();
            row.push(if self.labels[i] { "1".to_string() } else { "0".to_string() });
            // `{:?}` prints the shortest string that round-trips exactly.
            row.extend(self.point(i).iter().map(|x| format!("{x:?}")));
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(manifest_path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    n: usize,
    d: usize,
    similarity: SimilarityConfig,
}

/// Reveals labels, at most `budget` times, never twice for the same point.
#[derive(Debug, Clone)]
pub struct LabelOracle {
    problem: Arc<SearchProblem>,
    revealed: Vec<bool>,
    query_count: usize,
    budget: usize,
}

impl LabelOracle {
    pub fn problem(&self) -> &Arc<SearchProblem> {
        &self.problem
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    fn check(&self, index: usize) -> Result<()> {
        let n = self.problem.len();
        if index >= n {
            return Err(Error::IndexOutOfRange { index, n });
        }
        if self.revealed[index] {
            return Err(Error::AlreadyLabeled(index));
        }
        Ok(())
    }

    /// Seed points are free: they do not count against the budget.
    fn reveal_seed(&mut self, index: usize) -> Result<bool> {
        self.check(index)?;
        self.revealed[index] = true;
        Ok(self.problem.label(index))
    }

    pub fn query(&mut self, index: usize) -> Result<bool> {
        self.check(index)?;
        if self.query_count >= self.budget {
            return Err(Error::BudgetExhausted);
        }
        self.revealed[index] = true;
        self.query_count += 1;
        Ok(self.problem.label(index))
    }
}

/// The observed data, the unlabeled pool and the budget bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    observed: Vec<(usize, bool)>,
    unlabeled: Vec<bool>,
    unlabeled_count: usize,
    t: usize,
    budget: usize,
    utility: usize,
    seed_count: usize,
}

impl EpisodeState {
    /// A state with nothing observed and `remaining` queries left.
    ///
    /// Used for hand-built states such as the pinned-probability toy.
    pub fn detached(n: usize, remaining: usize) -> Self {
        EpisodeState {
            observed: Vec::new(),
            unlabeled: vec![true; n],
            unlabeled_count: n,
            t: 0,
            budget: remaining,
            utility: 0,
            seed_count: 0,
        }
    }

    pub fn observed(&self) -> &[(usize, bool)] {
        &self.observed
    }

    pub fn is_unlabeled(&self, i: usize) -> bool {
        self.unlabeled[i]
    }

    pub fn unlabeled_mask(&self) -> &[bool] {
        &self.unlabeled
    }

    pub fn unlabeled_count(&self) -> usize {
        self.unlabeled_count
    }

    pub fn unlabeled_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.unlabeled
            .iter()
            .enumerate()
            .filter_map(|(i, &u)| u.then_some(i))
    }

    pub fn len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unlabeled.is_empty()
    }

    /// Number of budgeted queries made so far.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// `T - t`.
    pub fn remaining_budget(&self) -> usize {
        self.budget - self.t
    }

    /// Number of positives in the observed set, seed positive included.
    pub fn utility(&self) -> usize {
        self.utility
    }

    /// Positives found by the budgeted queries only.
    pub fn targets_found(&self) -> usize {
        self.observed[self.seed_count..]
            .iter()
            .filter(|(_, y)| *y)
            .count()
    }

    fn record(&mut self, index: usize, label: bool) {
        self.observed.push((index, label));
        self.unlabeled[index] = false;
        self.unlabeled_count -= 1;
        self.utility += usize::from(label);
    }
}

/// The outcome of one policy evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDecision {
    pub chosen_index: usize,
    /// Per-point scores (length n); labeled or skipped points hold `-inf`.
    pub scores: Option<Vec<f64>>,
}

/// Starts an episode from one uniformly random positive and one uniformly
/// random negative, neither of which counts against `budget`.
pub fn new_episode(
    problem: Arc<SearchProblem>,
    seed: u64,
    budget: usize,
) -> Result<(EpisodeState, LabelOracle)> {
    let n = problem.len();
    let max = n.saturating_sub(2);
    if budget == 0 || budget > max {
        return Err(Error::BudgetOutOfRange { budget, max });
    }
    let positives: Vec<usize> = (0..n).filter(|&i| problem.label(i)).collect();
    let negatives: Vec<usize> = (0..n).filter(|&i| !problem.label(i)).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidProblem(
            "labels must contain at least one positive and one negative".into(),
        ));
    }
    let mut rng = seeding::rng(seed);
    let pos = positives[rng.random_range(0..positives.len())];
    let neg = negatives[rng.random_range(0..negatives.len())];

    let mut oracle = LabelOracle {
        problem,
        revealed: vec![false; n],
        query_count: 0,
        budget,
    };
    let mut state = EpisodeState {
        observed: Vec::with_capacity(budget + 2),
        unlabeled: vec![true; n],
        unlabeled_count: n,
        t: 0,
        budget,
        utility: 0,
        seed_count: 2,
    };
    for i in [pos, neg] {
        let y = oracle.reveal_seed(i)?;
        state.record(i, y);
    }
    Ok((state, oracle))
}

/// Queries `index`, updating the state; returns the revealed label.
pub fn step(state: &mut EpisodeState, oracle: &mut LabelOracle, index: usize) -> Result<bool> {
    if index >= state.len() {
        return Err(Error::IndexOutOfRange {
            index,
            n: state.len(),
        });
    }
    if !state.unlabeled[index] {
        return Err(Error::AlreadyLabeled(index));
    }
    if state.remaining_budget() == 0 {
        return Err(Error::BudgetExhausted);
    }
    let y = oracle.query(index)?;
    state.record(index, y);
    state.t += 1;
    Ok(y)
}
