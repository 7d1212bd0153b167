//! k-nearest-neighbor graphs over a search space.
//!
//! Each point keeps its `k` most similar other points, sorted by decreasing
//! similarity (equivalently increasing Euclidean distance, ties to the lower
//! index), together with the transpose of that relation: the reverse lists
//! name the points whose posteriors move when a point gets labeled.
//!
//! Two builders are provided. [`NeighborIndex::build_exact`] is a brute-force
//! O(n^2) scan. [`NeighborIndex::build_ivf`] partitions the points with
//! k-means into `n_lists` inverted lists and scans only the `n_probe` lists
//! whose centroids are nearest to each query.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::binio::ByteCursor;
use crate::error::{Error, Result};
use crate::problem::{SearchProblem, SimilarityConfig};
use crate::seeding;

pub const DEFAULT_K: usize = 50;
pub const KMEANS_MAX_ITERS: usize = 25;

const MAGIC: &[u8; 8] = b"ANSNNIDX";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    Exact,
    Ivf { n_lists: usize, n_probe: usize },
}

/// `floor(4 sqrt(n))`, clamped to `1..=n`.
pub fn default_n_lists(n: usize) -> usize {
    (16 * n).isqrt().clamp(1, n.max(1))
}

pub fn default_n_probe(n_lists: usize) -> usize {
    (n_lists / 16).max(1)
}

/// RBF similarity `exp(-|a - b|^2 / (2 lambda^2))`.
pub fn similarity(a: &[f64], b: &[f64], lambda: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "points have dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "RBF length scale must be positive, got {lambda}"
        )));
    }
    Ok(rbf_from_sq_dist(sq_dist(a, b), lambda))
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn rbf_from_sq_dist(d2: f64, lambda: f64) -> f64 {
    (-d2 / (2.0 * lambda * lambda)).exp()
}

fn by_distance(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Keeps the `k` closest candidates in order.
fn select_k(cands: &mut Vec<(f64, u32)>, k: usize) {
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, by_distance);
        cands.truncate(k);
    }
    cands.sort_unstable_by(by_distance);
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    n: usize,
    k: usize,
    backend: Backend,
    nbr: Vec<u32>,
    sim: Vec<f64>,
    rev_offsets: Vec<usize>,
    rev_idx: Vec<u32>,
    rev_sim: Vec<f64>,
}

impl NeighborIndex {
    /// Assembles an index from flat row-major lists of length `n * k`.
    pub fn from_lists(
        n: usize,
        k: usize,
        backend: Backend,
        nbr: Vec<u32>,
        sim: Vec<f64>,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 points, got {n}")));
        }
        if k != n.min(k).min(n - 1) || k == 0 {
            return Err(Error::Shape(format!("list length {k} invalid for n = {n}")));
        }
        if nbr.len() != n * k || sim.len() != n * k {
            return Err(Error::Shape(format!(
                "expected {} entries, got {} indices and {} similarities",
                n * k,
                nbr.len(),
                sim.len()
            )));
        }
        for i in 0..n {
            let row = &nbr[i * k..(i + 1) * k];
            if row.iter().any(|&j| j as usize >= n || j as usize == i) {
                return Err(Error::Shape(format!("bad neighbor in list {i}")));
            }
        }
        if sim.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Shape("similarities must be finite and nonnegative".into()));
        }

        let mut counts = vec![0usize; n + 1];
        for &j in &nbr {
            counts[j as usize + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let rev_offsets = counts.clone();
        let mut fill = counts;
        let mut rev_idx = vec![0u32; n * k];
        let mut rev_sim = vec![0.0; n * k];
        // Source rows are visited in increasing order, so reverse lists are sorted by index.
        for i in 0..n {
            for e in i * k..(i + 1) * k {
                let j = nbr[e] as usize;
                rev_idx[fill[j]] = i as u32;
                rev_sim[fill[j]] = sim[e];
                fill[j] += 1;
            }
        }
        Ok(NeighborIndex {
            n,
            k,
            backend,
            nbr,
            sim,
            rev_offsets,
            rev_idx,
            rev_sim,
        })
    }

    /// Builds the index a problem asks for. Precomputed similarities cannot be
    /// rebuilt from coordinates and must be loaded with [`NeighborIndex::load`].
    pub fn for_problem(problem: &SearchProblem, k: usize, backend: Backend, seed: u64) -> Result<Self> {
        match backend {
            Backend::Exact => Self::build_exact(problem.points(), problem.dim(), k, problem.similarity()),
            Backend::Ivf { n_lists, n_probe } => Self::build_ivf(
                problem.points(),
                problem.dim(),
                k,
                problem.similarity(),
                n_lists,
                n_probe,
                seed,
            ),
        }
    }

    fn lambda_of(config: SimilarityConfig) -> Result<f64> {
        config.validate()?;
        match config {
            SimilarityConfig::Rbf { lambda } => Ok(lambda),
            SimilarityConfig::Precomputed => Err(Error::Config(
                "precomputed similarities need a serialized neighbor index".into(),
            )),
        }
    }

    fn check_points(points: &[f64], dim: usize, k: usize) -> Result<usize> {
        if dim == 0 || !points.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} coordinates do not form rows of dimension {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 points, got {n}")));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if n > u32::MAX as usize {
            return Err(Error::Config(format!("{n} points exceed the 32-bit index range")));
        }
        Ok(n)
    }

    fn from_candidates(
        n: usize,
        k: usize,
        lambda: f64,
        backend: Backend,
        mut gather: impl FnMut(usize, &mut Vec<(f64, u32)>),
    ) -> Result<Self> {
        let k = k.min(n - 1);
        let mut nbr = Vec::with_capacity(n * k);
        let mut sim = Vec::with_capacity(n * k);
        let mut cands = Vec::with_capacity(n);
        for i in 0..n {
            cands.clear();
            gather(i, &mut cands);
            select_k(&mut cands, k);
            debug_assert_eq!(cands.len(), k);
            for &(d2, j) in &cands {
                nbr.push(j);
                sim.push(rbf_from_sq_dist(d2, lambda));
            }
        }
        Self::from_lists(n, k, backend, nbr, sim)
    }

    pub fn build_exact(points: &[f64], dim: usize, k: usize, config: SimilarityConfig) -> Result<Self> {
        let lambda = Self::lambda_of(config)?;
        let n = Self::check_points(points, dim, k)?;
        let row = |i: usize| &points[i * dim..(i + 1) * dim];
        Self::from_candidates(n, k, lambda, Backend::Exact, |i, cands| {
            let xi = row(i);
            cands.extend(
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (sq_dist(xi, row(j)), j as u32)),
            );
        })
    }

    pub fn build_ivf(
        points: &[f64],
        dim: usize,
        k: usize,
        config: SimilarityConfig,
        n_lists: usize,
        n_probe: usize,
        seed: u64,
    ) -> Result<Self> {
        let lambda = Self::lambda_of(config)?;
        let n = Self::check_points(points, dim, k)?;
        if n_lists == 0 || n_lists > n {
            return Err(Error::Config(format!("n_lists must be in 1..={n}, got {n_lists}")));
        }
        if n_probe == 0 || n_probe > n_lists {
            return Err(Error::Config(format!(
                "n_probe must be in 1..={n_lists}, got {n_probe}"
            )));
        }
        let want = k.min(n - 1);
        let mut rng = seeding::stream(seed, seeding::KMEANS, 0);
        let (centroids, assignment) = kmeans(points, dim, n_lists, KMEANS_MAX_ITERS, &mut rng);
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); n_lists];
        for (i, &c) in assignment.iter().enumerate() {
            lists[c].push(i as u32);
        }

        let row = |i: usize| &points[i * dim..(i + 1) * dim];
        let mut order: Vec<(f64, u32)> = Vec::with_capacity(n_lists);
        Self::from_candidates(n, k, lambda, Backend::Ivf { n_lists, n_probe }, |i, cands| {
            let xi = row(i);
            order.clear();
            order.extend(
                (0..n_lists).map(|c| (sq_dist(xi, &centroids[c * dim..(c + 1) * dim]), c as u32)),
            );
            order.sort_unstable_by(by_distance);
            let mut scanned = 0;
            for (probe, &(_, c)) in order.iter().enumerate() {
                // Keep probing past n_probe only when too few candidates were seen.
                if probe >= n_probe && scanned >= want {
                    break;
                }
                for &j in &lists[c as usize] {
                    if j as usize != i {
                        cands.push((sq_dist(xi, row(j as usize)), j));
                        scanned += 1;
                    }
                }
            }
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Length of every neighbor list, `min(k, n - 1)`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn neighbors(&self, i: usize) -> (&[u32], &[f64]) {
        let r = i * self.k..(i + 1) * self.k;
        (&self.nbr[r.clone()], &self.sim[r])
    }

    /// Points whose neighbor lists contain `i`, with the similarity stored there.
    pub fn reverse(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.rev_offsets[i]..self.rev_offsets[i + 1];
        (&self.rev_idx[r.clone()], &self.rev_sim[r])
    }

    /// Largest reverse-list length.
    pub fn max_in_degree(&self) -> usize {
        self.rev_offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    /// Keeps only the first `k` entries of every list.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        let k = k.min(self.k);
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if k == self.k {
            return Ok(self.clone());
        }
        let mut nbr = Vec::with_capacity(self.n * k);
        let mut sim = Vec::with_capacity(self.n * k);
        for i in 0..self.n {
            let (js, ss) = self.neighbors(i);
            nbr.extend_from_slice(&js[..k]);
            sim.extend_from_slice(&ss[..k]);
        }
        Self::from_lists(self.n, k, self.backend, nbr, sim)
    }

    /// Mean fraction of each reference list recovered by this index.
    pub fn recall_against(&self, reference: &NeighborIndex) -> f64 {
        assert_eq!(self.n, reference.n);
        let k = self.k.min(reference.k);
        let mut hits = 0usize;
        for i in 0..self.n {
            let mine = &self.neighbors(i).0[..k];
            hits += reference.neighbors(i).0[..k]
                .iter()
                .filter(|j| mine.contains(j))
                .count();
        }
        hits as f64 / (self.n * k) as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        let (tag, n_lists, n_probe) = match self.backend {
            Backend::Exact => (0u8, 0u32, 0u32),
            Backend::Ivf { n_lists, n_probe } => (1, n_lists as u32, n_probe as u32),
        };
        w.write_all(&[tag])?;
        w.write_all(&n_lists.to_le_bytes())?;
        w.write_all(&n_probe.to_le_bytes())?;
        for &j in &self.nbr {
            w.write_all(&j.to_le_bytes())?;
        }
        for &s in &self.sim {
            w.write_all(&s.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let bad = |reason: &str| Error::format(path, reason);
        let mut cur = ByteCursor::new(&bytes);
        if cur.take(8).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("not a neighbor index file"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let k = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let n = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let tag = cur.take(1).ok_or_else(|| bad("truncated header"))?[0];
        let n_lists = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let n_probe = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let backend = match tag {
            0 => Backend::Exact,
            1 => Backend::Ivf { n_lists, n_probe },
            t => return Err(bad(&format!("unknown backend tag {t}"))),
        };
        let total = n.checked_mul(k).ok_or_else(|| bad("size overflow"))?;
        if bytes.len() != cur.pos + total * 12 {
            return Err(bad("payload length does not match header"));
        }
        let nbr = (0..total).map(|_| cur.u32().unwrap()).collect();
        let sim = (0..total).map(|_| cur.f64().unwrap()).collect();
        Self::from_lists(n, k, backend, nbr, sim).map_err(|e| bad(&e.to_string()))
    }
}


fn nearest_centroid(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.chunks_exact(dim).enumerate() {
        let d2 = sq_dist(x, mu);
        if d2 < best.1 {
            best = (c, d2);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding. Never leaves a cluster empty:
/// an empty cluster takes the point of the largest cluster farthest from
/// that cluster's centroid.
pub fn kmeans(
    points: &[f64],
    dim: usize,
    clusters: usize,
    max_iters: usize,
    rng: &mut seeding::Rng,
) -> (Vec<f64>, Vec<usize>) {
    let n = points.len() / dim;
    assert!(clusters >= 1 && clusters <= n);
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(clusters * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    let mut chosen = vec![false; n];
    chosen[first] = true;
    for _ in 1..clusters {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.unwrap()
        } else {
            // Every point coincides with a centroid already; take any unused one.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.extend_from_slice(row(pick));
        let mu = row(pick);
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(row(i), mu));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut sums = vec![0.0; clusters * dim];
    let mut counts = vec![0usize; clusters];
    for _ in 0..max_iters {
        let mut changed = false;
        for i in 0..n {
            let (c, _) = nearest_centroid(row(i), &centroids, dim);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        for c in 0..clusters {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        for c in 0..clusters {
            if counts[c] > 0 {
                continue;
            }
            let largest = (0..clusters).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
            let mu = centroids[largest * dim..(largest + 1) * dim].to_vec();
            let far = (0..n)
                .filter(|&i| assignment[i] == largest)
                .max_by(|&a, &b| {
                    sq_dist(row(a), &mu)
                        .total_cmp(&sq_dist(row(b), &mu))
                        .then(b.cmp(&a))
                })
                .unwrap();
            assignment[far] = c;
            counts[largest] -= 1;
            counts[c] = 1;
            centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
        }
    }
    (centroids, assignment)
}
