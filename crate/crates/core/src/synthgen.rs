//! Random training problems: uniform background points plus isotropic
//! Gaussian clusters, labeled by thresholding a GP sample at a random
//! prevalence.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{SearchProblem, SimilarityConfig};
use crate::seeding;

/// Jitter added to the kernel diagonal on the first Cholesky attempt.
pub const JITTER_START: f64 = 1e-8;
/// Largest jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-2;
const MAX_STRUCTURE_DRAWS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    /// Inclusive range of the dimension d.
    pub dim_min: usize,
    pub dim_max: usize,
    /// Uniform points per dimension (100d).
    pub uniform_per_dim: usize,
    /// Cluster count ~ U{cluster_count_min, cluster_count_per_dim * d}.
    pub cluster_count_min: usize,
    pub cluster_count_per_dim: usize,
    /// Cluster size ~ U{cluster_size_min, cluster_size_per_dim * d}.
    pub cluster_size_min: usize,
    pub cluster_size_per_dim: usize,
    /// Cluster spread ~ U[sigma_min, sigma_per_dim * d].
    pub sigma_min: f64,
    pub sigma_per_dim: f64,
    /// Prevalence ~ U[prevalence_min, prevalence_max].
    pub prevalence_min: f64,
    pub prevalence_max: f64,
    /// GP (and similarity) length scale is this factor times d.
    pub length_scale_factor: f64,
    /// Structure draws with more points are rejected and redrawn.
    pub max_points: Option<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            dim_min: 2,
            dim_max: 10,
            uniform_per_dim: 100,
            cluster_count_min: 10,
            cluster_count_per_dim: 10,
            cluster_size_min: 10,
            cluster_size_per_dim: 10,
            sigma_min: 0.1,
            sigma_per_dim: 0.1,
            prevalence_min: 0.01,
            prevalence_max: 0.2,
            length_scale_factor: 0.05,
            max_points: Some(2500),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("generator: {what}")));
        if self.dim_min == 0 || self.dim_min > self.dim_max {
            return bad("need 1 <= dim_min <= dim_max");
        }
        if self.uniform_per_dim == 0 && self.cluster_count_min == 0 {
            return bad("no points would be generated");
        }
        if self.cluster_count_min > self.cluster_count_per_dim * self.dim_min {
            return bad("cluster count range is empty for the smallest dimension");
        }
        if self.cluster_size_min > self.cluster_size_per_dim * self.dim_min {
            return bad("cluster size range is empty for the smallest dimension");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_per_dim * self.dim_min as f64) {
            return bad("sigma range is empty or nonpositive");
        }
        if !(self.prevalence_min > 0.0 && self.prevalence_min <= self.prevalence_max && self.prevalence_max < 1.0) {
            return bad("prevalence range must lie in (0, 1)");
        }
        if !(self.length_scale_factor > 0.0) {
            return bad("length scale factor must be positive");
        }
        if let Some(max) = self.max_points {
            if self.uniform_per_dim * self.dim_min + self.cluster_count_min * self.cluster_size_min > max {
                return bad("max_points is below the smallest possible problem");
            }
        }
        Ok(())
    }

    pub fn length_scale(&self, dim: usize) -> f64 {
        self.length_scale_factor * dim as f64
    }
}

/// The random draws behind a generated problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMeta {
    pub dim: usize,
    pub uniform_points: usize,
    /// (size, sigma) per cluster.
    pub clusters: Vec<(usize, f64)>,
    pub prevalence: f64,
    pub length_scale: f64,
    pub threshold: f64,
    pub jitter: f64,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub problem: SearchProblem,
    pub meta: GenMeta,
}

/// Generates problem number `slot` of the stream seeded by `config.seed`.
pub fn generate_seeded(config: &GenConfig, slot: u64) -> Result<Generated> {
    let mut rng = seeding::stream(config.seed, seeding::PROBLEMS, slot);
    let mut out = generate(config, &mut rng)?;
    out.problem = out.problem.renamed(format!("synth-{}-{slot}", config.seed));
    Ok(out)
}

pub fn generate(config: &GenConfig, rng: &mut seeding::Rng) -> Result<Generated> {
    config.validate()?;
    let (dim, sizes) = draw_structure(config, rng)?;
    build(config, dim, config.uniform_per_dim * dim, &sizes, rng)
}

/// A problem with exactly `n` points, for timing. Dimension and cluster
/// count are drawn as usual; the uniform share is `min(100d, n / 2)` and the
/// rest is split evenly over the clusters.
pub fn generate_sized(config: &GenConfig, n: usize, rng: &mut seeding::Rng) -> Result<Generated> {
    config.validate()?;
    if n < 4 {
        return Err(Error::Config(format!("sized problems need at least 4 points, got {n}")));
    }
    let dim = rng.random_range(config.dim_min..=config.dim_max);
    let n_uniform = (config.uniform_per_dim * dim).min(n / 2);
    let clustered = n - n_uniform;
    let count = rng
        .random_range(config.cluster_count_min..=config.cluster_count_per_dim * dim)
        .clamp(1, clustered);
    let sizes: Vec<usize> = (0..count)
        .map(|c| clustered / count + usize::from(c < clustered % count))
        .collect();
    build(config, dim, n_uniform, &sizes, rng)
}

fn build(config: &GenConfig, dim: usize, n_uniform: usize, sizes: &[usize], rng: &mut seeding::Rng) -> Result<Generated> {
    let n = n_uniform + sizes.iter().sum::<usize>();
    let mut points = Vec::with_capacity(n * dim);
    for _ in 0..n_uniform * dim {
        points.push(rng.random::<f64>());
    }
    let mut clusters = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mu: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let sigma = rng.random_range(config.sigma_min..=config.sigma_per_dim * dim as f64);
        for _ in 0..size {
            for m in &mu {
                let z: f64 = StandardNormal.sample(rng);
                points.push(m + sigma * z);
            }
        }
        clusters.push((size, sigma));
    }
    let length_scale = config.length_scale(dim);
    let (f, jitter) = gp_sample(&points, dim, length_scale, rng)?;
    let prevalence = rng.random_range(config.prevalence_min..=config.prevalence_max);
    let threshold = upper_quantile_threshold(&f, prevalence);
    let labels: Vec<bool> = f.iter().map(|&v| v > threshold).collect();
    let problem = SearchProblem::new(
        "synth",
        dim,
        points,
        labels,
        SimilarityConfig::Rbf { lambda: length_scale },
    )
    .map_err(|e| Error::InvalidProblem(format!("generated labels unusable, regenerate with a new seed: {e}")))?;
    Ok(Generated {
        problem,
        meta: GenMeta {
            dim,
            uniform_points: n_uniform,
            clusters,
            prevalence,
            length_scale,
            threshold,
            jitter,
        },
    })
}

fn draw_structure(config: &GenConfig, rng: &mut seeding::Rng) -> Result<(usize, Vec<usize>)> {
    for _ in 0..MAX_STRUCTURE_DRAWS {
        let dim = rng.random_range(config.dim_min..=config.dim_max);
        let count = rng.random_range(config.cluster_count_min..=config.cluster_count_per_dim * dim);
        let sizes: Vec<usize> = (0..count)
            .map(|_| rng.random_range(config.cluster_size_min..=config.cluster_size_per_dim * dim))
            .collect();
        let n = config.uniform_per_dim * dim + sizes.iter().sum::<usize>();
        if config.max_points.is_none_or(|max| n <= max) {
            return Ok((dim, sizes));
        }
    }
    Err(Error::Config(format!(
        "no structure with at most {:?} points after {MAX_STRUCTURE_DRAWS} draws",
        config.max_points
    )))
}

/// The `ceil(n (1 - p))`-th smallest value (nearest rank); values strictly
/// above it are the positives.
pub fn upper_quantile_threshold(values: &[f64], prevalence: f64) -> f64 {
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    // The small slack keeps e.g. 500 * 0.9 from rounding up to 451.
    let rank = ((n as f64 * (1.0 - prevalence)) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// Squared-exponential kernel matrix, row-major.
pub fn rbf_kernel(points: &[f64], dim: usize, length_scale: f64) -> Vec<f64> {
    let n = points.len() / dim;
    let mut k = vec![0.0; n * n];
    let denom = 2.0 * length_scale * length_scale;
    for a in 0..n {
        k[a * n + a] = 1.0;
        let xa = &points[a * dim..(a + 1) * dim];
        for b in 0..a {
            let xb = &points[b * dim..(b + 1) * dim];
            let d2: f64 = xa.iter().zip(xb).map(|(x, y)| (x - y) * (x - y)).sum();
            let v = (-d2 / denom).exp();
            k[a * n + b] = v;
            k[b * n + a] = v;
        }
    }
    k
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for t in 4 * chunks..a.len() {
        s += a[t] * b[t];
    }
    s
}

/// Lower Cholesky factor of `a + jitter * I` (row-major, upper part zero),
/// or `None` if a pivot is not positive.
pub fn cholesky(a: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = a[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            if i == j {
                let d = s + jitter;
                if !(d > 0.0) {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Factors `K + eps I`, starting at [`JITTER_START`] and growing tenfold up
/// to [`JITTER_MAX`]. Returns the factor and the jitter that worked.
pub fn jittered_cholesky(k: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let mut jitter = JITTER_START;
    loop {
        if let Some(l) = cholesky(k, n, jitter) {
            return Ok((l, jitter));
        }
        if jitter >= JITTER_MAX {
            return Err(Error::NotPositiveDefinite { jitter });
        }
        jitter = (jitter * 10.0).min(JITTER_MAX);
    }
}

/// One draw of a zero-mean GP with RBF kernel at `points`; also returns the
/// jitter used.
pub fn gp_sample(points: &[f64], dim: usize, length_scale: f64, rng: &mut seeding::Rng) -> Result<(Vec<f64>, f64)> {
    let n = points.len() / dim;
    if n == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Shape("GP sample needs at least one point".into()));
    }
    if !(length_scale > 0.0) {
        return Err(Error::Config(format!("length scale must be positive, got {length_scale}")));
    }
    let k = rbf_kernel(points, dim, length_scale);
    let (l, jitter) = jittered_cholesky(&k, n)?;
    Ok((draw_with_factor(&l, n, rng), jitter))
}

/// `L z` for standard normal `z`.
pub fn draw_with_factor(l: &[f64], n: usize, rng: &mut seeding::Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    (0..n).map(|i| dot(&l[i * n..i * n + i + 1], &z[..i + 1])).collect()
}
