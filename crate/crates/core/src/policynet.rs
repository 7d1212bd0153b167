//! The amortized policy: a shared-weight MLP that maps each candidate's
//! feature row to a logit, trained with softmax cross-entropy over the
//! candidate set of each state.
//!
//! Layout is 4 -> 8 -> 16 -> 32 -> 16 -> 8 -> 1 with ReLU on hidden layers.
//! Inputs are z-scored by a [`Standardizer`] frozen into the model.
//! Activations are stored feature-major (`width x rows`) so that every inner
//! loop runs over the candidate rows of a state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::binio::ByteCursor;
use crate::error::{Error, Result};
use crate::featurize::{FeatureMatrix, NUM_FEATURES};
use crate::seeding;

/// Layer widths, input first.
pub const ARCHITECTURE: [usize; 7] = [NUM_FEATURES, 8, 16, 32, 16, 8, 1];
const NUM_LAYERS: usize = ARCHITECTURE.len() - 1;

const MAGIC: &[u8; 8] = b"ANSPNET\0";
const FORMAT_VERSION: u32 = 1;

/// Total number of weights and biases.
pub const fn param_count() -> usize {
    let mut total = 0;
    let mut l = 0;
    while l < NUM_LAYERS {
        total += ARCHITECTURE[l] * ARCHITECTURE[l + 1] + ARCHITECTURE[l + 1];
        l += 1;
    }
    total
}

/// Offset of layer `l`'s weight block; its biases follow the weights.
fn layer_offset(l: usize) -> usize {
    (0..l)
        .map(|m| ARCHITECTURE[m] * ARCHITECTURE[m + 1] + ARCHITECTURE[m + 1])
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; NUM_FEATURES],
    pub scale: [f64; NUM_FEATURES],
}

impl Default for Standardizer {
    fn default() -> Self {
        Standardizer {
            mean: [0.0; NUM_FEATURES],
            scale: [1.0; NUM_FEATURES],
        }
    }
}

impl Standardizer {
    /// Per-feature mean and standard deviation over every row; a
    /// (near-)constant feature gets scale 1.
    pub fn fit<'a>(data: impl IntoIterator<Item = &'a FeatureMatrix>) -> Self {
        let mut count = 0usize;
        let mut sum = [0.0; NUM_FEATURES];
        let mut sum_sq = [0.0; NUM_FEATURES];
        for fm in data {
            for row in fm.rows() {
                count += 1;
                for f in 0..NUM_FEATURES {
                    sum[f] += row[f];
                    sum_sq[f] += row[f] * row[f];
                }
            }
        }
        if count == 0 {
            return Standardizer::default();
        }
        let mut out = Standardizer::default();
        for f in 0..NUM_FEATURES {
            let mean = sum[f] / count as f64;
            let var = (sum_sq[f] / count as f64 - mean * mean).max(0.0);
            let sd = var.sqrt();
            out.mean[f] = mean;
            out.scale[f] = if sd > 1e-8 { sd } else { 1.0 };
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) && self.mean.iter().all(|m| m.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("standardizer scales must be positive and finite".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    params: Vec<f64>,
    standardizer: Standardizer,
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Default)]
struct Trace {
    rows: usize,
    /// `acts[0]` is the standardized input; `acts[l]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl PolicyNet {
    pub fn zeros() -> Self {
        PolicyNet {
            params: vec![0.0; param_count()],
            standardizer: Standardizer::default(),
        }
    }

    /// Uniform He initialization `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
    /// zero biases.
    pub fn random(seed: u64) -> Self {
        let mut rng = seeding::rng(seed);
        let mut net = PolicyNet::zeros();
        for l in 0..NUM_LAYERS {
            let (fan_in, fan_out) = (ARCHITECTURE[l], ARCHITECTURE[l + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let off = layer_offset(l);
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn from_parts(params: Vec<f64>, standardizer: Standardizer) -> Result<Self> {
        if params.len() != param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                param_count(),
                params.len()
            )));
        }
        standardizer.validate()?;
        Ok(PolicyNet { params, standardizer })
    }

    fn params_finite(&self) -> bool {
        self.params.iter().all(|w| w.is_finite())
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, standardizer: Standardizer) -> Result<()> {
        standardizer.validate()?;
        self.standardizer = standardizer;
        Ok(())
    }

    fn weights(&self, l: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = (ARCHITECTURE[l], ARCHITECTURE[l + 1]);
        let off = layer_offset(l);
        let (w, rest) = self.params[off..].split_at(fan_in * fan_out);
        (w, &rest[..fan_out])
    }

    fn run(&self, features: &FeatureMatrix, trace: &mut Trace) {
        let rows = features.len();
        trace.rows = rows;
        trace.acts.resize_with(NUM_LAYERS + 1, Vec::new);
        let input = &mut trace.acts[0];
        input.clear();
        input.resize(NUM_FEATURES * rows, 0.0);
        for (r, row) in features.rows().iter().enumerate() {
            for f in 0..NUM_FEATURES {
                input[f * rows + r] = (row[f] - self.standardizer.mean[f]) / self.standardizer.scale[f];
            }
        }
        for l in 0..NUM_LAYERS {
            let (fan_in, fan_out) = (ARCHITECTURE[l], ARCHITECTURE[l + 1]);
            let (w, b) = self.weights(l);
            let (done, todo) = trace.acts.split_at_mut(l + 1);
            let prev = &done[l];
            let out = &mut todo[0];
            out.clear();
            out.resize(fan_out * rows, 0.0);
            for o in 0..fan_out {
                let z = &mut out[o * rows..(o + 1) * rows];
                z.iter_mut().for_each(|v| *v = b[o]);
                for i in 0..fan_in {
                    let wi = w[o * fan_in + i];
                    for (v, a) in z.iter_mut().zip(&prev[i * rows..(i + 1) * rows]) {
                        *v += wi * a;
                    }
                }
                if l + 1 < NUM_LAYERS {
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
        }
    }

    /// One logit per candidate row.
    pub fn forward(&self, features: &FeatureMatrix) -> Vec<f64> {
        let mut trace = Trace::default();
        self.run(features, &mut trace);
        trace.acts.pop().unwrap()
    }

    /// Loss of one state and, if `grad` is given, its gradient added in
    /// scaled by `weight`.
    fn state_loss(
        &self,
        features: &FeatureMatrix,
        expert: usize,
        trace: &mut Trace,
        grad: Option<(&mut [f64], f64)>,
        delta: &mut Vec<f64>,
        delta_prev: &mut Vec<f64>,
    ) -> f64 {
        self.run(features, trace);
        let rows = trace.rows;
        let logits = &trace.acts[NUM_LAYERS];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let loss = log_z - logits[expert];
        let Some((grad, weight)) = grad else {
            return loss;
        };

        // d loss / d logits = softmax - onehot
        delta.clear();
        delta.extend(logits.iter().map(|z| (z - log_z).exp() * weight));
        delta[expert] -= weight;

        for l in (0..NUM_LAYERS).rev() {
            let (fan_in, fan_out) = (ARCHITECTURE[l], ARCHITECTURE[l + 1]);
            let off = layer_offset(l);
            let prev = &trace.acts[l];
            {
                let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    let d = &delta[o * rows..(o + 1) * rows];
                    gb[o] += lane_sum(d);
                    for i in 0..fan_in {
                        let a = &prev[i * rows..(i + 1) * rows];
                        gw[o * fan_in + i] += lane_dot(d, a);
                    }
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.weights(l);
            delta_prev.clear();
            delta_prev.resize(fan_in * rows, 0.0);
            for o in 0..fan_out {
                let d = &delta[o * rows..(o + 1) * rows];
                for i in 0..fan_in {
                    let wi = w[o * fan_in + i];
                    for (g, x) in delta_prev[i * rows..(i + 1) * rows].iter_mut().zip(d) {
                        *g += wi * x;
                    }
                }
            }
            // ReLU: prev holds post-activation values, zero exactly where inactive.
            for (g, a) in delta_prev.iter_mut().zip(prev) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            std::mem::swap(delta, delta_prev);
        }
        loss
    }

    fn check_batch(batch: &[(&FeatureMatrix, usize)]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        for (fm, expert) in batch {
            if *expert >= fm.len() {
                return Err(Error::Shape(format!(
                    "expert position {expert} out of range for {} candidates",
                    fm.len()
                )));
            }
        }
        Ok(())
    }

    /// Mean cross-entropy over states and its exact gradient.
    pub fn loss_and_grad(&self, batch: &[(&FeatureMatrix, usize)]) -> Result<(f64, Vec<f64>)> {
        Self::check_batch(batch)?;
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate(batch, Some(&mut grad));
        Ok((loss, grad))
    }

    pub fn loss(&self, batch: &[(&FeatureMatrix, usize)]) -> Result<f64> {
        Self::check_batch(batch)?;
        Ok(self.accumulate(batch, None))
    }

    fn accumulate(&self, batch: &[(&FeatureMatrix, usize)], mut grad: Option<&mut Vec<f64>>) -> f64 {
        let weight = 1.0 / batch.len() as f64;
        let mut trace = Trace::default();
        let (mut d, mut dp) = (Vec::new(), Vec::new());
        let mut total = 0.0;
        for (fm, expert) in batch {
            let g = grad.as_deref_mut().map(|g| (g.as_mut_slice(), weight));
            total += self.state_loss(fm, *expert, &mut trace, g, &mut d, &mut dp);
        }
        total * weight
    }

    /// Signs of every hidden pre-activation; used to spot ReLU kinks.
    fn activation_pattern(&self, batch: &[(&FeatureMatrix, usize)]) -> Vec<bool> {
        let mut trace = Trace::default();
        let mut pattern = Vec::new();
        for (fm, _) in batch {
            self.run(fm, &mut trace);
            for acts in &trace.acts[1..NUM_LAYERS] {
                pattern.extend(acts.iter().map(|a| *a > 0.0));
            }
        }
        pattern
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(ARCHITECTURE.len() as u32).to_le_bytes());
        for w in ARCHITECTURE {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for v in self.standardizer.mean.iter().chain(&self.standardizer.scale) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = ByteCursor::new(bytes);
        let short = || "file is truncated".to_string();
        if cur.take(8).ok_or_else(short)? != MAGIC {
            return Err("not a policy network file".into());
        }
        let version = cur.u32().ok_or_else(short)?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let depth = cur.u32().ok_or_else(short)? as usize;
        let widths: Vec<usize> = (0..depth.min(64))
            .map(|_| cur.u32().map(|w| w as usize))
            .collect::<Option<_>>()
            .ok_or_else(short)?;
        if widths != ARCHITECTURE {
            return Err(format!("architecture {widths:?} does not match {ARCHITECTURE:?}"));
        }
        let mut standardizer = Standardizer::default();
        for f in 0..NUM_FEATURES {
            standardizer.mean[f] = cur.f64().ok_or_else(short)?;
        }
        for f in 0..NUM_FEATURES {
            standardizer.scale[f] = cur.f64().ok_or_else(short)?;
        }
        let count = cur.u32().ok_or_else(short)? as usize;
        if count != param_count() {
            return Err(format!("expected {} parameters, header says {count}", param_count()));
        }
        let params: Vec<f64> = (0..count).map(|_| cur.f64()).collect::<Option<_>>().ok_or_else(short)?;
        if cur.remaining() != 0 {
            return Err("trailing bytes after parameters".into());
        }
        PolicyNet::from_parts(params, standardizer).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// States per minibatch.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without sufficient relative improvement before stopping.
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 200,
            patience: 5,
            min_rel_improvement: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.batch_size >= 1
            && self.patience >= 1
            && self.min_rel_improvement >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest full-dataset loss seen.
    pub net: PolicyNet,
    /// Full-dataset loss before training and after every epoch.
    pub loss_curve: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best_loss(&self) -> f64 {
        self.loss_curve[self.best_epoch]
    }
}

/// Adam over shuffled minibatches of states until the loss plateaus or the
/// epoch cap is hit. The standardizer of `net` is left untouched.
pub fn train(net: &PolicyNet, dataset: &[(&FeatureMatrix, usize)], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    PolicyNet::check_batch(dataset)?;
    let mut current = net.clone();
    let mut rng = seeding::stream(config.seed, seeding::SHUFFLE, 0);
    let p = current.params.len();
    let (mut m, mut v) = (vec![0.0; p], vec![0.0; p]);
    let mut step = 0i32;

    let initial = current.loss(dataset)?;
    if !initial.is_finite() || !current.params_finite() {
        return Err(Error::Diverged { epoch: 0, loss: initial });
    }
    let mut loss_curve = vec![initial];
    let mut best = (current.clone(), initial, 0usize);
    let mut stale = 0;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i]));
            let (_, grad) = current.loss_and_grad(&batch)?;
            step += 1;
            let c1 = 1.0 - config.beta1.powi(step);
            let c2 = 1.0 - config.beta2.powi(step);
            for ((w, g), (mi, vi)) in current.params.iter_mut().zip(&grad).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = config.beta1 * *mi + (1.0 - config.beta1) * g;
                *vi = config.beta2 * *vi + (1.0 - config.beta2) * g * g;
                *w -= config.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + config.epsilon);
            }
        }
        let loss = current.loss(dataset)?;
        if !loss.is_finite() || !current.params_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        loss_curve.push(loss);
        let prev_best = best.1;
        if loss < prev_best {
            best = (current.clone(), loss, epoch);
        }
        if prev_best - loss <= config.min_rel_improvement * prev_best.abs() {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        } else {
            stale = 0;
        }
    }
    Ok(TrainOutcome {
        net: best.0,
        loss_curve,
        best_epoch: best.2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Components skipped because a finite-difference step crossed a ReLU kink.
    pub skipped: usize,
}

/// Relative errors below this gradient magnitude are measured absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient with central differences of step `h`.
pub fn gradient_check(net: &PolicyNet, batch: &[(&FeatureMatrix, usize)], h: f64) -> Result<GradCheck> {
    let (_, analytic) = net.loss_and_grad(batch)?;
    let pattern = net.activation_pattern(batch);
    let mut probe = net.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (k, &a) in analytic.iter().enumerate() {
        let orig = probe.params[k];
        probe.params[k] = orig + h;
        let plus = probe.loss(batch)?;
        let kink = probe.activation_pattern(batch) != pattern;
        probe.params[k] = orig - h;
        let minus = probe.loss(batch)?;
        let kink = kink || probe.activation_pattern(batch) != pattern;
        probe.params[k] = orig;
        if kink {
            out.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        out.max_rel_error = out.max_rel_error.max(rel);
        out.checked += 1;
    }
    Ok(out)
}

/// Random nets and states for [`gradient_check`]; returns one result per
/// configuration.
pub fn random_gradient_checks(seed: u64, configs: usize, h: f64) -> Result<Vec<GradCheck>> {
    (0..configs as u64)
        .map(|c| {
            let mut rng = seeding::stream(seed, "gradcheck", c);
            let mut net = PolicyNet::random(rng.random());
            // Nonzero biases so the check covers their gradients too.
            for l in 0..NUM_LAYERS {
                let (fan_in, fan_out) = (ARCHITECTURE[l], ARCHITECTURE[l + 1]);
                let off = layer_offset(l) + fan_in * fan_out;
                for b in &mut net.params[off..off + fan_out] {
                    *b = rng.random_range(-0.5..0.5);
                }
            }
            let states: Vec<FeatureMatrix> = (0..rng.random_range(1..4))
                .map(|_| {
                    let rows = rng.random_range(1..7);
                    let budget = rng.random_range(1..100) as f64;
                    let feats = (0..rows)
                        .map(|_| {
                            [
                                rng.random_range(0.01..0.99),
                                budget,
                                rng.random_range(0.0..budget),
                                rng.random_range(0.0..budget),
                            ]
                        })
                        .collect();
                    FeatureMatrix::new(feats, (0..rows).collect()).unwrap()
                })
                .collect();
            let mut std = Standardizer::fit(&states);
            std.scale.iter_mut().for_each(|s| *s = s.max(0.5));
            net.set_standardizer(std)?;
            let batch: Vec<(&FeatureMatrix, usize)> = states
                .iter()
                .map(|s| (s, rng.random_range(0..s.len())))
                .collect();
            gradient_check(&net, &batch, h)
        })
        .collect()
}

/// Dot product with four independent accumulators so it vectorizes.
fn lane_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn lane_sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().sum();
    for x in chunks {
        for k in 0..4 {
            acc[k] += x[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fm(rows: &[[f64; 4]]) -> FeatureMatrix {
        FeatureMatrix::new(rows.to_vec(), (0..rows.len()).collect()).unwrap()
    }

    #[test]
    fn architecture_is_fixed() {
        assert_eq!(ARCHITECTURE, [4, 8, 16, 32, 16, 8, 1]);
        assert_eq!(param_count(), 1401);
    }

    #[test]
    fn zero_net_gives_zero_logits() {
        let net = PolicyNet::zeros();
        let x = fm(&[[0.3, 10.0, 2.0, 5.0], [0.9, 10.0, 0.0, 1.0]]);
        assert_eq!(net.forward(&x), vec![0.0, 0.0]);
    }

    #[test]
    fn rows_are_scored_independently() {
        let net = PolicyNet::random(3);
        let a = [0.3, 10.0, 2.0, 5.0];
        let b = [0.7, 10.0, 4.0, 1.0];
        let single = net.forward(&fm(&[a, b]));
        let dup = net.forward(&fm(&[a, b, a]));
        assert_eq!(dup[0], single[0]);
        assert_eq!(dup[1], single[1]);
        assert_eq!(dup[2], single[0]);
    }

    #[test]
    fn hand_computed_forward() {
        // Layer 1 passes feature 0 through unit 0 and -feature 0 through unit 1;
        // every later layer routes unit 0 to unit 0 (weight 2) and unit 1 to
        // unit 1 (weight 1); the output is unit0 - unit1 + 0.25.
        let mut net = PolicyNet::zeros();
        let (off, w1) = (layer_offset(0), 4);
        net.params[off] = 1.0;
        net.params[off + w1] = -1.0;
        net.params[off + 8 * 4 + 1] = 0.5; // bias of unit 1
        for l in 1..NUM_LAYERS - 1 {
            let fan_in = ARCHITECTURE[l];
            let off = layer_offset(l);
            net.params[off] = 2.0;
            net.params[off + fan_in + 1] = 1.0;
        }
        let l = NUM_LAYERS - 1;
        let off = layer_offset(l);
        net.params[off] = 1.0;
        net.params[off + 1] = -1.0;
        net.params[off + 8] = 0.25;
        let x = fm(&[[0.2, 3.0, 1.0, 1.0], [-0.1, 3.0, 1.0, 1.0]]);
        let logits = net.forward(&x);
        // Candidate 0: unit0 = relu(0.2) = 0.2, unit1 = relu(-0.2 + 0.5) = 0.3.
        //   After four doubling layers unit0 = 3.2; unit1 stays 0.3.
        let expect0 = 0.2 * 16.0 - 0.3 + 0.25;
        // Candidate 1: unit0 = relu(-0.1) = 0, unit1 = relu(0.1 + 0.5) = 0.6.
        let expect1 = 0.0 - 0.6 + 0.25;
        assert!((logits[0] - expect0).abs() < 1e-12, "{}", logits[0]);
        assert!((logits[1] - expect1).abs() < 1e-12, "{}", logits[1]);
    }

    #[test]
    fn singleton_state_has_zero_loss_and_gradient() {
        let net = PolicyNet::random(1);
        let x = fm(&[[0.5, 4.0, 1.0, 2.0]]);
        let (loss, grad) = net.loss_and_grad(&[(&x, 0)]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn equal_logits_cost_ln2() {
        let net = PolicyNet::random(2);
        let row = [0.5, 4.0, 1.0, 2.0];
        let x = fm(&[row, row]);
        for e in 0..2 {
            let loss = net.loss(&[(&x, e)]).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_errors() {
        let net = PolicyNet::random(2);
        assert!(net.loss_and_grad(&[]).is_err());
        let x = fm(&[[0.5, 4.0, 1.0, 2.0]]);
        assert!(matches!(net.loss_and_grad(&[(&x, 1)]), Err(Error::Shape(_))));
    }

    #[test]
    fn finite_difference_agreement() {
        let checks = random_gradient_checks(11, 20, 1e-5).unwrap();
        for c in checks {
            assert!(c.max_rel_error <= 1e-4, "{c:?}");
            assert!(c.checked > param_count() * 9 / 10, "{c:?}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let mut net = PolicyNet::random(5);
        net.set_standardizer(Standardizer {
            mean: [0.1, 50.0, 3.0, 7.5],
            scale: [0.2, 28.0, 1.5, 3.25],
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        net.save(&path).unwrap();
        let back = PolicyNet::load(&path).unwrap();
        assert_eq!(back, net);
        let x = fm(&[[0.3, 10.0, 2.0, 5.0], [0.9, 90.0, 7.0, 1.0]]);
        let (a, b) = (net.forward(&x), back.forward(&x));
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(PolicyNet::load(&path), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[16] = 9; // first width
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(PolicyNet::load(&path), Err(Error::Format { .. })));
    }

    fn separable_dataset() -> Vec<FeatureMatrix> {
        // The expert always picks the candidate with the larger feature 0.
        let mut rng = seeding::rng(17);
        (0..64)
            .map(|_| {
                let hi = rng.random_range(0.6..0.95);
                let lo = rng.random_range(0.05..0.4);
                let b = rng.random_range(1.0..100.0);
                let (x, y) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
                if rng.random_bool(0.5) {
                    fm(&[[hi, b, x, y], [lo, b, y, x]])
                } else {
                    fm(&[[lo, b, y, x], [hi, b, x, y]])
                }
            })
            .collect()
    }

    fn expert_of(x: &FeatureMatrix) -> usize {
        usize::from(x.rows()[1][0] > x.rows()[0][0])
    }

    #[test]
    fn learns_a_separable_choice() {
        let data = separable_dataset();
        let batch: Vec<(&FeatureMatrix, usize)> = data.iter().map(|x| (x, expert_of(x))).collect();
        let mut net = PolicyNet::random(4);
        net.set_standardizer(Standardizer::fit(&data)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            max_epochs: 300,
            patience: 20,
            ..TrainConfig::default()
        };
        let out = train(&net, &batch, &cfg).unwrap();
        assert!(out.best_loss() < 0.1, "{:?}", out.loss_curve.last());
        // Best-seen loss never increases.
        let mut best = f64::INFINITY;
        for &l in &out.loss_curve {
            best = best.min(l);
        }
        assert_eq!(best, out.best_loss());
    }

    #[test]
    fn zero_learning_rate_changes_nothing_and_seed_fixes_the_curve() {
        let data = separable_dataset();
        let batch: Vec<(&FeatureMatrix, usize)> = data.iter().map(|x| (x, expert_of(x))).collect();
        let net = PolicyNet::random(8);
        let frozen = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        assert_eq!(train(&net, &batch, &frozen).unwrap().net, net);

        let cfg = TrainConfig {
            max_epochs: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(&net, &batch, &cfg).unwrap();
        let b = train(&net, &batch, &cfg).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn divergence_is_reported() {
        let data = separable_dataset();
        let batch: Vec<(&FeatureMatrix, usize)> = data.iter().map(|x| (x, expert_of(x))).collect();
        let mut net = PolicyNet::random(8);
        net.params_mut()[0] = f64::NAN;
        assert!(matches!(
            train(&net, &batch, &TrainConfig::default()),
            Err(Error::Diverged { epoch: 0, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn loss_is_shift_invariant(seed in 0u64..1000, shift in -50.0f64..50.0, rows in 2usize..8) {
            let mut net = PolicyNet::random(seed);
            let mut rng = seeding::rng(seed);
            let x = fm(&(0..rows).map(|_| [rng.random(), 5.0, rng.random(), rng.random()]).collect::<Vec<_>>());
            let expert = rng.random_range(0..rows);
            let base = net.loss(&[(&x, expert)]).unwrap();
            let before = net.forward(&x);
            // Shifting the output bias adds a constant to every logit.
            let last = param_count() - 1;
            net.params_mut()[last] += shift;
            let shifted = net.loss(&[(&x, expert)]).unwrap();
            prop_assert!((base - shifted).abs() < 1e-12);
            let after = net.forward(&x);
            let arg = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(arg(&before), arg(&after));
        }
    }
}

