//! Imitation of the ENS expert with dataset aggregation.
//!
//! Each iteration rolls the current network out on fresh generated problems,
//! labels every visited state with the expert's choice on that same state,
//! appends the records, retrains a fresh network on everything collected so
//! far and scores it by full searches on fixed validation problems.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{featurize, FeatureMatrix};
use crate::knn_model::ModelParams;
use crate::policies::{argmax_unlabeled, ens_scores, learned_policy, EnsBackend, EnsPolicy, LearnedPolicy};
use crate::policynet::{train, PolicyNet, Standardizer, TrainConfig};
use crate::seeding;
use crate::session::{run_episode, IndexConfig, ProblemContext};
use crate::synthgen::{self, GenConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaggerConfig {
    /// Master seed for problems, episodes, initialization and shuffling.
    /// The generator's own `seed` field is not used.
    pub seed: u64,
    pub iterations: usize,
    pub problems_per_iter: usize,
    pub validation_problems: usize,
    pub budget: usize,
    pub generator: GenConfig,
    pub model: ModelParams,
    pub index: IndexConfig,
    pub expert: EnsBackend,
    pub train: TrainConfig,
    /// Keep at most this many candidate rows per record: the expert's choice,
    /// the best half by expert score, and a uniform sample of the rest.
    pub max_candidates_per_record: Option<usize>,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        DaggerConfig {
            seed: 0,
            iterations: 50,
            problems_per_iter: 3,
            validation_problems: 3,
            budget: 100,
            generator: GenConfig::default(),
            model: ModelParams::default(),
            index: IndexConfig::default(),
            expert: EnsBackend::Accelerated,
            train: TrainConfig::default(),
            max_candidates_per_record: None,
        }
    }
}

impl DaggerConfig {
    /// A single-machine setting: 12 iterations on problems of 2 to 4
    /// dimensions and at most 1000 points, 32 candidate rows per record,
    /// 40 training epochs and 20 validation problems. About two minutes
    /// per seed on one core.
    pub fn desk(seed: u64) -> Self {
        DaggerConfig {
            seed,
            iterations: 12,
            validation_problems: 20,
            generator: GenConfig {
                dim_min: 2,
                dim_max: 4,
                max_points: Some(1000),
                ..GenConfig::default()
            },
            train: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 32,
                max_epochs: 40,
                ..TrainConfig::default()
            },
            max_candidates_per_record: Some(32),
            ..DaggerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.problems_per_iter == 0 || self.validation_problems == 0 {
            return Err(Error::Config(
                "iterations, problems per iteration and validation problems must be positive".into(),
            ));
        }
        if self.budget == 0 {
            return Err(Error::Config("imitation needs a positive budget".into()));
        }
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let g = &self.generator;
        let smallest = g.uniform_per_dim * g.dim_min + g.cluster_count_min * g.cluster_size_min;
        if self.budget + 2 > smallest {
            return Err(Error::Config(format!(
                "budget {} does not fit the smallest generated problem ({smallest} points)",
                self.budget
            )));
        }
        if self.max_candidates_per_record.is_some_and(|c| c < 2) {
            return Err(Error::Config("max_candidates_per_record must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub problem: String,
    pub iteration: usize,
    /// Budgeted queries made before this state.
    pub t: usize,
    /// Remaining budget at this state.
    pub remaining: usize,
    /// Point chosen by the expert.
    pub expert_index: usize,
    /// Point the learner actually queried.
    pub learner_index: usize,
}

/// One labeled state: candidate features and the row of the expert's choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub features: FeatureMatrix,
    pub expert: usize,
    pub meta: RecordMeta,
}

/// Append-only collection of labeled states.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DaggerDataset {
    records: Vec<Record>,
}

impl DaggerDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn append(&mut self, records: Vec<Record>) -> Result<()> {
        if let Some(bad) = records.iter().find(|r| r.expert >= r.features.len()) {
            return Err(Error::Shape(format!(
                "expert row {} of a {}-candidate record",
                bad.expert,
                bad.features.len()
            )));
        }
        self.records.extend(records);
        Ok(())
    }

    pub fn training_pairs(&self) -> Vec<(&FeatureMatrix, usize)> {
        self.records.iter().map(|r| (&r.features, r.expert)).collect()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let mut dataset = DaggerDataset::new();
        for line in BufReader::new(std::fs::File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                dataset.append(vec![serde_json::from_str(&line)?])?;
            }
        }
        Ok(dataset)
    }
}

/// What one learner rollout produced.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub records: Vec<Record>,
    pub utility: usize,
    /// Fraction of steps where the learner picked the expert's point.
    pub agreement: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    pub expert: EnsBackend,
    pub budget: usize,
    pub iteration: usize,
    pub max_candidates: Option<usize>,
}

/// Runs `net` for the whole budget, recording the expert's choice at every
/// visited state. The learner's choice drives the episode.
pub fn rollout_and_label(
    net: &PolicyNet,
    ctx: &ProblemContext,
    options: RolloutOptions,
    episode_seed: u64,
    subsample: &mut seeding::Rng,
) -> Result<Rollout> {
    if options.budget == 0 {
        return Ok(Rollout {
            records: Vec::new(),
            utility: 0,
            agreement: 1.0,
        });
    }
    let mut episode = ctx.start(episode_seed, options.budget)?;
    let mut records = Vec::with_capacity(options.budget);
    let mut agree = 0;
    while !episode.is_done() {
        let t = episode.state.t();
        let fail = |e: Error| Error::Rollout {
            problem: ctx.problem.name().to_string(),
            t,
            reason: e.to_string(),
        };
        let features = featurize(&episode.model, &ctx.feature_index, &episode.state).map_err(fail)?;
        let scores = ens_scores(&episode.model, &episode.state, options.expert, None).map_err(fail)?;
        let expert_index = argmax_unlabeled(&scores, &episode.state).map_err(fail)?;
        let learner_index = learned_policy(net, &features, &episode.state).map_err(fail)?.chosen_index;
        let expert_row = features
            .candidates()
            .iter()
            .position(|&c| c == expert_index)
            .ok_or_else(|| fail(Error::Shape("expert choice is not a candidate".into())))?;
        let (features, expert) = match options.max_candidates {
            Some(cap) if features.len() > cap => subsample_rows(&features, &scores, expert_row, cap, subsample),
            _ => (features, expert_row),
        };
        records.push(Record {
            features,
            expert,
            meta: RecordMeta {
                problem: ctx.problem.name().to_string(),
                iteration: options.iteration,
                t,
                remaining: episode.state.remaining_budget(),
                expert_index,
                learner_index,
            },
        });
        agree += usize::from(learner_index == expert_index);
        episode.query(learner_index).map_err(fail)?;
    }
    let steps = records.len();
    Ok(Rollout {
        records,
        utility: episode.state.targets_found(),
        agreement: if steps == 0 { 1.0 } else { agree as f64 / steps as f64 },
    })
}

fn subsample_rows(
    features: &FeatureMatrix,
    scores: &[f64],
    expert_row: usize,
    cap: usize,
    rng: &mut seeding::Rng,
) -> (FeatureMatrix, usize) {
    let cands = features.candidates();
    let mut by_score: Vec<usize> = (0..cands.len()).filter(|&r| r != expert_row).collect();
    by_score.sort_by(|&a, &b| scores[cands[b]].total_cmp(&scores[cands[a]]).then(a.cmp(&b)));
    let top = (cap / 2).saturating_sub(1);
    let mut keep: Vec<usize> = by_score[..top].to_vec();
    let rest = &mut by_score[top..];
    let (sampled, _) = rest.partial_shuffle(rng, cap - 1 - top);
    keep.extend_from_slice(sampled);
    keep.push(expert_row);
    keep.sort_unstable();
    let expert = keep.binary_search(&expert_row).expect("expert row kept");
    (features.select(&keep), expert)
}

/// Fraction of records where the network's top row is the expert's.
pub fn imitation_accuracy(net: &PolicyNet, records: &[Record]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| {
            let logits = net.forward(&r.features);
            let mut best = 0;
            for (j, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = j;
                }
            }
            best == r.expert
        })
        .count();
    hits as f64 / records.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub dataset_size: usize,
    pub new_records: usize,
    pub final_loss: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub rollout_utility: f64,
    pub rollout_agreement: f64,
    pub validation_utilities: Vec<usize>,
    pub mean_validation_utility: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct DaggerOutcome {
    pub net: PolicyNet,
    /// 1-based iteration whose network was selected.
    pub best_iteration: usize,
    pub reports: Vec<IterationReport>,
    pub dataset: DaggerDataset,
    /// Network after each iteration, in order.
    pub iterates: Vec<PolicyNet>,
    /// Expert utility on the same validation episodes, for reference.
    pub expert_validation_utilities: Vec<usize>,
}

fn problem_context(config: &DaggerConfig, stream: &str, slot: u64) -> Result<ProblemContext> {
    let mut rng = seeding::stream(config.seed, stream, slot);
    let generated = synthgen::generate(&config.generator, &mut rng)?;
    let problem = generated.problem.renamed(format!("{stream}-{}-{slot}", config.seed));
    ProblemContext::build(
        Arc::new(problem),
        config.model,
        config.budget.saturating_sub(1),
        config.index,
        seeding::derive(config.seed, seeding::KMEANS, slot),
    )
}

fn validation_episode_seed(config: &DaggerConfig, v: u64) -> u64 {
    seeding::derive(seeding::derive(config.seed, seeding::VALIDATION, v), seeding::EPISODE, 0)
}

/// The fixed validation problems of a run, with their episode seeds.
pub fn validation_set(config: &DaggerConfig) -> Result<Vec<(ProblemContext, u64)>> {
    (0..config.validation_problems as u64)
        .map(|v| Ok((problem_context(config, seeding::VALIDATION, v)?, validation_episode_seed(config, v))))
        .collect()
}

pub fn dagger_train(config: &DaggerConfig) -> Result<DaggerOutcome> {
    config.validate()?;
    let validation = validation_set(config)?;
    let expert_validation_utilities = validation
        .iter()
        .map(|(ctx, seed)| {
            let mut expert = EnsPolicy::new(config.expert);
            Ok(run_episode(ctx, &mut expert, config.budget, *seed)?.final_utility())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut net = PolicyNet::random(seeding::derive(config.seed, seeding::NET_INIT, 0));
    let mut dataset = DaggerDataset::new();
    let mut reports = Vec::with_capacity(config.iterations);
    let mut iterates = Vec::with_capacity(config.iterations);
    let mut subsample = seeding::stream(config.seed, seeding::SUBSAMPLE, 0);

    for iteration in 1..=config.iterations {
        let started = Instant::now();
        let options = RolloutOptions {
            expert: config.expert,
            budget: config.budget,
            iteration,
            max_candidates: config.max_candidates_per_record,
        };
        let before = dataset.len();
        let (mut utility, mut agreement) = (0.0, 0.0);
        for j in 0..config.problems_per_iter {
            let slot = ((iteration - 1) * config.problems_per_iter + j) as u64;
            let ctx = problem_context(config, seeding::PROBLEMS, slot)?;
            let episode_seed = seeding::derive(config.seed, seeding::EPISODE, slot);
            let rollout = rollout_and_label(&net, &ctx, options, episode_seed, &mut subsample)?;
            utility += rollout.utility as f64;
            agreement += rollout.agreement;
            dataset.append(rollout.records)?;
        }

        let mut fresh = PolicyNet::random(seeding::derive(config.seed, seeding::NET_INIT, iteration as u64));
        fresh.set_standardizer(Standardizer::fit(dataset.records().iter().map(|r| &r.features)))?;
        let train_config = TrainConfig {
            seed: seeding::derive(config.seed, seeding::SHUFFLE, iteration as u64),
            ..config.train
        };
        let outcome = train(&fresh, &dataset.training_pairs(), &train_config)?;
        net = outcome.net.clone();

        let shared = Arc::new(net.clone());
        let validation_utilities = validation
            .iter()
            .map(|(ctx, seed)| {
                let mut learner = LearnedPolicy::new(Arc::clone(&shared));
                Ok(run_episode(ctx, &mut learner, config.budget, *seed)?.final_utility())
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_validation_utility =
            validation_utilities.iter().sum::<usize>() as f64 / validation_utilities.len() as f64;
        let per_problem = config.problems_per_iter as f64;
        let report = IterationReport {
            iteration,
            dataset_size: dataset.len(),
            new_records: dataset.len() - before,
            final_loss: outcome.best_loss(),
            epochs: outcome.loss_curve.len() - 1,
            best_epoch: outcome.best_epoch,
            rollout_utility: utility / per_problem,
            rollout_agreement: agreement / per_problem,
            validation_utilities,
            mean_validation_utility,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "iteration {iteration}: {} records, loss {:.4}, validation {:.2}, agreement {:.2}",
            report.dataset_size, report.final_loss, report.mean_validation_utility, report.rollout_agreement
        );
        reports.push(report);
        iterates.push(net.clone());
    }

    let mut best = 0;
    for (i, r) in reports.iter().enumerate() {
        if r.mean_validation_utility > reports[best].mean_validation_utility {
            best = i;
        }
    }
    Ok(DaggerOutcome {
        net: iterates[best].clone(),
        best_iteration: best + 1,
        reports,
        dataset,
        iterates,
        expert_validation_utilities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::ens;
    use crate::session::Episode;

    fn tiny() -> DaggerConfig {
        DaggerConfig {
            seed: 5,
            iterations: 2,
            problems_per_iter: 1,
            validation_problems: 1,
            budget: 8,
            generator: GenConfig {
                dim_min: 2,
                dim_max: 2,
                max_points: Some(420),
                ..GenConfig::default()
            },
            model: ModelParams { k: 10, ..Default::default() },
            train: TrainConfig {
                max_epochs: 10,
                ..TrainConfig::default()
            },
            ..DaggerConfig::default()
        }
    }

    fn options(budget: usize) -> RolloutOptions {
        RolloutOptions {
            expert: EnsBackend::Accelerated,
            budget,
            iteration: 1,
            max_candidates: None,
        }
    }

    #[test]
    fn one_record_per_step() {
        let config = tiny();
        let ctx = problem_context(&config, seeding::PROBLEMS, 0).unwrap();
        let net = PolicyNet::random(1);
        let mut rng = seeding::rng(0);
        let r = rollout_and_label(&net, &ctx, options(5), 3, &mut rng).unwrap();
        assert_eq!(r.records.len(), 5);
        assert_eq!(r.records.iter().map(|x| x.meta.t).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(r.records[0].meta.remaining, 5);
        let empty = rollout_and_label(&net, &ctx, options(0), 3, &mut rng).unwrap();
        assert!(empty.records.is_empty());
    }

    #[test]
    fn labels_match_replayed_expert() {
        let config = tiny();
        let ctx = problem_context(&config, seeding::PROBLEMS, 1).unwrap();
        let net = PolicyNet::random(2);
        let r = rollout_and_label(&net, &ctx, options(8), 11, &mut seeding::rng(0)).unwrap();
        let mut replay = Episode::start(&ctx, 11, 8).unwrap();
        for rec in &r.records {
            let expert = ens(&replay.model, &replay.state, EnsBackend::Naive).unwrap().chosen_index;
            assert_eq!(expert, rec.meta.expert_index);
            assert_eq!(rec.features.candidates()[rec.expert], expert);
            replay.query(rec.meta.learner_index).unwrap();
        }
        assert_eq!(replay.state.targets_found(), r.utility);
    }

    #[test]
    fn capped_records_keep_the_expert() {
        let config = tiny();
        let ctx = problem_context(&config, seeding::PROBLEMS, 2).unwrap();
        let opts = RolloutOptions {
            max_candidates: Some(16),
            ..options(6)
        };
        let r = rollout_and_label(&PolicyNet::random(3), &ctx, opts, 4, &mut seeding::rng(1)).unwrap();
        for rec in &r.records {
            assert_eq!(rec.features.len(), 16);
            assert_eq!(rec.features.candidates()[rec.expert], rec.meta.expert_index);
            assert!(rec.features.candidates().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn full_run_is_deterministic_and_linear() {
        let config = tiny();
        let a = dagger_train(&config).unwrap();
        let b = dagger_train(&config).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.reports.iter().map(|r| r.final_loss).collect::<Vec<_>>(), b.reports.iter().map(|r| r.final_loss).collect::<Vec<_>>());
        assert_eq!(a.best_iteration, b.best_iteration);
        assert_eq!(a.net, b.net);
        let sizes: Vec<usize> = a.reports.iter().map(|r| r.dataset_size).collect();
        assert_eq!(sizes, vec![8, 16]);
        let best = &a.reports[a.best_iteration - 1];
        assert!(best.mean_validation_utility >= a.reports[0].mean_validation_utility);
    }

    #[test]
    fn jsonl_round_trip() {
        let config = tiny();
        let ctx = problem_context(&config, seeding::PROBLEMS, 0).unwrap();
        let r = rollout_and_label(&PolicyNet::random(1), &ctx, options(3), 3, &mut seeding::rng(0)).unwrap();
        let mut d = DaggerDataset::new();
        d.append(r.records).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        d.write_jsonl(&path).unwrap();
        assert_eq!(DaggerDataset::read_jsonl(&path).unwrap(), d);
    }

    #[test]
    fn config_checks() {
        tiny().validate().unwrap();
        DaggerConfig::default().validate().unwrap();
        assert!(DaggerConfig { iterations: 0, ..tiny() }.validate().is_err());
        assert!(DaggerConfig { budget: 1000, ..tiny() }.validate().is_err());
        assert!(DaggerConfig { max_candidates_per_record: Some(1), ..tiny() }.validate().is_err());
    }
}
