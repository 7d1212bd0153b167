//! Per-decision cost of each policy at several problem sizes, plus the
//! cost of one training gradient.

use std::hint::black_box;
use std::sync::Arc;

use ans_core::policies::{LearnedPolicy, SearchView};
use ans_core::policynet::Standardizer;
use ans_core::session::{Episode, IndexConfig};
use ans_core::{
    featurize, seeding, synthgen, FeatureMatrix, GenConfig, ModelParams, Policy, PolicyKind, PolicyNet,
    ProblemContext,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const BUDGET: usize = 100;
const WARM_STEPS: usize = 20;
const SIZES: [usize; 3] = [1000, 2000, 4000];

/// An episode on an `n`-point 2D problem advanced by one-step queries.
fn warm_episode(n: usize) -> (ProblemContext, Episode) {
    let gen = GenConfig { dim_min: 2, dim_max: 2, max_points: None, ..GenConfig::default() };
    let mut rng = seeding::stream(7, seeding::PROBLEMS, n as u64);
    let g = synthgen::generate_sized(&gen, n, &mut rng).expect("generation succeeds");
    let ctx = ProblemContext::build(Arc::new(g.problem), ModelParams::default(), BUDGET - 1, IndexConfig::Auto, 7)
        .expect("index builds");
    let mut ep = ctx.start(11, BUDGET).expect("episode starts");
    let mut greedy = PolicyKind::OneStep.instantiate(0).unwrap();
    for _ in 0..WARM_STEPS {
        let d = ep.decide(greedy.as_mut()).unwrap();
        ep.query(d.chosen_index).unwrap();
    }
    (ctx, ep)
}

fn decide(c: &mut Criterion) {
    let mut group = c.benchmark_group("decide");
    group.sample_size(20);
    for n in SIZES {
        let (ctx, ep) = warm_episode(n);
        let view: SearchView<'_> = ep.view();
        let features = featurize(view.model, &ctx.feature_index, view.state).unwrap();
        let mut net = PolicyNet::random(3);
        net.set_standardizer(Standardizer::fit([&features])).unwrap();
        let mut policies: Vec<(&str, Box<dyn Policy>)> = vec![
            ("one-step", PolicyKind::OneStep.instantiate(0).unwrap()),
            ("ens", PolicyKind::ens().instantiate(0).unwrap()),
            ("learned", Box::new(LearnedPolicy::new(Arc::new(net)))),
        ];
        for (name, policy) in policies.iter_mut() {
            group.bench_with_input(BenchmarkId::new(*name, n), &n, |b, _| {
                b.iter(|| black_box(policy.decide(&view).unwrap()))
            });
        }
        group.bench_with_input(BenchmarkId::new("featurize", n), &n, |b, _| {
            b.iter(|| black_box(featurize(view.model, &ctx.feature_index, view.state).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let (ctx, ep) = warm_episode(1000);
    let view = ep.view();
    let full = featurize(view.model, &ctx.feature_index, view.state).unwrap();
    let states: Vec<FeatureMatrix> = (0..32)
        .map(|s| full.select(&(0..32).map(|r| (s * 29 + r * 31) % full.len()).collect::<Vec<_>>()))
        .collect();
    let batch: Vec<(&FeatureMatrix, usize)> = states.iter().map(|f| (f, 0)).collect();
    let mut net = PolicyNet::random(5);
    net.set_standardizer(Standardizer::fit(states.iter())).unwrap();
    c.bench_function("loss_and_grad/32x32", |b| b.iter(|| black_box(net.loss_and_grad(&batch).unwrap())));
}

criterion_group!(benches, decide, train_step);
criterion_main!(benches);
