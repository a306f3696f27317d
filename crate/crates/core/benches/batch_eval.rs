use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tabletop_core::exec::ExecMode;
use tabletop_core::model::{DecodeStrategy, LossOptions, Policy, Vocabulary};
use tabletop_core::pipeline::{evaluate, finetune_samples, Agent, EvalConfig, TrainConfig};
use tabletop_core::tasks::{generate_dataset, Level, TaskSuite};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn bench(c: &mut Criterion) {
    let cfg = TrainConfig::desk();
    let suite = TaskSuite::new(cfg.task.clone()).unwrap();
    let shard = generate_dataset(&suite, Level::L1, &cfg.task.split.train(), 8, 1, ExecMode::Sequential).unwrap();
    let samples = finetune_samples(&shard);
    let policy = Policy::new(cfg.policy.clone(), Vocabulary::standard(&cfg.task.sim), 0).unwrap();
    let opts = LossOptions::eval(cfg.policy.decode_mode);

    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &m| {
            b.iter(|| black_box(policy.batch_gradients(&samples, &opts, m).unwrap()))
        });
    }
    g.finish();

    let ec = EvalConfig {
        levels: vec![Level::L1],
        tasks: None,
        episodes: 4,
        seed: 3,
        prompt_edit: false,
    };
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &m| {
            b.iter(|| {
                let agent = Agent::Policy(&policy, DecodeStrategy::Greedy);
                black_box(evaluate(agent, &suite, &ec, None, "bench", m).unwrap())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
