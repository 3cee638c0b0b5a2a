use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use modstream::autodiff::{adamw_step, AdamWConfig, Graph, OptimizerState};
use modstream::harness::StreamSet;
use modstream::objectives::{build_loss, CleanBatch, NoiseDraw, Objective};
use modstream::rng::Rng;
use modstream_bench::{model, observations};

/// Forward, backward and one AdamW update on a batch of 16.
fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for set in [StreamSet::Base, StreamSet::Both] {
        let (config, mut params) = model(set);
        let obs = observations(&config, 16, 3);
        let mut rng = Rng::from_seed(4);
        let batch = CleanBatch {
            actions: rng.normal_tensor(&[16, config.horizon, config.action_dim]),
            future: config.modalities.iter().map(|m| rng.normal_tensor(&[16, config.horizon, m.dim])).collect(),
            visual: obs.visual,
            task: obs.task,
            state: obs.state,
            past: obs.past,
        };
        let objective = if set == StreamSet::Base { Objective::Action } else { Objective::Full };
        let opt = AdamWConfig { peak_lr: 1e-4, betas: (0.95, 0.999), weight_decay: 1e-5, warmup_steps: 1, total_steps: 1_000_000 };
        let mut state = OptimizerState::new(opt).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(set.name()), &set, |b, _| {
            b.iter(|| {
                let noise = NoiseDraw::sample(&config, 16, &mut rng);
                let mut g = Graph::new();
                let bound = params.bind(&mut g);
                let (loss, _) = build_loss(&mut g, &bound, &config, &batch, &noise, 0.1, objective).unwrap();
                g.backward(loss).unwrap();
                params.collect_grads(&g, &bound);
                adamw_step(&mut params, &mut state).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
