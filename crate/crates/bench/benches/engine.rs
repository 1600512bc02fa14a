use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use streamcausal::sim::{preset_base, Generator, SimConfig, TrueParams};
use streamcausal::*;

fn stream(n_batches: usize, batch_size: usize) -> (SimConfig, Vec<DataBatch>) {
    let cfg = SimConfig {
        n_batches,
        batch_size,
        ..preset_base()
    };
    let gen = Generator::new(&cfg, TrueParams::for_replication(&cfg, &mut cfg.rng(0, 1))).unwrap();
    let batches = gen.make_stream(&mut cfg.rng(0, 0));
    (cfg, batches)
}

fn online_vs_offline(c: &mut Criterion) {
    let (cfg, batches) = stream(100, 100);
    let opts = SolverOptions::default();
    let mut group = c.benchmark_group("stream_100x100");
    for family in Family::ALL {
        let spec = ModelSpec::new(family, cfg.outcome, cfg.p()).unwrap();
        group.bench_function(BenchmarkId::new("online", family), |b| {
            b.iter(|| {
                let mut s = init_state(&batches[0], spec, &opts).unwrap();
                for batch in &batches[1..] {
                    s.update(batch, &opts).unwrap();
                }
                s.ate_estimate().unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("offline", family), |b| {
            b.iter(|| {
                solve_offline(&batches, spec, &opts)
                    .unwrap()
                    .ate_estimate()
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn single_update(c: &mut Criterion) {
    let (cfg, batches) = stream(2, 1000);
    let opts = SolverOptions::default();
    let mut group = c.benchmark_group("update_n1000");
    for family in Family::ALL {
        let spec = ModelSpec::new(family, cfg.outcome, cfg.p()).unwrap();
        let state = init_state(&batches[0], spec, &opts).unwrap();
        group.bench_function(BenchmarkId::from_parameter(family), |b| {
            b.iter_batched(
                || state.clone(),
                |mut s| s.update(&batches[1], &opts).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn boundaries(c: &mut Criterion) {
    let mut group = c.benchmark_group("boundaries");
    for (name, spending) in [
        ("pocock", Spending::Pocock),
        ("obf", Spending::ObrienFleming),
    ] {
        for t in [5, 10, 20] {
            let cfg = MonitorConfig::new(t, 0.05, spending).unwrap();
            group.bench_function(BenchmarkId::new(name, t), |b| {
                b.iter(|| compute_boundaries(&cfg).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, online_vs_offline, single_update, boundaries);
criterion_main!(benches);
