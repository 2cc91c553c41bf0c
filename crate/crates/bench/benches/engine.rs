use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use nomad_bench::Fixture;
use nomad_core::baselines::{run_als, run_ccdpp, run_dsgd, run_serial_sgd, DsgdConfig, SerialConfig};
use nomad_core::nomad::{run_nomad, NomadConfig};
use nomad_core::{Budget, CheckpointInterval, RunControl, ShardedRatings};

// One epoch per iteration; checkpoints only at the ends so the numbers are
// update throughput, not evaluation cost.
fn one_epoch() -> RunControl {
    RunControl::new(Budget::epochs(1.0), CheckpointInterval::Never)
}

fn nomad_threads(c: &mut Criterion) {
    let fx = Fixture::preset();
    let mut group = c.benchmark_group("nomad_epoch");
    group.sample_size(10).measurement_time(Duration::from_secs(5));
    group.throughput(Throughput::Elements(fx.ratings().len() as u64));
    for p in [1, 2, 4] {
        let data = fx.sharded(p);
        group.bench_with_input(BenchmarkId::from_parameter(p), &data, |b, data| {
            b.iter(|| run_nomad(data, &fx.params, &NomadConfig::default(), &one_epoch(), 1, &[]).unwrap())
        });
    }
    group.finish();
}

fn baselines(c: &mut Criterion) {
    let fx = Fixture::preset();
    let data = ShardedRatings::single(fx.m(), fx.n(), fx.ratings()).unwrap();
    let mut group = c.benchmark_group("baseline_epoch");
    group.sample_size(10).measurement_time(Duration::from_secs(5));
    group.throughput(Throughput::Elements(fx.ratings().len() as u64));
    group.bench_function("serial_sgd", |b| {
        b.iter(|| run_serial_sgd(&data, &fx.params, &SerialConfig::default(), &one_epoch(), 1, &[]).unwrap())
    });
    group.bench_function("dsgd_p4", |b| {
        b.iter(|| run_dsgd(&data, &fx.params, &DsgdConfig::new(4, 0.01), &one_epoch(), 1, &[]).unwrap())
    });
    group.bench_function("ccdpp", |b| b.iter(|| run_ccdpp(&data, &fx.params, &one_epoch(), 1, &[], 1).unwrap()));
    group.bench_function("als", |b| b.iter(|| run_als(&data, &fx.params, &one_epoch(), 1, &[]).unwrap()));
    group.finish();
}

criterion_group!(benches, nomad_threads, baselines);
criterion_main!(benches);
