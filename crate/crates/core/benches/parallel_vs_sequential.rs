use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use twinbeam_core::povm::{compare_protocols, reconstruct_povm, BenchmarkConfig, GammaSetting, ReconConfig};
use twinbeam_core::sim::{simulate_twin_beam_run_with, SimOptions};
use twinbeam_core::*;

fn simulation(c: &mut Criterion) {
    let source = PoissonSource::new(0.5983).unwrap();
    let tree = DetectorTreeSpec::two_spad(0.5).unwrap();
    let schedule = EfficiencySchedule::default_grid();
    let mut group = c.benchmark_group("simulate_twin_beam");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                simulate_twin_beam_run_with(&source, &tree, &schedule, 1 << 20, 42, SimOptions {
                    execution: exec,
                    ..SimOptions::default()
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

fn replicates(c: &mut Criterion) {
    let source = PoissonSource::new(0.5983).unwrap();
    let tree = DetectorTreeSpec::two_spad(0.5).unwrap();
    let schedule = EfficiencySchedule::default_grid();
    let data = simulate_twin_beam_run_with(&source, &tree, &schedule, 1 << 20, 42, SimOptions::default()).unwrap();
    let state = source.distribution(5);
    let mut group = c.benchmark_group("reconstruct_povm_30_replicates");
    for exec in [Execution::Sequential, Execution::Parallel] {
        let config = ReconConfig {
            gamma: GammaSetting::LCurve,
            execution: exec,
            ..ReconConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &config, |b, config| {
            b.iter(|| reconstruct_povm(&data, &state, config).unwrap())
        });
    }
    group.finish();
}

fn benchmark_repetitions(c: &mut Criterion) {
    let tree = DetectorTreeSpec::two_spad(0.5).unwrap();
    let config = BenchmarkConfig {
        budget: 200_000,
        repetitions: 16,
        ..BenchmarkConfig::default()
    };
    let mut group = c.benchmark_group("compare_protocols");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| compare_protocols(&tree, &config, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, simulation, replicates, benchmark_repetitions);
criterion_main!(benches);
