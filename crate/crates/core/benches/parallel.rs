//! Parallel vs sequential execution of the independent-job loops: bootstrap
//! style refits, Monte Carlo simulations and forward passes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msgam::bootstrap::simulate_series;
use msgam::experiments::ScenarioConfig;
use msgam::{exec, fit, model, rng, FitOptions, MsGamSpec, SmoothingVector};

fn setup() -> (MsGamSpec, msgam::FitResult, msgam::TimeSeriesData) {
    let config = ScenarioConfig::scenario_i();
    let sim = config.simulate(1).unwrap();
    let spec = MsGamSpec::smooth(config.family, 2, &sim.data, 9).unwrap();
    let lambda = SmoothingVector::uniform(2, 1, 10.0);
    let fitted = fit::fit(&spec, &sim.data, &lambda, &FitOptions::default()).unwrap();
    (spec, fitted, sim.data)
}

fn replicate_fits(c: &mut Criterion) {
    let (spec, fitted, data) = setup();
    let start = model::pack(&fitted.params, &spec).unwrap();
    let opts = FitOptions {
        n_restarts: 1,
        compute_edf: false,
        ..FitOptions::default()
    };
    let job = |r: usize| {
        let sim = simulate_series(&spec, &fitted.params, &data.covariates, rng::derive_seed(3, &[r as u64])).unwrap();
        fit::fit_from(&spec, &sim.data, &fitted.lambda, &start, &opts)
            .unwrap()
            .loglik_unpenalized
    };
    let mut group = c.benchmark_group("bootstrap_refits");
    group.sample_size(10);
    let n = 16;
    group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| b.iter(|| exec::map_indexed(n, job)));
    group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
        b.iter(|| exec::map_indexed_sequential(n, job))
    });
    group.finish();
}

fn simulations(c: &mut Criterion) {
    let config = ScenarioConfig::scenario_ii();
    let job = |r: usize| config.simulate(config.run_seed(r)).unwrap().states.len();
    let mut group = c.benchmark_group("scenario_simulation");
    let n = 64;
    group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| b.iter(|| exec::map_indexed(n, job)));
    group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
        b.iter(|| exec::map_indexed_sequential(n, job))
    });
    group.finish();
}

fn forward_passes(c: &mut Criterion) {
    let (spec, fitted, data) = setup();
    let job = |_: usize| fit::log_likelihood(&spec, &fitted.params, &data).unwrap();
    let mut group = c.benchmark_group("forward_passes");
    let n = 256;
    group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| b.iter(|| exec::map_indexed(n, job)));
    group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
        b.iter(|| exec::map_indexed_sequential(n, job))
    });
    group.finish();
}

criterion_group!(benches, replicate_fits, simulations, forward_passes);
criterion_main!(benches);
