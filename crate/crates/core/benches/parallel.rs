//! Parallel against sequential mapping for the two embarrassingly parallel
//! workloads: batches of simulations and per-sample spectra of a trajectory.
//! Build with `--no-default-features` to make `par_map_range` sequential too.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cvsim_core::dataset::{sample_prior, PriorBox};
use cvsim_core::outputs::simulate_outputs;
use cvsim_core::parallel::{par_map_range, seq_map_range};
use cvsim_core::stiffness::{spectrum_at, DEFAULT_SR_TOL};
use cvsim_core::{integrate, Cvsim6, ParameterVector, SolverConfig};

fn simulations(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    let rows = sample_prior(&PriorBox::structural(), 16, 1);
    let run = |i: usize| simulate_outputs(&ParameterVector::from_array(&rows[i]), &cfg).map(|e| e.output.values[1]).unwrap_or(f64::NAN);
    let mut g = c.benchmark_group("simulate_16");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("map", "parallel"), |b| b.iter(|| par_map_range(rows.len(), run)));
    g.bench_function(BenchmarkId::new("map", "sequential"), |b| b.iter(|| seq_map_range(rows.len(), run)));
    g.finish();
}

fn spectra(c: &mut Criterion) {
    let v = ParameterVector::default();
    let model = Cvsim6::new(v).unwrap();
    let traj = integrate(&v, &SolverConfig::default()).unwrap();
    let n = traj.len().min(2000);
    let start = traj.len() - n;
    let eig = |i: usize| spectrum_at(&model, traj.t[start + i], &traj.p[start + i], DEFAULT_SR_TOL).map(|s| s.sr).unwrap_or(f64::NAN);
    let mut g = c.benchmark_group("spectra_2000");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("map", "parallel"), |b| b.iter(|| par_map_range(n, eig)));
    g.bench_function(BenchmarkId::new("map", "sequential"), |b| b.iter(|| seq_map_range(n, eig)));
    g.finish();
}

criterion_group!(benches, simulations, spectra);
criterion_main!(benches);
