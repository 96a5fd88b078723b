//! Sequential vs parallel execution of the batched workloads.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use minbackprop::backward::essential::{backward_essential_batch, EssentialItem};
use minbackprop::backward::{Problem, ProblemInstance};
use minbackprop::experiments::{gradcheck, random_instance, GradcheckOptions};
use minbackprop::parallel::Exec;
use minbackprop::synthetic::derive_seed;
use nalgebra::Matrix3;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn essential_items(n: usize) -> Vec<EssentialItem> {
    (0..n as u64)
        .filter_map(|i| match random_instance(Problem::Essential, derive_seed(1, i)) {
            Ok(ProblemInstance::Essential { sample, e }) => {
                Some(EssentialItem { sample, e, dj_de: Matrix3::from_element(0.1), seed: i })
            }
            _ => None,
        })
        .collect()
}

fn batch(c: &mut Criterion) {
    let items = essential_items(256);
    let mut group = c.benchmark_group("backward_essential_batch");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, items.len()), &exec, |b, &exec| {
            b.iter(|| backward_essential_batch(&items, 7, exec))
        });
    }
    group.finish();
}

fn grad_check(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradcheck_essential");
    group.sample_size(10);
    for (name, exec) in MODES {
        let opts = GradcheckOptions { trials: 32, seed: 3, exec, ..GradcheckOptions::default() };
        group.bench_with_input(BenchmarkId::new(name, opts.trials), &opts, |b, opts| {
            b.iter(|| gradcheck(Problem::Essential, opts))
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().measurement_time(Duration::from_secs(3)).warm_up_time(Duration::from_secs(1));
    targets = batch, grad_check
}
criterion_main!(benches);
