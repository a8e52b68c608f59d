//! Rayon-backed `Exec::Parallel` against `Exec::Serial` on the three
//! per-sample workloads that dominate a run: dataset rendering, task-head
//! forward passes and feature-codec loss evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use fcmh_core::par::Exec;
use fcmh_core::pyramid::dataset::generate_dataset;
use fcmh_core::pyramid::task::init_params as task_params;
use fcmh_core::pyramid::{FeaturePyramid, TaskModel};
use fcmh_core::vfcn;

const MODES: [(&str, Exec); 2] = [("serial", Exec::Serial), ("parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("exec");
    g.sample_size(10);

    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("render_64", name), &exec, |b, &e| {
            b.iter(|| generate_dataset(64, 1, e))
        });
    }

    let mut params = task_params(1);
    params.set_tag("arch", params.arch_hash());
    let task = TaskModel::from_params(params).unwrap();
    let images = generate_dataset(32, 1, Exec::Serial);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("task_head_32", name), &exec, |b, &e| {
            b.iter(|| task.pyramids(&images, e).unwrap())
        });
    }

    let codec = vfcn::init_params(1);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    let batch: Vec<FeaturePyramid> = (0..8).map(|_| FeaturePyramid::random(&mut rng, 1.0)).collect();
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("vfcn_loss_8", name), &exec, |b, &e| {
            b.iter(|| vfcn::batch_loss(&codec, &batch, vfcn::DEFAULT_LAMBDA_P, 7, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
