//! Kernel and training-step timings. Run once per backend and compare:
//!
//!     cargo bench -p lne-core
//!     cargo bench -p lne-core --no-default-features
//!
//! Benchmark ids carry the backend name so both sets land side by side in
//! `target/criterion`.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lne_core::autodiff::{Tape, Tensor};
use lne_core::cohort::{build_pairs, generate_cohort, GeneratorConfig};
use lne_core::graph::NeighborhoodGraph;
use lne_core::model::Architecture;
use lne_core::par;
use lne_core::training::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv2d");
    for &(b, ch, side) in &[(64usize, 16usize, 16usize), (64, 32, 8)] {
        let x = random(&[b, ch, side, side], &mut rng);
        let k = random(&[ch * 2, ch, 3, 3], &mut rng);
        let bias = random(&[ch * 2], &mut rng);
        group.throughput(Throughput::Elements((b * ch * side * side) as u64));
        let id = BenchmarkId::new(par::backend(), format!("{b}x{ch}x{side}x{side}"));
        group.bench_with_input(id, &(x, k, bias), |bench, (x, k, bias)| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.param(x.clone()).unwrap();
                let kv = tape.param(k.clone()).unwrap();
                let bv = tape.param(bias.clone()).unwrap();
                let y = tape.conv2d(xv, kv, bv).unwrap();
                let loss = tape.mean(y).unwrap();
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn graph(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z: Tensor<f64> = Tensor::from_fn(vec![64, 64], |_| rng.random_range(-1.0..1.0));
    let dz: Tensor<f64> = Tensor::from_fn(vec![64, 64], |_| rng.random_range(-1.0..1.0));
    c.bench_function(&format!("graph_pool/{}/64x64", par::backend()), |bench| {
        bench.iter(|| {
            let g = NeighborhoodGraph::build(black_box(&z), 5).unwrap();
            black_box(g.pool(&dz).unwrap())
        })
    });
}

fn epoch(c: &mut Criterion) {
    let cohort = generate_cohort(&GeneratorConfig {
        n_subjects: 40,
        seed: 3,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let pairs = build_pairs(&cohort);
    let arch = Architecture::default();
    let cfg = TrainConfig {
        epochs: 1,
        augment: false,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    group.throughput(Throughput::Elements(pairs.len() as u64));
    group.bench_function(BenchmarkId::new(par::backend(), format!("{}_pairs", pairs.len())), |bench| {
        bench.iter(|| black_box(train(&arch, &cfg, &pairs, &[], None, &mut |_, _| Ok(())).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, conv, graph, epoch);
criterion_main!(benches);
