use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use scadi_core::diffcore::linalg::{gemm, Layout};
use scadi_core::diffcore::{Tape, Tensor};
use scadi_core::model::LossWeights;
use scadi_core::observer::observer_loss;
use scadi_core::scm::{dagness_value, init_adjacency, linear_scm};
use scadi_core::{Architecture, Model, Variant};

// Deterministic filler; the values only need to be finite and varied.
fn filler(n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|i| ((i * 7919 % 1013) as f32 / 1013.0 - 0.5) * scale).collect()
}

fn bench_gemm(c: &mut Criterion) {
    // first encoder layer at 32x32, batch 128
    let (m, k, n) = (128, 3072, 900);
    let a = filler(m * k, 1.0);
    let b = filler(k * n, 0.1);
    let mut out = vec![0.0f32; m * n];
    c.bench_function("gemm_128x3072x900", |bch| {
        bch.iter(|| {
            gemm(m, k, n, black_box(&a), Layout::Plain, black_box(&b), Layout::Plain, &mut out, false);
        })
    });
}

fn bench_dagness(c: &mut Criterion) {
    let a4: Tensor<f64> = init_adjacency(4);
    let a16: Tensor<f64> = init_adjacency(16);
    c.bench_function("dagness_c4", |b| b.iter(|| dagness_value(black_box(&a4))));
    c.bench_function("dagness_c16", |b| b.iter(|| dagness_value(black_box(&a16))));
}

fn bench_linear_scm(c: &mut Criterion) {
    let a = Tensor::new(&[4, 4], filler(16, 0.4)).unwrap();
    let eps = Tensor::new(&[512, 16], filler(512 * 16, 2.0)).unwrap();
    c.bench_function("linear_scm_b512_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape: Tape<'_, f32> = Tape::new();
            let av = tape.leaf(a.clone());
            let ev = tape.leaf(eps.clone());
            let z = linear_scm(&mut tape, av, ev, 4).unwrap();
            let s = tape.sum(z);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn bench_observer_step(c: &mut Criterion) {
    let arch = Architecture {
        width: 32,
        height: 32,
        ..Architecture::default()
    };
    let model: Model = Model::new(arch, Variant::Scadi, 0);
    let x = Tensor::new(&[16, arch.pixels()], filler(16 * arch.pixels(), 1.0).iter().map(|v| v + 0.5).collect()).unwrap();
    let weights = LossWeights::default();
    let mut group = c.benchmark_group("observer");
    group.sample_size(10);
    group.bench_function("loss_and_grads_32px_b16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (loss, _) = observer_loss(&mut tape, &model.params, &model.net, xv, &weights, 1).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_dagness, bench_linear_scm, bench_observer_step);
criterion_main!(benches);
