//! Costs of the numeric primitives: exact accumulation vs plain sums, and
//! tape-based layer math.

use criterion::{criterion_group, criterion_main, Criterion};
use gt_core::exact::ExactAcc;
use gt_core::nn::{GradSink, ParameterSet, Tape};
use gt_core::tensor::Tensor;

fn exact_accumulation(c: &mut Criterion) {
    let xs: Vec<f64> = (0..1024).map(|i| (i as f64 * 0.37).sin()).collect();
    c.bench_function("sum_plain_1024", |b| {
        b.iter(|| xs.iter().sum::<f64>())
    });
    c.bench_function("sum_exact_1024", |b| {
        b.iter(|| {
            let mut acc = ExactAcc::new();
            for &x in &xs {
                acc.add(x);
            }
            acc.round()
        })
    });
}

fn tape_linear(c: &mut Criterion) {
    let mut params = ParameterSet::new();
    let w = params.push("w", Tensor::from_vec(64, 32, vec![0.01; 64 * 32]));
    let x = Tensor::from_vec(256, 64, vec![0.5; 256 * 64]);
    c.bench_function("tape_linear_fwd_bwd_256x64x32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone());
            let wi = tape.param(&params, w);
            let y = tape.matmul(xi, wi);
            let t = tape.tanh(y);
            let mut sink = GradSink::new(&params, false);
            tape.backward(t, Tensor::from_vec(256, 32, vec![1.0; 256 * 32]), &mut sink);
            sink.into_grads()
        })
    });
}

criterion_group!(benches, exact_accumulation, tape_linear);
criterion_main!(benches);
