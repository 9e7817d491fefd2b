use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use stablekd::tensor::kernels::{conv2d, conv2d_backward, kl_divergence, matmul};
use stablekd::Tensor;

fn filled(shape: &[usize], salt: u32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n as u32).map(|i| ((i.wrapping_mul(2654435761) ^ salt) % 1000) as f32 / 500.0 - 1.0).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = filled(&[128, n], 1);
        let b = filled(&[n, n], 2);
        g.throughput(Throughput::Elements((128 * n * n) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    let x = filled(&[128, 8, 8, 8], 3);
    let k = filled(&[16, 8, 3, 3], 4);
    let y = conv2d(&x, &k, 1, 1).unwrap();
    let gy = filled(y.shape(), 5);
    g.bench_function("forward", |b| b.iter(|| conv2d(black_box(&x), black_box(&k), 1, 1).unwrap()));
    g.bench_function("backward", |b| {
        b.iter(|| conv2d_backward(black_box(&x), black_box(&k), black_box(&gy), 1, 1, true).unwrap())
    });
    g.finish();
}

fn bench_kl(c: &mut Criterion) {
    let s = filled(&[128, 100], 6);
    let t = filled(&[128, 100], 7);
    c.bench_function("kl_divergence_128x100", |b| b.iter(|| kl_divergence(black_box(&s), black_box(&t), 4.0).unwrap()));
}

criterion_group!(benches, bench_matmul, bench_conv, bench_kl);
criterion_main!(benches);
