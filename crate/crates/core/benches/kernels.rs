//! Sequential against rayon kernels. On a single-core machine the two should
//! be within noise; the split only pays off with more cores.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use fastmoco::tensor::kernels::{conv2d_forward, matmul_seq, ConvGeom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for &(m, k, n) in &[(128, 256, 512), (512, 576, 256)] {
        let (a, b) = (random(m * k, &mut rng), random(k * n, &mut rng));
        let mut out = vec![0.0f32; m * n];
        let id = format!("{m}x{k}x{n}");
        g.bench_with_input(BenchmarkId::new("seq", &id), &(), |bch, _| {
            bch.iter(|| matmul_seq(black_box(&a), black_box(&b), &mut out, m, k, n))
        });
        #[cfg(feature = "parallel")]
        g.bench_with_input(BenchmarkId::new("par", &id), &(), |bch, _| {
            bch.iter(|| fastmoco::tensor::kernels::matmul_par(black_box(&a), black_box(&b), &mut out, m, k, n))
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_forward");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, o) = (32, 64);
    let geom = ConvGeom { c: 64, h: 16, w: 16, k: 3, stride: 1, pad: 1 };
    let x = random(n * geom.c * geom.h * geom.w, &mut rng);
    let w = random(o * geom.c * 9, &mut rng);
    let mut out = vec![0.0f32; n * o * 16 * 16];
    // one worker thread runs the same code path serially
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
    g.bench_function("seq", |b| b.iter(|| serial.install(|| conv2d_forward(&x, &w, &mut out, n, o, geom))));
    g.bench_function("par", |b| b.iter(|| conv2d_forward(&x, &w, &mut out, n, o, geom)));
    g.finish();
}

criterion_group!(benches, matmul, conv);
criterion_main!(benches);
