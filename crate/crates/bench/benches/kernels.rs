use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bginet_core::nn::Conv2d;
use bginet_core::{interact, project, BgiNet, FeatureMap, InteractionParams, ModelConfig, ProjectionParams};

fn ramp4(shape: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_fn(shape, |(b, c, i, j)| ((b * 7 + c * 13 + i * 3 + j * 5) % 17) as f32 / 17.0 - 0.5)
}

fn features(d: usize, h: usize, w: usize) -> FeatureMap<f32> {
    FeatureMap::new(Array3::from_shape_fn((d, h, w), |(c, i, j)| ((c * 11 + i * 5 + j * 3) % 19) as f32 / 19.0 - 0.5), 16)
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = Conv2d::<f32>::new(64, 64, 3, 1, 1, &mut rng);
    let x = ramp4((1, 64, 32, 32));
    c.bench_function("conv3x3_64ch_32x32", |b| b.iter(|| layer.forward(black_box(&x)).unwrap()));
}

fn graph(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let proj = ProjectionParams::<f32>::new(32, 256, &mut rng);
    let inter = InteractionParams::<f32>::new(256, &mut rng).unwrap();
    let (x1, x2) = (features(256, 16, 16), features(256, 16, 16));
    c.bench_function("project_k32_d256_16x16", |b| b.iter(|| project(black_box(&x1), &proj).unwrap()));
    let (g1, g2) = (project(&x1, &proj).unwrap(), project(&x2, &proj).unwrap());
    c.bench_function("interact_k32_d256", |b| b.iter(|| interact(black_box(&g1), &g2, &inter).unwrap()));
}

fn model(c: &mut Criterion) {
    let net = BgiNet::<f32>::new(&ModelConfig::default(), 0).unwrap();
    let (a, b) = (ramp4((1, 3, 64, 64)), ramp4((1, 3, 64, 64)).mapv(|v| -v));
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("forward_default_64x64", |bn| bn.iter(|| net.forward(black_box(&a), &b).unwrap()));
    let mut train_net = net.clone();
    let (a4, b4) = (ramp4((4, 3, 64, 64)), ramp4((4, 3, 64, 64)).mapv(|v| -v));
    group.bench_function("train_step_default_batch4_64x64", |bn| {
        bn.iter(|| {
            let (out, cache) = train_net.forward_train(&a4, &b4).unwrap();
            let d = out.logits.mapv(|v| v * 1e-3);
            train_net.backward(cache, &d);
        })
    });
    group.finish();
}

criterion_group!(benches, conv, graph, model);
criterion_main!(benches);
