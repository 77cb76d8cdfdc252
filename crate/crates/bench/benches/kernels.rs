use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use maskdiff::evalkit::fid;
use maskdiff::maskops::{gaussian_blur, precision_ladder};
use maskdiff::nn::Graph;
use maskdiff::rng::{keyed_rng, normal_tensor};
use maskdiff::LadderConfig;
use maskdiff_bench::{features, object_mask};

fn conv(c: &mut Criterion) {
    let mut rng = keyed_rng(1, &[]);
    let x = normal_tensor::<f32, _>(&[16, 32, 32, 32], &mut rng);
    let w = normal_tensor::<f32, _>(&[32, 32, 3, 3], &mut rng);
    c.bench_function("conv2d 16x32x32x32 k3", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
            black_box(g.conv2d(xv, wv, None, 1, 1).unwrap());
        })
    });
}

fn masks(c: &mut Criterion) {
    let m = object_mask(3);
    let cfg = LadderConfig::default();
    c.bench_function("gaussian_blur k33", |b| {
        b.iter(|| black_box(gaussian_blur(&m, 33, 12.0).unwrap()))
    });
    c.bench_function("precision_ladder S=4", |b| {
        b.iter(|| black_box(precision_ladder(&m, &cfg).unwrap()))
    });
}

fn frechet(c: &mut Criterion) {
    let a = features(200, 192, 1);
    let bset = features(200, 192, 2);
    c.bench_function("fid 200x192", |b| {
        b.iter(|| black_box(fid(&a, &bset).unwrap()))
    });
}

criterion_group!(benches, conv, masks, frechet);
criterion_main!(benches);
