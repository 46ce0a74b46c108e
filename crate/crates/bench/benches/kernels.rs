use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msfanet::data::{generate_density_map, synthesize_scene, DensityProfile, DEFAULT_SIGMA};
use msfanet::loss::{pooling_loss_grad, LossConfig};
use msfanet::nn::attention::{swin_block, window_attention};
use msfanet::nn::conv::conv2d;
use msfanet::nn::{AttentionSpec, ConvSpec};
use msfanet::data::DensityMap;
use msfanet_bench::{grid, swin_weights, tokens, uniform};
use std::hint::black_box;

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for &(ch, side) in &[(8usize, 112usize), (32, 56), (64, 28)] {
        let x = grid(ch, side, side, 1);
        let w = uniform(ch * ch * 9, 2);
        let b = uniform(ch, 3);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{side}")), &x, |bench, x| {
            bench.iter(|| conv2d(black_box(x), &w, Some(&b), ch, ConvSpec::same3()).unwrap())
        });
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("window_attention");
    for shifted in [false, true] {
        let spec = AttentionSpec { dim: 12, heads: 3, window: 7, shifted, mask_shifted: true };
        let w = swin_weights(&spec, 4, 10);
        let x = tokens(56 * 56, 12, 11);
        let label = if shifted { "shifted" } else { "regular" };
        group.bench_function(BenchmarkId::new("attention", label), |b| {
            b.iter(|| window_attention(black_box(&x), 56, 56, &spec, &w).unwrap())
        });
        group.bench_function(BenchmarkId::new("block", label), |b| {
            b.iter(|| swin_block(black_box(&x), 56, 56, &spec, &w).unwrap())
        });
    }
    group.finish();
}

fn bench_density(c: &mut Criterion) {
    let mut group = c.benchmark_group("density");
    for count in [50usize, 500] {
        let scene = synthesize_scene(3, count, (384, 512), DensityProfile::Perspective).unwrap();
        group.bench_with_input(BenchmarkId::new("generate", count), &scene.annotations, |b, ann| {
            b.iter(|| generate_density_map(black_box(ann), DEFAULT_SIGMA).unwrap())
        });
    }
    let pred = DensityMap::from_vec(64, 64, 8, uniform(4096, 4).into_iter().map(f64::abs).collect()).unwrap();
    let gt = DensityMap::from_vec(64, 64, 8, uniform(4096, 5).into_iter().map(f64::abs).collect()).unwrap();
    group.bench_function("pooling_loss_grad_64", |b| {
        b.iter(|| pooling_loss_grad(black_box(std::slice::from_ref(&pred)), std::slice::from_ref(&gt), &LossConfig::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_conv, bench_attention, bench_density);
criterion_main!(benches);
