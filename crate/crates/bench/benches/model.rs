use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msfanet::model::{Ablation, ModelConfig, MsfaNet};
use msfanet_bench::grid;
use std::hint::black_box;

fn bench_forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("tiny_model");
    group.sample_size(10);
    let image = grid(3, 224, 224, 7);
    for ablation in Ablation::ALL.into_iter().take(3) {
        let net = MsfaNet::new(ModelConfig::tiny(0.125).with_ablation(ablation)).unwrap();
        let params = net.init_parameters(0, None).unwrap();
        group.bench_function(BenchmarkId::new("forward", ablation), |b| {
            b.iter(|| net.predict(&params, black_box(&image)).unwrap())
        });
        group.bench_function(BenchmarkId::new("forward_backward", ablation), |b| {
            b.iter(|| {
                let pass = net.forward(&params, black_box(&image)).unwrap();
                let ones = vec![1.0; pass.density.values.len()];
                net.backward(&params, &pass, &ones).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_forward_backward);
criterion_main!(benches);
