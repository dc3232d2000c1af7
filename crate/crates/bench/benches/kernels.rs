use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use scorelab_core::matching::dsm_terms_at;
use scorelab_core::metrics::sliced_w2;
use scorelab_core::{sampler, DiffusionModel, GaussianMixture, ModelSpec, SamplerConfig, Scheme, ScoreField, Weight};

fn two_component() -> GaussianMixture {
    GaussianMixture::new(vec![0.3, 0.7], vec![vec![-1.5, -1.0], vec![1.0, 1.0]], vec![0.15, 0.25]).unwrap()
}

fn samplers(c: &mut Criterion) {
    let model = DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, 2, 1.0)).unwrap();
    let field = ScoreField::oracle(two_component(), &model).unwrap();
    let mut group = c.benchmark_group("sampler_1k_points_50_steps");
    group.sample_size(10);
    for scheme in [Scheme::ExactNoiseEm, Scheme::EiSde, Scheme::HeunOde] {
        let cfg = SamplerConfig::new(scheme, 50, 1);
        group.bench_with_input(BenchmarkId::from_parameter(scheme), &cfg, |b, cfg| {
            b.iter(|| sampler::sample(&model, &field, cfg, 1000).unwrap())
        });
    }
    group.finish();
}

fn losses(c: &mut Criterion) {
    let model = DiffusionModel::new(&ModelSpec::vp(0.1, 20.0, 2, 1.0)).unwrap();
    let target = two_component();
    let field = ScoreField::oracle(target.clone(), &model).unwrap();
    let x0 = target.sample(4096, 1).unwrap();
    let eps = GaussianMixture::gaussian(vec![0.0, 0.0], 1.0).unwrap().sample(4096, 2).unwrap();
    c.bench_function("dsm_terms_4096", |b| {
        b.iter(|| dsm_terms_at(&field, &model, black_box(0.5), &x0, &eps, Weight::SigmaSquared).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let g = two_component();
    let (a, b) = (g.sample(10_000, 1).unwrap(), g.sample(10_000, 2).unwrap());
    c.bench_function("sliced_w2_10k_128", |bch| bch.iter(|| sliced_w2(&a, &b, 128, 3).unwrap()));
}

criterion_group!(benches, samplers, losses, metrics);
criterion_main!(benches);
