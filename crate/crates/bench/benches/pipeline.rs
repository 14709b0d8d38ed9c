use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use themewise_core::model::ThemeEmbedding;
use themewise_core::numeric::random_matrix;
use themewise_core::tcl::{correlate, correlate_backward, correlate_forward, stage1, stage2, AttentionParams, Stage};
use themewise_core::{Feedback, FeedbackSource, Model, ModelConfig, PerTheme, SessionFeatures, ThemeId};

const D: usize = 64;

fn session(rows: usize) -> SessionFeatures {
    SessionFeatures {
        session_id: "bench".into(),
        label: None,
        themes: PerTheme::from_fn(|t| ThemeEmbedding {
            tokens: (0..rows).map(|i| format!("{t}{i}")).collect(),
            x: random_matrix(rows, D, 10 + t.index() as u64),
        }),
        feedback: Feedback::uniform(5.0, FeedbackSource::Llm),
    }
}

fn bench_correlate(c: &mut Criterion) {
    let p = AttentionParams::init(D, Stage::Stage1, &mut ChaCha8Rng::seed_from_u64(1));
    let mut g = c.benchmark_group("correlate");
    for l in [8usize, 32, 128] {
        let x = random_matrix(l, D, 2);
        g.bench_with_input(BenchmarkId::new("forward", l), &x, |b, x| {
            b.iter(|| correlate(black_box(x), &p).unwrap())
        });
        let cache = correlate_forward(&x, &p).unwrap();
        let d_y = random_matrix(l, D, 3);
        g.bench_with_input(BenchmarkId::new("backward", l), &d_y, |b, d_y| {
            b.iter(|| correlate_backward(&cache, &p, black_box(d_y)).unwrap())
        });
    }
    g.finish();
}

fn bench_stages(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p1 = AttentionParams::init(D, Stage::Stage1, &mut rng);
    let p2 = AttentionParams::init(D, Stage::Stage2, &mut rng);
    let themes: Vec<_> = (0..5).map(|i| random_matrix(18, D, 20 + i)).collect();
    c.bench_function("stage1+stage2 forward, 5x18 rows", |b| {
        b.iter(|| {
            let s1 = stage1(black_box(&themes), &p1).unwrap();
            stage2(&s1.outputs(), &p2).unwrap()
        })
    });
    let model = Model::init(ModelConfig::new(D), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let f = session(18);
    c.bench_function("model loss_and_grads, 5x18 rows", |b| {
        b.iter(|| model.loss_and_grads(black_box(&f), 1.0).unwrap())
    });
}

fn bench_whatif(c: &mut Criterion) {
    let model = Model::init(ModelConfig::new(D), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let f = session(18);
    let pooled = model.pooled(&f).unwrap();
    let mut scores = PerTheme::from_fn(|_| 5.0);
    *scores.get_mut(ThemeId::Mental) = 9.0;
    c.bench_function("what-if: weights + fuse + head", |b| {
        b.iter(|| {
            let w = model.weights(black_box(&scores)).unwrap();
            model.predict_pooled(&pooled, &w).unwrap()
        })
    });
    c.bench_function("full predict, 5x18 rows", |b| b.iter(|| model.predict(black_box(&f)).unwrap()));
}

criterion_group!(benches, bench_correlate, bench_stages, bench_whatif);
criterion_main!(benches);
