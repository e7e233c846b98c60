use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use embsig_core::corpus::{count_bigrams, generate_markov};
use embsig_core::linalg::{cosine_matrix, pca_project};
use embsig_core::model::{init_params, loss_and_grads};
use embsig_core::optim::{adamw_step, AdamW, OptState};
use embsig_core::oracle::measured_negative_gradient;
use embsig_core::task::generate_dataset;
use embsig_core::*;

fn training(c: &mut Criterion) {
    let ds = generate_dataset(&TaskSpec::defaults(TaskKind::Add, 0).with_sample_count(5000)).unwrap();
    let samples = ds.encoded();
    let batch = &samples[..100];
    let cfg = AdamW::new(1e-5, 0.01);
    for act in [Activation::Identity, Activation::Relu] {
        let params = init_params(200, ds.vocab.len(), InitScale::Exponent(0.8), act, 0).unwrap();
        c.bench_function(&format!("train_step/{act}/d200/b100"), |b| {
            b.iter_batched(
                || (params.clone(), OptState::new(&params)),
                |(mut p, mut opt)| {
                    let (_, g) = loss_and_grads(&p, batch).unwrap();
                    adamw_step(&mut p, &g, &mut opt, &cfg);
                    p
                },
                BatchSize::SmallInput,
            )
        });
    }
    let params = init_params(200, ds.vocab.len(), InitScale::Exponent(0.8), Activation::Identity, 0).unwrap();
    c.bench_function("measured_gradient/add/n5000", |b| {
        b.iter(|| measured_negative_gradient(black_box(&params), &samples).unwrap())
    });
}

fn signatures(c: &mut Criterion) {
    let spec = TaskSpec::defaults(TaskKind::Add, 0);
    c.bench_function("analytic/add/all_anchor_signatures", |b| {
        b.iter(|| {
            let a = AnalyticSignatures::new(black_box(&spec)).unwrap();
            for &x in &spec.anchors {
                black_box(a.phi_x_given_y(x).unwrap());
            }
            for l in a.labels() {
                black_box(a.varphi_x(l).unwrap());
            }
        })
    });
    let ds = generate_dataset(&spec).unwrap();
    c.bench_function("empirical/add/n50000/counts", |b| b.iter(|| SignatureCounts::from_dataset(black_box(&ds))));
}

fn linalg(c: &mut Criterion) {
    let p = init_params(200, 90, InitScale::Exponent(0.8), Activation::Identity, 0).unwrap();
    let anchors = p.w_e.select_cols(&(0..10).collect::<Vec<_>>());
    c.bench_function("pca/d200/10_vectors", |b| b.iter(|| pca_project(black_box(&anchors), 2).unwrap()));
    c.bench_function("cosine_matrix/d200/90", |b| b.iter(|| cosine_matrix(black_box(&p.w_e)).unwrap()));
}

fn corpus(c: &mut Criterion) {
    let stream = generate_markov(&MarkovSpec::random(10, 1.0, 1000, 1000, 0).unwrap()).unwrap();
    c.bench_function("bigram_counts/1e6_tokens", |b| b.iter(|| count_bigrams(black_box(&stream))));
}

criterion_group!(benches, training, signatures, linalg, corpus);
criterion_main!(benches);
