//! Rayon pool against a single-thread pool on the two hot loops: refined
//! scoring of a resolved template set and one training step.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use refinelm::backend::{PromptStyle, SyntheticBackend, SyntheticSpec};
use refinelm::lexicon::{enumerate_templates, Attribute, Subject};
use refinelm::metrics::{resolve_all, template_biases, ProbeSetup};
use refinelm::trainer::{self, TemplatePool, TrainConfig};
use refinelm::{par, Category, Lexicon, RefineParams};

fn fixture() -> (Vec<refinelm::metrics::ResolvedTemplate>, RefineParams) {
    let subjects = (0..2)
        .flat_map(|g| {
            (0..10).map(move |i| Subject {
                name: format!("S{g}x{i}"),
                group: format!("g{g}"),
            })
        })
        .collect();
    let attributes = (0..10)
        .map(|i| Attribute {
            positive: format!("was trait{i}"),
            negative: format!("was never trait{i}"),
        })
        .collect();
    let contexts = (0..4).map(|i| format!("met place{i} with")).collect();
    let lex = Lexicon::new(Category::Gender, subjects, attributes, contexts).unwrap();
    let backend = SyntheticBackend::new(
        &lex,
        SyntheticSpec::alternating(0.7, 0.05),
        PromptStyle::masked("[MASK]"),
        1,
    )
    .unwrap();
    let templates = enumerate_templates(&lex).unwrap();
    let resolved = resolve_all(&templates, &backend, &ProbeSetup::masked(8)).unwrap();
    (resolved, RefineParams::init(8, 16, 0).unwrap())
}

fn bench(c: &mut Criterion) {
    let (resolved, params) = fixture();
    let pool = TemplatePool::from_resolved(resolved.clone()).unwrap();
    let batch = pool
        .batches(64, 0, 0)
        .into_iter()
        .next()
        .expect("one batch");
    let cfg = TrainConfig::default();

    let mut group = c.benchmark_group("refined_biases");
    for jobs in [1, 0] {
        let label = if jobs == 1 { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &jobs, |b, &jobs| {
            par::with_jobs(jobs, || {
                b.iter(|| black_box(template_biases(&resolved, Some(&params)).unwrap()))
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("train_step_b64");
    for jobs in [1, 0] {
        let label = if jobs == 1 { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(label), &jobs, |b, &jobs| {
            par::with_jobs(jobs, || {
                b.iter(|| black_box(trainer::step(&params, &batch, &cfg).unwrap()))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
