//! Serial vs rayon-parallel execution of the data-parallel hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use poseforge::align_model::{batch_loss_and_grad, prepare_items, AlignModel, PreparedItem};
use poseforge::hjb::{edm_sample, GmmSpec, GuidanceConfig, GuidanceLoss, SamplerConfig};
use poseforge::misalign::{gen_corpus, CorpusSource, PerturbSpec};
use poseforge::par::Execution;

const MODES: [(&str, Execution); 2] = [("serial", Execution::Serial), ("parallel", Execution::Parallel)];

fn sampling(c: &mut Criterion) {
    let gmm = GmmSpec::equal_weights(&[vec![-2.0], vec![2.0]], 0.3).unwrap();
    let guided = SamplerConfig::guided(GuidanceConfig::new(GuidanceLoss::quadratic_to(vec![2.0])));
    let mut g = c.benchmark_group("edm_sample_2000_chains");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("unguided", name), |b| {
            b.iter(|| edm_sample(&gmm, &SamplerConfig::default(), 1, 2000, false, exec).unwrap())
        });
        g.bench_function(BenchmarkId::new("guided", name), |b| {
            b.iter(|| edm_sample(&gmm, &guided, 1, 2000, false, exec).unwrap())
        });
    }
    g.finish();
}

fn corpus(c: &mut Criterion) {
    let source = CorpusSource::Procedural { frames: 8 };
    let mut g = c.benchmark_group("gen_corpus_500_items");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| gen_corpus(&source, &PerturbSpec::default(), 500, 3, exec).unwrap()));
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let corpus = gen_corpus(&CorpusSource::Procedural { frames: 8 }, &PerturbSpec::default(), 32, 5, Execution::Serial).unwrap();
    let items = prepare_items(&corpus.items, 0.3, Execution::Serial).unwrap();
    let batch: Vec<&PreparedItem> = items.iter().collect();
    let model = AlignModel::new();
    let p = model.init_random(1);
    let mut g = c.benchmark_group("batch_loss_and_grad_32_items");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| batch_loss_and_grad(&model, &p, &batch, exec)));
    }
    g.finish();
}

criterion_group!(benches, sampling, corpus, training_step);
criterion_main!(benches);
