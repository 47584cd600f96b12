use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use formparse::autodiff::{Array, Graph, ParamStore};
use formparse::corpus::{build_vocab, LabelSet};
use formparse::encoder::BoxStatistics;
use formparse::metrics::re_prf1;
use formparse::model::{prepare, Example};
use formparse::syngen::{generate, SynSpec};
use formparse::{JointModel, ModelConfig, Session, TrainConfig};

fn pairs(n: usize, salt: u32) -> BTreeSet<(u32, u32)> {
    (0..n as u32)
        .map(|i| ((i * 7 + salt) % 97, (i * 13 + salt * 3) % 89))
        .collect()
}

fn corpus(n: usize) -> (Vec<Example>, formparse::Vocab) {
    let labels = LabelSet::xfund();
    let mut spec = SynSpec::new(labels.clone());
    spec.num_docs = n;
    let docs = generate(&spec).unwrap();
    let vocab = build_vocab(&docs, 1).unwrap();
    let ex = prepare(&docs, &vocab, &labels, 512, &BoxStatistics).unwrap();
    (ex, vocab)
}

fn autodiff(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", Array::full(&[64, 64], 0.01)).unwrap();
    let x = Array::full(&[48, 64], 0.5);
    c.bench_function("matmul_backward_48x64x64", |b| {
        b.iter(|| {
            let mut g = Graph::new(&store);
            let xv = g.constant(x.clone());
            let wv = g.param(w);
            let y = g.matmul(xv, wv).unwrap();
            let y = g.tanh(y);
            let s = g.sum(y);
            black_box(g.backward(s));
        })
    });
}

fn model(c: &mut Criterion) {
    let (ex, vocab) = corpus(8);
    let model = JointModel::<f32>::new(ModelConfig::default(), vocab.clone()).unwrap();
    c.bench_function("predict_document", |b| b.iter(|| black_box(model.predict(&ex[0], false, 0.5).unwrap())));

    let batch: Vec<&Example> = ex.iter().collect();
    c.bench_function("batch_loss_backward_8_docs", |b| {
        b.iter(|| {
            let mut g = Graph::training(&model.store, 1);
            let (loss, _) = model.batch_loss(&mut g, &batch, 0.5).unwrap();
            black_box(g.backward(loss.total));
        })
    });

    c.bench_function("train_epoch_8_docs", |b| {
        b.iter_batched(
            || {
                let m = JointModel::<f32>::new(ModelConfig::default(), vocab.clone()).unwrap();
                let cfg = TrainConfig {
                    epochs: 1,
                    lr: 3e-3,
                    ..TrainConfig::default()
                };
                Session::new(m, cfg).unwrap()
            },
            |mut s| black_box(s.run(&ex, None, None).unwrap()),
            BatchSize::LargeInput,
        )
    });
}

fn metrics(c: &mut Criterion) {
    let pred = pairs(2000, 1);
    let gold = pairs(2000, 2);
    c.bench_function("re_prf1_2000_pairs", |b| b.iter(|| black_box(re_prf1(&pred, &gold))));
}

criterion_group!(benches, autodiff, model, metrics);
criterion_main!(benches);
