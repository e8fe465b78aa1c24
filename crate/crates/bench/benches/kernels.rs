use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use slm_forge_core::corpus::{synth_corpus, synthesize_all, Lexicon};
use slm_forge_core::model::{forward, generate_ids, init};
use slm_forge_core::training::{backward, batchify, optimizer_step, OptimizerState};
use slm_forge_core::{Domain, Model, ModelConfig, SamplingSpec, TokenizerModel, TrainConfig};

fn corpus_text(n: usize) -> Vec<String> {
    Domain::ALL
        .into_iter()
        .flat_map(|d| synth_corpus(d, n, 0))
        .map(|d| d.body)
        .collect()
}

fn desk_model(vocab: usize) -> Model {
    init(&ModelConfig::preset("desk", vocab).unwrap(), 0).unwrap()
}

fn tokenizer(c: &mut Criterion) {
    let texts = corpus_text(200);
    c.bench_function("bpe_train_1024", |b| {
        b.iter(|| TokenizerModel::train(black_box(&texts), 1024).unwrap())
    });
    let tok = TokenizerModel::train(&texts, 1024).unwrap();
    c.bench_function("bpe_encode_400_docs", |b| {
        b.iter(|| {
            texts
                .iter()
                .map(|t| tok.encode(black_box(t), true).len())
                .sum::<usize>()
        })
    });
}

fn model(c: &mut Criterion) {
    let texts = corpus_text(200);
    let tok = TokenizerModel::train(&texts, 1024).unwrap();
    let m = desk_model(tok.vocab_size());
    let ids: Vec<u32> = tok.encode(&texts[0], true).into_iter().take(128).collect();

    let mut g = c.benchmark_group("desk_model");
    g.sample_size(10);
    g.bench_function("forward_128", |b| b.iter(|| forward(&m, black_box(&ids)).unwrap()));
    g.bench_function("greedy_generate_32", |b| {
        let spec = SamplingSpec {
            max_new_tokens: 32,
            ..SamplingSpec::default()
        };
        b.iter(|| generate_ids(&m, black_box(&ids[..16]), None, &spec).unwrap())
    });

    let docs = synth_corpus(Domain::Story, 8, 0);
    let (examples, _) = synthesize_all(&docs, 0, &Lexicon::bundled());
    let cfg = TrainConfig {
        batch_size: 8,
        context_len: 350,
        ..TrainConfig::default()
    };
    let batch = batchify(&examples, &tok, &cfg).unwrap().epoch(0).next().unwrap();
    g.bench_function("backward_batch_8", |b| b.iter(|| backward(&m, black_box(&batch)).unwrap()));

    let (_, grads) = backward(&m, &batch).unwrap();
    g.bench_function("adamw_step", |b| {
        b.iter_batched(
            || (m.clone(), OptimizerState::new()),
            |(mut m, mut st)| optimizer_step(&mut m, &grads, &mut st, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, tokenizer, model);
criterion_main!(benches);
