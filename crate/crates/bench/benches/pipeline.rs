//! Forward pass, supervised step, greedy decoding and rationale parsing at
//! default sizes.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use moonlite::attr::{parse, serialize};
use moonlite::eval::view_input;
use moonlite::losses::{sft_loss, SftInstance, SftWeights};
use moonlite::model::{Decoding, SeqInput};
use moonlite::numeric::{Adam, Tape};
use moonlite::Selector;
use moonlite_bench::{dataset, model};
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let ds = dataset();
    let m = model(&ds);
    let seqs: Vec<SeqInput> = ds.products[..8]
        .iter()
        .map(|p| view_input(p, Selector::Multimodal))
        .collect();
    c.bench_function("embed_8_products", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let f = m.forward(&mut t, black_box(&seqs)).unwrap();
            m.embed(&mut t, &f).unwrap()
        })
    });
}

fn sft_step(c: &mut Criterion) {
    let ds = dataset();
    let m = model(&ds);
    let batch: Vec<SftInstance> = ds.triplets[..8]
        .iter()
        .map(|t| SftInstance::from_triplet(&ds, t, true).unwrap())
        .collect();
    let w = SftWeights::default();
    let mut g = c.benchmark_group("sft");
    g.sample_size(10);
    g.bench_function("step_batch_8", |b| {
        b.iter_batched(
            || (m.clone(), Adam::new(&m.params, 2e-3)),
            |(mut m, mut opt)| {
                let mut t = Tape::new();
                let loss = sft_loss(&mut t, &m, &batch, &w).unwrap();
                t.backward(loss.total, &mut m.params).unwrap();
                opt.step(&mut m.params);
                m
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn decode(c: &mut Criterion) {
    let ds = dataset();
    let m = model(&ds);
    let prompts: Vec<SeqInput> = ds.products[..8]
        .iter()
        .map(|p| view_input(p, Selector::Multimodal))
        .collect();
    let mut g = c.benchmark_group("decode");
    g.sample_size(10);
    g.bench_function("greedy_8x32", |b| {
        b.iter(|| {
            m.generate(black_box(&prompts), Decoding::Greedy, 32, &mut [])
                .unwrap()
        })
    });
    g.finish();
}

fn rationale(c: &mut Criterion) {
    let ds = dataset();
    let tokens: Vec<_> = ds.products[..64]
        .iter()
        .map(|p| serialize(&p.attrs_mm, &ds.vocab).unwrap())
        .collect();
    c.bench_function("parse_64_rationales", |b| {
        b.iter(|| {
            tokens
                .iter()
                .filter(|t| parse(black_box(t), &ds.vocab).is_ok())
                .count()
        })
    });
}

criterion_group!(benches, forward, sft_step, decode, rationale);
criterion_main!(benches);
