use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use goracle::model::{forward, loss_and_grad};
use goracle::{emit_json, encode_binary, init_model, parse_binary, parse_json, serialize_trace, tokenize, FieldSet};
use goracle_bench::{model_config, sequences, traces};

fn codecs(c: &mut Criterion) {
    let ts = traces(64, 20, 40);
    let bins: Vec<Vec<u8>> = ts.iter().map(|t| encode_binary(t).unwrap()).collect();
    let jsons: Vec<String> = ts.iter().map(emit_json).collect();
    let mut g = c.benchmark_group("codec");
    g.throughput(Throughput::Bytes(bins.iter().map(Vec::len).sum::<usize>() as u64));
    g.bench_function("parse_binary", |b| b.iter(|| bins.iter().map(|x| parse_binary(black_box(x)).unwrap().events.len()).sum::<usize>()));
    g.bench_function("encode_binary", |b| b.iter(|| ts.iter().map(|t| encode_binary(black_box(t)).unwrap().len()).sum::<usize>()));
    g.throughput(Throughput::Bytes(jsons.iter().map(String::len).sum::<usize>() as u64));
    g.bench_function("parse_json", |b| b.iter(|| jsons.iter().map(|x| parse_json(black_box(x)).unwrap().events.len()).sum::<usize>()));
    g.finish();
}

fn tokenizer(c: &mut Criterion) {
    let ts = traces(64, 20, 40);
    let (vocab, _) = sequences(&ts, 512);
    let mut g = c.benchmark_group("tokenizer");
    g.bench_function("serialize", |b| b.iter(|| ts.iter().map(|t| serialize_trace(black_box(t), FieldSet::ALL).len()).sum::<usize>()));
    g.bench_function("tokenize_512", |b| b.iter(|| ts.iter().map(|t| tokenize(black_box(t), &vocab, FieldSet::ALL, 512).true_len).sum::<usize>()));
    g.finish();
}

fn model(c: &mut Criterion) {
    let ts = traces(8, 3, 5);
    let (vocab, seqs) = sequences(&ts, 256);
    let params = init_model(&model_config(vocab.len(), 256), 0).unwrap();
    let labels: Vec<usize> = (0..seqs.len()).map(|i| i % 2).collect();
    let mut g = c.benchmark_group("model");
    g.sample_size(20);
    g.bench_function("forward_batch8", |b| b.iter(|| forward(&params, black_box(&seqs)).unwrap().logits.sum()));
    g.bench_function("train_step_batch8", |b| {
        b.iter_batched(
            || params.clone(),
            |p| loss_and_grad(&p, black_box(&seqs), &labels, None).unwrap().0,
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, codecs, tokenizer, model);
criterion_main!(benches);
