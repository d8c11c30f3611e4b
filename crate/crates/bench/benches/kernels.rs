use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasmrev_bench::{filled, fixture};
use wasmrev_core::model::decoder::{beam_search, DecoderContext};
use wasmrev_core::model::encoder::{encode_backward, encode_input, encode_traced, Mode};
use wasmrev_core::model::objectives::m3lm_objective;
use wasmrev_core::pretrain::{build_m3lm_batch, EncodedSample};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = filled(n, n, 1);
        let b = filled(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| black_box(a.matmul(&b))));
    }
    group.finish();
}

fn encoder(c: &mut Criterion) {
    let f = fixture(2, 128, 8);
    let input = f.input(0);
    let mut group = c.benchmark_group("encoder");
    group.bench_function("forward", |b| b.iter(|| encode_input(black_box(&input), &f.params).unwrap()));
    group.bench_function("forward_backward", |b| {
        let mut grads = f.params.zeros_like();
        b.iter(|| {
            let trace = encode_traced(&input, &f.params, Mode::Train { seed: 1 }).unwrap();
            let d = filled(trace.output.rows, trace.output.cols, 3);
            encode_backward(&f.params, &trace, &d, &mut grads);
        })
    });
    group.finish();
}

fn m3lm_step(c: &mut Criterion) {
    let f = fixture(2, 64, 4);
    let refs: Vec<&EncodedSample> = f.samples.iter().take(8).collect();
    let batch = build_m3lm_batch(&refs, f.vocab_size, 512, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    c.bench_function("m3lm_batch8_grad", |b| {
        b.iter(|| {
            let mut grads = f.params.zeros_like();
            m3lm_objective(&f.params, &batch, Mode::Train { seed: 2 }, Some(&mut grads)).unwrap()
        })
    });
}

fn beam(c: &mut Criterion) {
    let f = fixture(1, 64, 4);
    let memory = encode_input(&f.input(1), &f.params).unwrap();
    let ctx = DecoderContext::new(memory, &f.params).unwrap();
    let mut group = c.benchmark_group("beam_search");
    for width in [1, 5] {
        group.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, &w| {
            b.iter(|| beam_search(&ctx, 1, Some(2), w, 16, &f.params).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, encoder, m3lm_step, beam);
criterion_main!(benches);
