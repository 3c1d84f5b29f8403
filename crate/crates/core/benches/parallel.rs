//! Per-block encode and decode with one worker versus all logical cores.
//! Built without the `parallel` feature both rows run the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxwave::codec::{decode_volume, encode_volume, CodecModel, EncodeOptions, ModelConfig};
use voxwave::par;
use voxwave::train::synth::synthetic_volume;

fn model() -> CodecModel {
    let mut cfg = ModelConfig::desk(4);
    cfg.post_blocks = 1;
    CodecModel::new(cfg, 1).expect("valid config")
}

fn codec(c: &mut Criterion) {
    let model = model();
    let volume = synthetic_volume([64, 128, 128], &mut ChaCha8Rng::seed_from_u64(2));
    let opts = EncodeOptions::lossless();
    let stream = encode_volume(&model, &volume, &opts).expect("encodes");

    let mut group = c.benchmark_group("codec-4-blocks");
    group.sample_size(10);
    for (label, jobs) in [("sequential", 1), ("parallel", 0)] {
        group.bench_with_input(BenchmarkId::new("encode", label), &jobs, |b, &jobs| {
            b.iter(|| par::with_jobs(jobs, || encode_volume(&model, &volume, &opts).expect("encodes")))
        });
        group.bench_with_input(BenchmarkId::new("decode", label), &jobs, |b, &jobs| {
            b.iter(|| par::with_jobs(jobs, || decode_volume(&model, &stream).expect("decodes")))
        });
    }
    group.finish();
}

criterion_group!(benches, codec);
criterion_main!(benches);
