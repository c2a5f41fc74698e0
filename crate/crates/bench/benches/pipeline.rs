use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pocketgroove::grid::{quantize_to_grid, segment, segment_to_midi};
use pocketgroove::knn::KnnIndex;
use pocketgroove::midi_io::{parse_smf, write_smf};
use pocketgroove::dataset::derive_template;
use pocketgroove::models::{ConditionFlags, Example, ModelConfig, PocketVae, TrainConfig};
use pocketgroove::synthdata::{generate_corpus, two_genre_specs};

fn midi_round_trip(c: &mut Criterion) {
    let seg = generate_corpus(&two_genre_specs(), 1, 1).unwrap().remove(0);
    let bytes = write_smf(&segment_to_midi(&seg, 100.0)).unwrap();
    c.bench_function("midi_parse_quantize_segment", |b| {
        b.iter(|| {
            let g = quantize_to_grid(&parse_smf(black_box(&bytes)).unwrap()).unwrap();
            segment(&g, "b", None).unwrap()
        })
    });
}

fn knn(c: &mut Criterion) {
    let corpus = generate_corpus(&two_genre_specs(), 500, 2).unwrap();
    let query = derive_template(&corpus[7]);
    let index = KnnIndex::build(corpus);
    c.bench_function("knn_transfer_1000_k20", |b| b.iter(|| index.transfer(black_box(&query), 20).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let examples = Example::from_segments(generate_corpus(&two_genre_specs(), 16, 3).unwrap());
    let cfg = TrainConfig {
        steps: 1,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("pocketvae_desk_step_batch32", |b| {
        b.iter(|| {
            let mut vae = PocketVae::new(ModelConfig::desk(), ConditionFlags::default(), 0).unwrap();
            vae.train(&examples, &cfg, &mut ()).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, midi_round_trip, knn, train_step);
criterion_main!(benches);
