//! Parallel vs sequential throughput on the crate's data-parallel loops:
//! corpus generation, one training step, and batched synthesis.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use stylecodec::corpus::{generate_dataset, DatasetConfig};
use stylecodec::model::{Model, ModelConfig};
use stylecodec::style_text::StylePrompt;
use stylecodec::training::{dataset_hash, train_step, TrainConfig, TrainState};
use stylecodec::ExecMode;

const MODES: [(&str, ExecMode); 2] =
    [("parallel", ExecMode::Parallel), ("sequential", ExecMode::Sequential)];

fn bench_corpus_generation(c: &mut Criterion) {
    let cfg = DatasetConfig {
        n_train: 256,
        n_test_in_domain: 16,
        n_test_heldout_style: 16,
        n_test_heldout_speaker: 16,
        ..DatasetConfig::default()
    };
    let mut group = c.benchmark_group("corpus_generation_256");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| generate_dataset(&cfg, mode).unwrap());
        });
    }
    group.finish();
}

fn bench_model() -> (ModelConfig, DatasetConfig) {
    let dcfg = DatasetConfig {
        n_train: 96,
        n_test_in_domain: 8,
        n_test_heldout_style: 8,
        n_test_heldout_speaker: 8,
        ..DatasetConfig::default()
    };
    let mcfg = ModelConfig {
        d_hidden: 64,
        decoder_blocks: 3,
        ..ModelConfig::default()
    };
    (mcfg, dcfg)
}

fn bench_train_step(c: &mut Criterion) {
    let (mcfg, dcfg) = bench_model();
    let ds = generate_dataset(&dcfg, ExecMode::Parallel).unwrap();
    let tcfg = TrainConfig { batch_frames: 384, ..TrainConfig::default() };
    let mut group = c.benchmark_group("train_step_384_frames");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            let model = Model::new(mcfg.clone(), 7).unwrap();
            let mut state = TrainState::new(model, tcfg.clone(), dataset_hash(&ds));
            b.iter(|| {
                train_step(&mut state, &ds.train, mode).unwrap();
            });
        });
    }
    group.finish();
}

fn bench_synthesis(c: &mut Criterion) {
    let (mcfg, dcfg) = bench_model();
    let ds = generate_dataset(&dcfg, ExecMode::Parallel).unwrap();
    let model = Model::new(mcfg, 7).unwrap();
    let mut group = c.benchmark_group("synthesize_8_prompts");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| {
                stylecodec::par::map_indexed(8, mode, |i| {
                    let u = &ds.train[i];
                    let prompt = StylePrompt {
                        tokens: u.style_text.clone(),
                        template_id: Some(u.template_id),
                    };
                    let mut rng = stylecodec::rng::derive(3, "bench-synth", 0, i as u64);
                    model.synthesize(&prompt, &u.content_tokens, &mut rng).unwrap()
                })
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_corpus_generation, bench_train_step, bench_synthesis);
criterion_main!(benches);
