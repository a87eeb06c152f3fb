use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use motorintent::dataset::synth::{generate, SynthConfig};
use motorintent::dsp::SignalBlock;
use motorintent::features::sample_covariance;
use motorintent::features::FeatureExtractor;
use motorintent::harness::{run_train, stream_rows};
use motorintent::model::DecoderModel;
use motorintent::online::PredictorState;
use motorintent::pipeline::{window_at, FeatureMap, PipelineConfig};
use motorintent::spd::{frechet_mean, SpdMatrix};

struct Setup {
    model: Arc<DecoderModel>,
    rows: SignalBlock,
    batch: SignalBlock,
}

/// A 30-channel model with 2 s windows (W = 320 at 160 Hz).
fn setup() -> Setup {
    let recording = generate(&SynthConfig {
        trials: 12,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    let config = PipelineConfig {
        window_seconds: 2.0,
        eval_stride: 16,
        ..PipelineConfig::default()
    };
    let (model, _) = run_train(recording.clone(), &config).unwrap();
    let rows = stream_rows(&model, &recording).unwrap();
    let batch = model
        .preprocessor_with((0..model.n_channels()).collect())
        .unwrap()
        .process_resampled(&rows)
        .unwrap();
    Setup {
        model: Arc::new(model),
        rows,
        batch,
    }
}

fn benches(c: &mut Criterion) {
    let s = setup();
    let w = s.model.window();
    let FeatureMap::Tangent(extractor) = &s.model.feature_map else {
        unreachable!("default pipeline is tangent")
    };
    let extractor: &FeatureExtractor = extractor;
    let ends: Vec<i64> = (0..64)
        .map(|k| s.batch.start_index() + (w + k * 40) as i64)
        .collect();
    let covariances: Vec<SpdMatrix> = ends
        .iter()
        .map(|&e| extractor.covariance(&window_at(&s.batch, e, w)).unwrap())
        .collect();
    let feature = s
        .model
        .feature_map
        .extract(&window_at(&s.batch, ends[0], w))
        .unwrap();

    c.bench_function("covariance_30ch_w320", |b| {
        let window = window_at(&s.batch, ends[0], w);
        b.iter(|| sample_covariance(black_box(&window), 1e-6))
    });
    c.bench_function("tangent_project_30ch", |b| {
        b.iter(|| extractor.project(black_box(&covariances[0])).unwrap())
    });
    c.bench_function("frechet_mean_64x30", |b| {
        b.iter(|| frechet_mean(black_box(&covariances), 1e-8, 50).unwrap())
    });
    c.bench_function("svm_score", |b| {
        b.iter(|| s.model.score(black_box(&feature)).unwrap())
    });

    // One steady-state push: the ring is already full, so every call predicts.
    c.bench_function("push_sample_30ch_w320", |b| {
        let mut state = PredictorState::from_model(s.model.clone()).unwrap();
        let all: Vec<&[f64]> = s.rows.rows().collect();
        let mut rows = all.iter().copied().cycle();
        for _ in 0..=w {
            state.push_sample(rows.next().unwrap()).unwrap();
        }
        b.iter(|| state.push_sample(rows.next().unwrap()).unwrap())
    });
    c.bench_function("decoder_cold_start", |b| {
        b.iter_batched(
            || s.model.clone(),
            |m| PredictorState::from_model(m).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = decoder;
    config = Criterion::default().sample_size(20);
    targets = benches
}
criterion_main!(decoder);
