use std::collections::BTreeMap;
use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use plp_bench::{regression_system, unit_vectors};
use plp_core::captiongen::{generate_bundles, CaptionClient, LlmConfig};
use plp_core::dataset::load_manifest;
use plp_core::embedder::{Embedder, MockBackend};
use plp_core::features::{build_feature_row, DEFAULT_LABEL_TEMPLATE};
use plp_core::pipeline::{compute_features, train_model, FeatureConfig};
use plp_core::regressor::{default_lambda_grid, fit_ridge};
use plp_core::synthetic::{generate_corpus, CorpusSpec};
use plp_core::zeroshot::zero_shot_accuracy;
use plp_core::{AggregationMode, MockSpec, Variant};

fn ridge(c: &mut Criterion) {
    let (x, y) = regression_system(500, 12, 1);
    c.bench_function("fit_ridge 500x12", |b| b.iter(|| fit_ridge(black_box(&x), black_box(&y), 1.0).unwrap()));
}

fn feature_row(c: &mut Criterion) {
    let v = unit_vectors(13, 512, 2);
    c.bench_function("build_feature_row dim 512", |b| {
        b.iter(|| build_feature_row("d", "c", &v[0], &v[1], &v[2..7], &v[7], &v[8..13]).unwrap())
    });
}

/// Scoring plus inference for one 6-class dataset, embeddings computed fresh.
fn six_class_probe(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        image_noise_sigmas: vec![0.1, 0.3, 0.6],
        classes_per_dataset: 6,
        probe_images_per_class: 2,
        test_images_per_class: 5,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec, dir.path()).unwrap();
    let client = CaptionClient::from_config(LlmConfig::stub()).unwrap();
    let cfg = FeatureConfig::default();
    let mut sets = BTreeMap::new();
    let mut targets = BTreeMap::new();
    let mut inputs = Vec::new();
    for d in &corpus.datasets {
        let m = load_manifest(&dir.path().join(&d.manifest), None).unwrap();
        let backend = Arc::new(MockBackend::new(MockSpec::load(&dir.path().join(&d.mock_spec)).unwrap()).unwrap());
        let e = Embedder::new(backend.clone());
        let run = generate_bundles(&client, &m, cfg.seed, cfg.n_counterfactuals, &dir.path().join("bundles")).unwrap();
        sets.insert(d.dataset_id.clone(), compute_features(&m, &run.bundles, &e, &cfg).unwrap());
        targets.insert(d.dataset_id.clone(), zero_shot_accuracy(&m, &e, DEFAULT_LABEL_TEMPLATE).unwrap().accuracy);
        inputs.push((m, backend, run.bundles));
    }
    let (model, _) = train_model(&sets, &targets, Variant::Full, AggregationMode::PerRow, &default_lambda_grid()).unwrap();
    let (m, backend, bundles) = &inputs[1];
    c.bench_function("score and predict 6 classes", |b| {
        b.iter(|| {
            let e = Embedder::new(backend.clone());
            let rows = compute_features(m, bundles, &e, &cfg).unwrap();
            model.predict_dataset(&rows).unwrap()
        })
    });
}

criterion_group!(benches, ridge, feature_row, six_class_probe);
criterion_main!(benches);
