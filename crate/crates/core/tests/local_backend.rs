//! Local backend against the tiny exported model in `fixtures/`.
//!
//! `fixtures/expected.json` was produced by `fixtures/make_tiny_clip.py`:
//! token ids come from the transformers CLIP tokenizer and embeddings from
//! torch with torchvision preprocessing, so both are independent of this crate.

use std::path::{Path, PathBuf};

use plp_core::embedder::local::{ExportManifest, LocalBackend};
use plp_core::embedder::{EmbedError, EmbeddingBackend};
use serde::Deserialize;

#[derive(Deserialize)]
struct TextCase {
    text: String,
    ids: Vec<i64>,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct ImageCase {
    file: String,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct Expected {
    texts: Vec<TextCase>,
    images: Vec<ImageCase>,
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn expected() -> Expected {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join("expected.json")).unwrap()).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn backend() -> LocalBackend {
    LocalBackend::open(&fixtures().join("tiny_clip")).unwrap()
}

#[test]
fn token_ids_match_reference_tokenizer() {
    let b = backend();
    for case in expected().texts {
        assert_eq!(b.tokenizer().tokenize(&case.text).unwrap(), case.ids, "text {:?}", case.text);
    }
}

#[test]
fn text_embeddings_match_reference() {
    let b = backend();
    for case in expected().texts.iter().filter(|c| !c.text.trim().is_empty()) {
        let raw: Vec<f64> = b.raw_text_embedding(&case.text).unwrap().into_iter().map(f64::from).collect();
        let c = cosine(&raw, &case.embedding);
        assert!(c >= 0.999_999, "text {:?}: cosine {c}", case.text);
    }
}

#[test]
fn image_embeddings_match_reference() {
    let b = backend();
    for case in expected().images {
        let bytes = std::fs::read(fixtures().join("probes").join(&case.file)).unwrap();
        let v = b.embed_images(&[&bytes]).unwrap();
        let c = cosine(v[0].as_slice(), &case.embedding);
        assert!(c >= 0.999, "image {}: cosine {c}", case.file);
    }
}

#[test]
fn outputs_are_unit_norm_with_manifest_dim() {
    let b = backend();
    let manifest = ExportManifest::load(&fixtures().join("tiny_clip")).unwrap();
    assert_eq!(b.descriptor().dim, manifest.dim);
    let v = b.embed_texts(&["a photo of a cat", "a photo of a dog", "zebra"]).unwrap();
    assert_eq!(v.len(), 3);
    for x in &v {
        assert_eq!(x.dim(), manifest.dim);
        let n: f64 = x.as_slice().iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    assert_eq!(b.embed_texts(&["a photo of a cat"]).unwrap()[0], v[0]);
}

#[test]
fn undecodable_image_reports_index() {
    let b = backend();
    let good = std::fs::read(fixtures().join("probes/flat.jpg")).unwrap();
    let err = b.embed_images(&[&good, b"not an image", &good]).unwrap_err();
    assert!(matches!(err, EmbedError::Decode { index: 1, .. }), "{err}");
}

#[test]
fn missing_asset_names_the_role() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["manifest.json", "image.onnx", "text.onnx", "vocab.json"] {
        std::fs::copy(fixtures().join("tiny_clip").join(f), dir.path().join(f)).unwrap();
    }
    match LocalBackend::open(dir.path()) {
        Err(EmbedError::Config(m)) => assert!(m.contains("tokenizer_merges"), "{m}"),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("opened without merges file"),
    }
}
