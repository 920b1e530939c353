//! Deterministic embedding backend for offline runs and tests.
//!
//! Every class label owns a prototype direction. A text is routed to the
//! class whose label it mentions (see [`mock_reference_class`]); an image is
//! routed by the class label stored in its `plp-class` PNG text chunk. The
//! emitted vector is `normalize(prototype + sigma * G(item))`, where `G` is
//! `dim` standard normals drawn from ChaCha8 seeded by a hash of the item.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use rand::rngs::ChaCha8Rng;
use rand::{RngExt, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BackendDescriptor, BackendKind, EmbedError, EmbeddingBackend};
use crate::rng::{bytes_hash, key_hash};
use crate::vector::{normalize, EmbeddingVector};

/// Class assigned to texts that mention no known label, and to images
/// carrying no known label.
pub const BACKGROUND_CLASS: &str = "__background__";

/// PNG iTXt keyword holding a mock image's class label.
pub const CLASS_CHUNK_KEYWORD: &str = "plp-class";

const PREPROCESS_ID: &str = "mock-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSpec {
    pub dim: usize,
    /// Class label to prototype seed.
    pub class_prototypes: BTreeMap<String, u64>,
    pub image_noise_sigma: f64,
    pub text_noise_sigma: f64,
    pub seed: u64,
}

impl MockSpec {
    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let text = std::fs::read_to_string(path).map_err(|e| EmbedError::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)
            .map_err(|e| EmbedError::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        let bad = |m: String| Err(EmbedError::Config(m));
        if self.dim == 0 {
            return bad("mock dim must be positive".into());
        }
        if self.class_prototypes.is_empty() {
            return bad("mock spec needs at least one class prototype".into());
        }
        for (name, s) in [("image_noise_sigma", self.image_noise_sigma), ("text_noise_sigma", self.text_noise_sigma)] {
            if !s.is_finite() || s < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {s}"));
            }
        }
        if self.class_prototypes.contains_key(BACKGROUND_CLASS) {
            return bad(format!("{BACKGROUND_CLASS:?} is reserved"));
        }
        let mut seen = BTreeMap::new();
        for (label, seed) in &self.class_prototypes {
            if let Some(prev) = seen.insert(*seed, label) {
                return bad(format!("classes {prev:?} and {label:?} share prototype seed {seed}"));
            }
        }
        Ok(())
    }

    pub fn model_id(&self) -> String {
        let mut parts = vec![format!("dim={}", self.dim), format!("seed={}", self.seed)];
        parts.extend(self.class_prototypes.iter().map(|(l, s)| format!("{l}={s}")));
        parts.push(format!("img={:e}", self.image_noise_sigma));
        parts.push(format!("txt={:e}", self.text_noise_sigma));
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        format!("mock-{:016x}", key_hash(0, &refs))
    }
}

/// Lowercase runs of alphanumeric characters.
fn tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Length of the longest contiguous token run shared by `a` and `b`.
fn longest_common_run(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            if x == y {
                cur[j + 1] = prev[j] + 1;
                best = best.max(cur[j + 1]);
            }
        }
        prev = cur;
    }
    best
}

/// Class a text is routed to: the label sharing the longest contiguous run
/// of case-insensitive tokens with the text, the smaller label on ties, and
/// [`BACKGROUND_CLASS`] when no label shares a token.
pub fn mock_reference_class<'a>(text: &str, spec: &'a MockSpec) -> &'a str {
    let text_tokens = tokens(text);
    let mut best: Option<(&str, usize)> = None;
    // BTreeMap iteration is sorted, so strict `>` keeps the smaller label.
    for label in spec.class_prototypes.keys() {
        let run = longest_common_run(&tokens(label), &text_tokens);
        if run > 0 && best.is_none_or(|(_, b)| run > b) {
            best = Some((label, run));
        }
    }
    best.map_or(BACKGROUND_CLASS, |(l, _)| l)
}

fn gaussian(key: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Mock image: a small RGB PNG whose pixels vary with `(label, instance)`
/// and whose `plp-class` chunk names the class.
pub fn write_mock_png(label: &str, instance: u64) -> Vec<u8> {
    const SIDE: u32 = 4;
    let mut pixel_rng = ChaCha8Rng::seed_from_u64(key_hash(instance, &["mock-png", label]));
    let pixels: Vec<u8> = (0..SIDE * SIDE * 3).map(|_| pixel_rng.random()).collect();
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, SIDE, SIDE);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.add_itxt_chunk(CLASS_CHUNK_KEYWORD.into(), label.into())
        .expect("itxt chunk");
    let mut writer = enc.write_header().expect("png header to Vec");
    writer.write_image_data(&pixels).expect("png data to Vec");
    writer.finish().expect("png finish");
    out
}

/// Decodes the PNG fully and returns its class chunk, if any.
fn read_mock_class(bytes: &[u8]) -> Result<Option<String>, String> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut class = None;
    for chunk in &reader.info().utf8_text {
        if chunk.keyword == CLASS_CHUNK_KEYWORD {
            class = Some(chunk.get_text().map_err(|e| e.to_string())?);
        }
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "image too large".to_string())?;
    let mut buf = vec![0; size];
    reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    Ok(class)
}

pub struct MockBackend {
    spec: MockSpec,
    descriptor: BackendDescriptor,
    prototypes: BTreeMap<String, EmbeddingVector>,
    background: EmbeddingVector,
}

impl MockBackend {
    pub fn new(spec: MockSpec) -> Result<Self, EmbedError> {
        spec.validate()?;
        let prototypes = spec
            .class_prototypes
            .iter()
            .map(|(label, s)| {
                let g = gaussian(key_hash(spec.seed, &["prototype", &s.to_string()]), spec.dim);
                Ok((label.clone(), normalize(&g)?))
            })
            .collect::<Result<BTreeMap<_, _>, EmbedError>>()?;
        let background = normalize(&gaussian(key_hash(spec.seed, &["background"]), spec.dim))?;
        let descriptor = BackendDescriptor {
            kind: BackendKind::Mock,
            dim: spec.dim,
            model_id: spec.model_id(),
            preprocess_id: PREPROCESS_ID.into(),
        };
        Ok(Self {
            spec,
            descriptor,
            prototypes,
            background,
        })
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    /// Prototype of `label`, or the background prototype for unknown labels.
    pub fn prototype(&self, label: &str) -> &EmbeddingVector {
        self.prototypes.get(label).unwrap_or(&self.background)
    }

    fn perturb(&self, proto: &EmbeddingVector, sigma: f64, noise_key: u64) -> Result<EmbeddingVector, EmbedError> {
        if sigma == 0.0 {
            return Ok(proto.clone());
        }
        let g = gaussian(noise_key, self.spec.dim);
        let v: Vec<f64> = proto.as_slice().iter().zip(&g).map(|(p, n)| p + sigma * n).collect();
        Ok(normalize(&v)?)
    }
}

impl EmbeddingBackend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                if t.trim().is_empty() {
                    return Err(EmbedError::EmptyText { index });
                }
                let proto = self.prototype(mock_reference_class(t, &self.spec));
                self.perturb(proto, self.spec.text_noise_sigma, key_hash(self.spec.seed, &["text", t]))
            })
            .collect()
    }

    fn embed_images(&self, images: &[&[u8]]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        images
            .iter()
            .enumerate()
            .map(|(index, bytes)| {
                let class = read_mock_class(bytes).map_err(|message| EmbedError::Decode { index, message })?;
                let proto = self.prototype(class.as_deref().unwrap_or(BACKGROUND_CLASS));
                self.perturb(proto, self.spec.image_noise_sigma, bytes_hash(self.spec.seed, bytes))
            })
            .collect()
    }
}
