//! In-process inference over an exported model directory.
//!
//! The directory holds `manifest.json` plus the four files it names: an
//! image encoder (`1x3x224x224` float input), a text encoder (`1x77` integer
//! ids), and the BPE vocabulary and merges. Encoders emit pre-normalization
//! embeddings; this backend normalizes them.

pub mod preprocess;
pub mod tokenizer;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tract_onnx::prelude::*;
use tract_onnx::tract_hir::infer::Factoid;

use super::{BackendDescriptor, BackendKind, EmbedError, EmbeddingBackend};
use crate::vector::{normalize_f32, EmbeddingVector};
pub use tokenizer::{ClipTokenizer, CONTEXT_LENGTH};

pub const MANIFEST_FILE: &str = "manifest.json";
const ROLES: [&str; 4] = ["image_encoder", "text_encoder", "tokenizer_vocab", "tokenizer_merges"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportManifest {
    pub model_id: String,
    pub dim: usize,
    /// Role to file name, relative to the manifest's directory.
    pub files: BTreeMap<String, String>,
    pub preprocess_id: String,
}

impl ExportManifest {
    pub fn load(dir: &Path) -> Result<Self, EmbedError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| EmbedError::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| EmbedError::Config(format!("{}: {e}", path.display())))?;
        if m.dim == 0 {
            return Err(EmbedError::Config(format!("{}: dim must be positive", path.display())));
        }
        for role in ROLES {
            let file = m.file(dir, role)?;
            if !file.is_file() {
                return Err(EmbedError::Config(format!("{role} file {} does not exist", file.display())));
            }
        }
        Ok(m)
    }

    pub fn file(&self, dir: &Path, role: &str) -> Result<PathBuf, EmbedError> {
        self.files
            .get(role)
            .map(|f| dir.join(f))
            .ok_or_else(|| EmbedError::Config(format!("manifest lists no {role} file")))
    }
}

type Plan = Arc<TypedRunnableModel>;

fn model_err(path: &Path) -> impl Fn(TractError) -> EmbedError + '_ {
    move |e| EmbedError::Model(format!("{}: {e:#}", path.display()))
}

/// Loads a graph with its first input pinned to `shape`, keeping the
/// declared element type when the graph states one.
fn load_graph(path: &Path, default_type: DatumType, shape: &[usize], dim: usize) -> Result<(Plan, DatumType), EmbedError> {
    let err = model_err(path);
    let model = tract_onnx::onnx().model_for_path(path).map_err(&err)?;
    let declared = model.input_fact(0).map_err(&err)?.datum_type.concretize();
    let dt = declared.unwrap_or(default_type);
    let typed = model
        .with_input_fact(0, InferenceFact::dt_shape(dt, shape))
        .map_err(&err)?
        .into_optimized()
        .map_err(&err)?;
    let out = typed.output_fact(0).map_err(&err)?;
    if let Some(&width) = out.shape.as_concrete().and_then(|s| s.last()) {
        if width != dim {
            return Err(EmbedError::Dimension { expected: dim, got: width });
        }
    }
    Ok((typed.into_runnable().map_err(&err)?, dt))
}

pub struct LocalBackend {
    descriptor: BackendDescriptor,
    tokenizer: ClipTokenizer,
    image: Plan,
    text: Plan,
    text_type: DatumType,
    image_path: PathBuf,
    text_path: PathBuf,
}

impl LocalBackend {
    pub fn open(dir: &Path) -> Result<Self, EmbedError> {
        let manifest = ExportManifest::load(dir)?;
        let image_path = manifest.file(dir, "image_encoder")?;
        let text_path = manifest.file(dir, "text_encoder")?;
        let tokenizer = ClipTokenizer::from_files(
            &manifest.file(dir, "tokenizer_vocab")?,
            &manifest.file(dir, "tokenizer_merges")?,
        )?;
        let side = preprocess::IMAGE_SIZE as usize;
        let (image, _) = load_graph(&image_path, DatumType::F32, &[1, 3, side, side], manifest.dim)?;
        let (text, text_type) = load_graph(&text_path, DatumType::I64, &[1, CONTEXT_LENGTH], manifest.dim)?;
        if !matches!(text_type, DatumType::I64 | DatumType::I32) {
            return Err(EmbedError::Config(format!(
                "{}: text input must be int32 or int64, found {text_type:?}",
                text_path.display()
            )));
        }
        Ok(Self {
            descriptor: BackendDescriptor {
                kind: BackendKind::LocalModel,
                dim: manifest.dim,
                model_id: manifest.model_id,
                preprocess_id: manifest.preprocess_id,
            },
            tokenizer,
            image,
            text,
            text_type,
            image_path,
            text_path,
        })
    }

    pub fn tokenizer(&self) -> &ClipTokenizer {
        &self.tokenizer
    }

    /// Raw encoder output before normalization.
    fn forward(&self, plan: &Plan, path: &Path, input: Tensor) -> Result<Vec<f32>, EmbedError> {
        let err = model_err(path);
        let out = plan.run(tvec!(input.into())).map_err(&err)?;
        let view = out[0].to_plain_array_view::<f32>().map_err(&err)?;
        let values: Vec<f32> = view.iter().copied().collect();
        if values.len() != self.descriptor.dim {
            return Err(EmbedError::Dimension {
                expected: self.descriptor.dim,
                got: values.len(),
            });
        }
        Ok(values)
    }

    pub fn raw_text_embedding(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let ids = self.tokenizer.tokenize(text)?;
        let shape = [1, CONTEXT_LENGTH];
        let tensor = if self.text_type == DatumType::I32 {
            let narrow: Vec<i32> = ids.iter().map(|&i| i as i32).collect();
            Tensor::from_shape(&shape, &narrow)
        } else {
            Tensor::from_shape(&shape, &ids)
        }
        .map_err(model_err(&self.text_path))?;
        self.forward(&self.text, &self.text_path, tensor)
    }

    pub fn raw_image_embedding(&self, img: &image::RgbImage) -> Result<Vec<f32>, EmbedError> {
        let side = preprocess::IMAGE_SIZE as usize;
        let pixels = preprocess::preprocess(img);
        let tensor = Tensor::from_shape(&[1, 3, side, side], &pixels).map_err(model_err(&self.image_path))?;
        self.forward(&self.image, &self.image_path, tensor)
    }
}

impl EmbeddingBackend for LocalBackend {
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
                Ok(normalize_f32(&self.raw_text_embedding(t)?)?)
            })
            .collect()
    }

    fn embed_images(&self, images: &[&[u8]]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        images
            .iter()
            .enumerate()
            .map(|(index, bytes)| {
                let img = preprocess::decode_rgb(bytes).map_err(|message| EmbedError::Decode { index, message })?;
                Ok(normalize_f32(&self.raw_image_embedding(&img)?)?)
            })
            .collect()
    }
}
