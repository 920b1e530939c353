//! Image and text embeddings behind one interface.
//!
//! Three backends implement [`EmbeddingBackend`]:
//!
//! - [`MockBackend`]: deterministic class-prototype vectors, the offline test oracle.
//! - [`RemoteBackend`]: an HTTP embedding service.
//! - [`LocalBackend`]: exported ONNX image/text encoders run in-process.
//!
//! [`Embedder`] wraps any backend with batching, the binary cache and the
//! output checks every consumer relies on (dimension and unit norm).

mod cache;
pub mod local;
pub mod mock;
mod remote;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{cache_key, EmbeddingCache, CACHE_MAGIC, CACHE_VERSION};
pub use local::{ExportManifest, LocalBackend};
pub use mock::{mock_reference_class, write_mock_png, MockBackend, MockSpec, BACKGROUND_CLASS};
pub use remote::RemoteBackend;

use crate::vector::{EmbeddingVector, VectorError, UNIT_TOLERANCE};
use crate::{Categorized, Category};

pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("tokenization failed: {0}")]
    Tokenization(String),
    #[error("cannot decode image at index {index}: {message}")]
    Decode { index: usize, message: String },
    #[error("text at index {index} is empty")]
    EmptyText { index: usize },
    #[error("backend emitted dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("corrupt embedding cache {path}: {message}")]
    CorruptCache { path: PathBuf, message: String },
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EmbedError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl Categorized for EmbedError {
    fn category(&self) -> Category {
        match self {
            EmbedError::BackendUnavailable(_) => Category::Network,
            EmbedError::Config(_) => Category::Config,
            EmbedError::Model(_) | EmbedError::Dimension { .. } => Category::Internal,
            _ => Category::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    LocalModel,
    RemoteHttp,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub dim: usize,
    pub model_id: String,
    pub preprocess_id: String,
}

/// A shared, read-only embedding service. Outputs are unit-norm,
/// order-preserving and deterministic for a fixed configuration.
pub trait EmbeddingBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;
    fn embed_images(&self, images: &[&[u8]]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

/// Parses `local:<model_dir>`, `remote:<url>` or `mock:<spec_file>`.
pub fn open_backend(spec: &str) -> Result<Arc<dyn EmbeddingBackend>, EmbedError> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| EmbedError::Config(format!("backend {spec:?} is not kind:target")))?;
    match kind {
        "mock" => Ok(Arc::new(MockBackend::new(MockSpec::load(Path::new(rest))?)?)),
        "remote" => Ok(Arc::new(RemoteBackend::connect(rest, Duration::from_secs(60))?)),
        "local" => Ok(Arc::new(LocalBackend::open(Path::new(rest))?)),
        other => Err(EmbedError::Config(format!(
            "unknown backend kind {other:?} (expected local, remote or mock)"
        ))),
    }
}

/// Checks a backend's output batch against its descriptor.
pub(crate) fn check_outputs(
    desc: &BackendDescriptor,
    expected_len: usize,
    out: &[EmbeddingVector],
) -> Result<(), EmbedError> {
    if out.len() != expected_len {
        return Err(EmbedError::Model(format!(
            "backend returned {} vectors for {expected_len} inputs",
            out.len()
        )));
    }
    for v in out {
        if v.dim() != desc.dim {
            return Err(EmbedError::Dimension {
                expected: desc.dim,
                got: v.dim(),
            });
        }
        let norm = v.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(VectorError::NotUnit { norm }.into());
        }
    }
    Ok(())
}

/// Batching, caching front end over a backend.
///
/// Every returned vector is rounded through `f32`, cache hit or not, so a run
/// with a warm cache produces exactly the same numbers as a cold one.
pub struct Embedder {
    backend: Arc<dyn EmbeddingBackend>,
    text_cache: Option<EmbeddingCache>,
    image_cache: Option<EmbeddingCache>,
    batch_size: usize,
}

impl Embedder {
    pub fn new(backend: Arc<dyn EmbeddingBackend>) -> Self {
        Self {
            backend,
            text_cache: None,
            image_cache: None,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    /// Opens (or creates) `{dir}/{model}.text.plpe` and `{dir}/{model}.image.plpe`.
    pub fn with_cache_dir(mut self, dir: &Path) -> Result<Self, EmbedError> {
        std::fs::create_dir_all(dir).map_err(|e| EmbedError::io(dir, e))?;
        let desc = self.backend.descriptor();
        let stem = hex::encode(&Sha256::digest(desc.model_id.as_bytes())[..8]);
        self.text_cache = Some(EmbeddingCache::open(&dir.join(format!("{stem}.text.plpe")), desc.dim)?);
        self.image_cache = Some(EmbeddingCache::open(&dir.join(format!("{stem}.image.plpe")), desc.dim)?);
        Ok(self)
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        self.backend.descriptor()
    }

    pub fn backend(&self) -> &Arc<dyn EmbeddingBackend> {
        &self.backend
    }

    fn run<T: ?Sized>(
        &self,
        items: &[&T],
        content: impl Fn(&T) -> &[u8],
        cache: Option<&EmbeddingCache>,
        call: impl Fn(&[&T]) -> Result<Vec<EmbeddingVector>, EmbedError>,
    ) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let desc = self.backend.descriptor();
        let keys: Vec<String> = items
            .iter()
            .map(|it| cache_key(&desc.model_id, &desc.preprocess_id, content(it)))
            .collect();
        let mut out: Vec<Option<EmbeddingVector>> = keys
            .iter()
            .map(|k| match cache {
                Some(c) => c.get(k),
                None => Ok(None),
            })
            .collect::<Result<_, _>>()?;
        let missing: Vec<usize> = (0..items.len()).filter(|&i| out[i].is_none()).collect();
        for chunk in missing.chunks(self.batch_size) {
            let batch: Vec<&T> = chunk.iter().map(|&i| items[i]).collect();
            let vectors = call(&batch).map_err(|e| match e {
                // report indices relative to the caller's list
                EmbedError::Decode { index, message } => EmbedError::Decode {
                    index: chunk[index],
                    message,
                },
                EmbedError::EmptyText { index } => EmbedError::EmptyText { index: chunk[index] },
                other => other,
            })?;
            check_outputs(desc, batch.len(), &vectors)?;
            for (&i, v) in chunk.iter().zip(vectors) {
                let q = v.quantized();
                if let Some(c) = cache {
                    c.put(&keys[i], &q)?;
                }
                out[i] = Some(q);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled above")).collect())
    }

    pub fn embed_texts(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText { index });
        }
        let items: Vec<&str> = texts.to_vec();
        self.run(&items, str::as_bytes, self.text_cache.as_ref(), |b: &[&str]| {
            self.backend.embed_texts(b)
        })
    }

    pub fn embed_images(&self, images: &[&[u8]]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        self.run(images, |b: &[u8]| b, self.image_cache.as_ref(), |b: &[&[u8]]| {
            self.backend.embed_images(b)
        })
    }

    /// Writes pending cache entries to disk.
    pub fn flush(&self) -> Result<(), EmbedError> {
        for c in [&self.text_cache, &self.image_cache].into_iter().flatten() {
            c.flush()?;
        }
        Ok(())
    }

    pub fn cache_len(&self) -> (usize, usize) {
        (
            self.text_cache.as_ref().map_or(0, EmbeddingCache::len),
            self.image_cache.as_ref().map_or(0, EmbeddingCache::len),
        )
    }
}
