//! HTTP embedding service client.
//!
//! `POST {base}/embed/text` with `{"texts": [...]}` and
//! `POST {base}/embed/image` with `{"images_b64": [...]}`; both answer
//! `{"dim": D, "vectors": [[...], ...]}`.

use std::time::Duration;

use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use super::{BackendDescriptor, BackendKind, EmbedError, EmbeddingBackend};
use crate::vector::{normalize, EmbeddingVector, UNIT_TOLERANCE};

#[derive(Debug, Deserialize)]
struct EmbedReply {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

pub struct RemoteBackend {
    agent: ureq::Agent,
    base: String,
    descriptor: BackendDescriptor,
}

impl RemoteBackend {
    /// Sends one probe text to learn the service's dimension.
    pub fn connect(base_url: &str, timeout: Duration) -> Result<Self, EmbedError> {
        let base = base_url.trim_end_matches('/').to_string();
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(EmbedError::Config(format!("remote backend URL {base_url:?} is not http(s)")));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut backend = Self {
            agent,
            descriptor: BackendDescriptor {
                kind: BackendKind::RemoteHttp,
                dim: 0,
                model_id: format!("remote:{base}"),
                preprocess_id: "remote".into(),
            },
            base,
        };
        let probe = backend.post("text", json!({ "texts": ["a photo"] }))?;
        if probe.dim == 0 {
            return Err(EmbedError::Model("remote service reports dim 0".into()));
        }
        backend.descriptor.dim = probe.dim;
        Ok(backend)
    }

    fn post(&self, route: &str, body: serde_json::Value) -> Result<EmbedReply, EmbedError> {
        let url = format!("{}/embed/{route}", self.base);
        let mut resp = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send_json(&body)
            .map_err(|e| EmbedError::BackendUnavailable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| EmbedError::BackendUnavailable(format!("{url}: {e}")))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| EmbedError::Model(format!("{url}: malformed reply: {e}"))),
            500..=599 => Err(EmbedError::BackendUnavailable(format!("{url}: HTTP {status}"))),
            _ => Err(EmbedError::Model(format!("{url}: HTTP {status}: {}", text.trim()))),
        }
    }

    fn vectors(&self, reply: EmbedReply, expected: usize) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let dim = self.descriptor.dim;
        if dim != 0 && reply.dim != dim {
            return Err(EmbedError::Dimension { expected: dim, got: reply.dim });
        }
        if reply.vectors.len() != expected {
            return Err(EmbedError::Model(format!(
                "remote service returned {} vectors for {expected} inputs",
                reply.vectors.len()
            )));
        }
        reply
            .vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                if v.len() != reply.dim {
                    return Err(EmbedError::Dimension { expected: reply.dim, got: v.len() });
                }
                if let Ok(u) = EmbeddingVector::from_unit(v.clone()) {
                    return Ok(u);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm.is_finite() && (norm - 1.0).abs() > UNIT_TOLERANCE {
                    log::warn!("remote vector {i} has norm {norm}; re-normalizing");
                }
                Ok(normalize(&v)?)
            })
            .collect()
    }
}

impl EmbeddingBackend for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText { index });
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let reply = self.post("text", json!({ "texts": texts }))?;
        self.vectors(reply, texts.len())
    }

    fn embed_images(&self, images: &[&[u8]]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let b64 = base64::engine::general_purpose::STANDARD;
        let encoded: Vec<String> = images.iter().map(|b| b64.encode(b)).collect();
        let reply = self.post("image", json!({ "images_b64": encoded }))?;
        self.vectors(reply, images.len())
    }
}
