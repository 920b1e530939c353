//! Plausible and counterfactual captions from a multimodal LLM.
//!
//! For each probe image the LLM first writes a plausible caption, conditioned
//! on the image and its label. A second, text-only request anchored on that
//! caption asks for `n` counterfactual captions about visually confusable
//! classes. Results are persisted as [`CaptionBundle`] files that double as
//! a cache: a rerun over the same inputs makes no requests.

mod client;
mod limiter;
pub mod prompts;
pub mod store;

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{
    ChatBackend, ChatReply, ChatRequest, ContentPart, HttpChatClient, Message, MessageContent, ResponseFormat,
    StubChat, TransportError, API_KEY_ENV,
};
pub use limiter::{Clock, FakeClock, RateLimiter, SystemClock};
pub use store::{load_bundle, load_bundles, load_dataset_bundles, store_bundle, store_bundles};

use crate::dataset::{sample_other_labels, sample_probe_images, DatasetError, DatasetManifest, ProbeImage};
use crate::{Categorized, Category};
use prompts::Parsed;

/// Default number of counterfactual captions per probe image.
pub const DEFAULT_COUNTERFACTUALS: usize = 5;

/// At most this many other class labels are listed in a counterfactual prompt.
pub const MAX_CANDIDATE_LABELS: usize = 30;

/// Longest image side sent to the endpoint.
pub const MAX_IMAGE_SIDE: u32 = 1024;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("LLM endpoint unavailable after {attempts} attempts: {last}")]
    LlmUnavailable { attempts: usize, last: TransportError },
    #[error("LLM endpoint rejected the request: {0}")]
    Rejected(TransportError),
    #[error("malformed LLM response after {attempts} attempts: {reason}")]
    MalformedResponse { attempts: usize, reason: String },
    #[error("model declined: {0}")]
    PolicyRefusal(String),
    #[error("cannot decode image {image_ref}: {message}")]
    ImageDecode { image_ref: String, message: String },
    #[error("{path}: unsupported schema_version {found}")]
    SchemaVersionMismatch { path: PathBuf, found: u64 },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl CaptionError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl Categorized for CaptionError {
    fn category(&self) -> Category {
        match self {
            CaptionError::Config(_) => Category::Config,
            CaptionError::LlmUnavailable { .. }
            | CaptionError::Rejected(_)
            | CaptionError::MalformedResponse { .. }
            | CaptionError::PolicyRefusal(_) => Category::Network,
            CaptionError::Dataset(e) => e.category(),
            _ => Category::Data,
        }
    }
}

/// Plausible caption and counterfactuals for one probe image, with provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionBundle {
    pub dataset_id: String,
    pub class_label: String,
    pub image_ref: String,
    pub plausible_caption: String,
    pub counterfactuals: Vec<String>,
    pub llm_model: String,
    pub prompt_template_id: String,
    pub created_at: String,
}

impl CaptionBundle {
    /// Structural invariants; the error names the offending field.
    pub fn validate(&self) -> Result<(), String> {
        if self.plausible_caption.split_whitespace().count() < prompts::MIN_CAPTION_TOKENS {
            return Err(format!(
                "field `plausible_caption` needs at least {} words",
                prompts::MIN_CAPTION_TOKENS
            ));
        }
        if self.counterfactuals.is_empty() {
            return Err("field `counterfactuals` is empty".into());
        }
        let anchor = prompts::normalized(&self.plausible_caption);
        for (i, cf) in self.counterfactuals.iter().enumerate() {
            if cf.trim().is_empty() {
                return Err(format!("field `counterfactuals[{i}]` is empty"));
            }
            if prompts::normalized(cf) == anchor {
                return Err(format!("field `counterfactuals[{i}]` equals the plausible caption"));
            }
        }
        Ok(())
    }

    fn same_key(&self, probe: &ProbeImage, cfg: &LlmConfig) -> bool {
        self.dataset_id == probe.dataset_id
            && self.class_label == probe.class_label
            && self.image_ref == probe.image_ref
            && self.prompt_template_id == prompts::bundle_template_id()
            && self.llm_model == cfg.model_name
    }
}

/// LLM endpoint settings. `base_url` of the form `stub:` selects the
/// in-process deterministic stub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub base_url: String,
    pub model_name: String,
    /// Counterfactual requests.
    pub temperature: f64,
    /// Plausible-caption requests.
    pub caption_temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub requests_per_minute: u32,
    pub concurrency: usize,
    pub retry_backoff_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-5-nano".into(),
            temperature: 0.7,
            caption_temperature: 0.2,
            max_retries: 2,
            timeout_secs: 60,
            requests_per_minute: 60,
            concurrency: 4,
            retry_backoff_ms: 500,
        }
    }
}

impl LlmConfig {
    pub fn stub() -> Self {
        Self {
            base_url: "stub:".into(),
            model_name: "stub".into(),
            requests_per_minute: 60_000,
            retry_backoff_ms: 0,
            ..Self::default()
        }
    }

    pub fn is_stub(&self) -> bool {
        self.base_url.starts_with("stub:")
    }

    pub fn validate(&self) -> Result<(), CaptionError> {
        let bad = |m: String| Err(CaptionError::Config(m));
        if self.model_name.is_empty() {
            return bad("model_name is empty".into());
        }
        if !(self.temperature >= 0.0 && self.caption_temperature >= 0.0) {
            return bad("temperatures must be >= 0".into());
        }
        if self.max_retries > 5 {
            return bad(format!("max_retries {} exceeds 5", self.max_retries));
        }
        if !(1..=600).contains(&self.timeout_secs) {
            return bad(format!("timeout {} s outside [1, 600]", self.timeout_secs));
        }
        if self.requests_per_minute == 0 {
            return bad("requests_per_minute must be positive".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be positive".into());
        }
        if !self.is_stub() && !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return bad(format!("base_url {:?} is neither http(s) nor stub:", self.base_url));
        }
        Ok(())
    }

    /// Builds the transport. Fails before any network traffic when the API
    /// key is missing for a real endpoint.
    pub fn backend(&self) -> Result<Arc<dyn ChatBackend>, CaptionError> {
        self.validate()?;
        if self.is_stub() {
            return Ok(Arc::new(StubChat));
        }
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| CaptionError::Config(format!("{API_KEY_ENV} is not set")))?;
        Ok(Arc::new(HttpChatClient::new(
            &self.base_url,
            key,
            Duration::from_secs(self.timeout_secs),
        )))
    }
}

/// Re-encodes an image as JPEG no larger than [`MAX_IMAGE_SIDE`] and returns a data URL.
pub fn image_data_url(bytes: &[u8]) -> Result<String, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    let img = if img.width().max(img.height()) > MAX_IMAGE_SIDE {
        img.resize(MAX_IMAGE_SIDE, MAX_IMAGE_SIDE, image::imageops::FilterType::CatmullRom)
    } else {
        img
    };
    let mut out = Cursor::new(Vec::new());
    image::DynamicImage::ImageRgb8(img.to_rgb8())
        .write_to(&mut out, image::ImageFormat::Jpeg)
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "data:image/jpeg;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(out.into_inner())
    ))
}

/// Rate-limited, retrying LLM client for both caption kinds.
pub struct CaptionClient {
    cfg: LlmConfig,
    backend: Arc<dyn ChatBackend>,
    limiter: RateLimiter,
    calls: AtomicUsize,
}

enum Failure {
    Transport(TransportError),
    Malformed(String),
}

impl CaptionClient {
    pub fn new(cfg: LlmConfig, backend: Arc<dyn ChatBackend>, clock: Arc<dyn Clock>) -> Result<Self, CaptionError> {
        cfg.validate()?;
        let limiter = RateLimiter::new(cfg.requests_per_minute, clock);
        Ok(Self {
            cfg,
            backend,
            limiter,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn from_config(cfg: LlmConfig) -> Result<Self, CaptionError> {
        let backend = cfg.backend()?;
        Self::new(cfg, backend, Arc::new(SystemClock::default()))
    }

    pub fn config(&self) -> &LlmConfig {
        &self.cfg
    }

    /// Requests sent so far, including retries.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn request<T>(&self, req: &ChatRequest, parse: impl Fn(&str) -> Parsed<T>) -> Result<T, CaptionError> {
        let attempts = self.cfg.max_retries as usize + 1;
        let mut last = Failure::Malformed("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 && self.cfg.retry_backoff_ms > 0 {
                let backoff = Duration::from_millis(self.cfg.retry_backoff_ms << (attempt - 1).min(6));
                self.limiter.clock().sleep(backoff);
            }
            self.limiter.acquire();
            self.calls.fetch_add(1, Ordering::SeqCst);
            let reply = match self.backend.complete(req) {
                Ok(r) => r,
                Err(TransportError::Decode(m)) => {
                    last = Failure::Malformed(m);
                    continue;
                }
                Err(e) if e.is_transient() => {
                    log::warn!("LLM request failed (attempt {}/{attempts}): {e}", attempt + 1);
                    last = Failure::Transport(e);
                    continue;
                }
                Err(e) => return Err(CaptionError::Rejected(e)),
            };
            if let Some(r) = reply.refusal.filter(|r| !r.is_empty()) {
                return Err(CaptionError::PolicyRefusal(r));
            }
            if reply.finish_reason.as_deref() == Some("content_filter") {
                return Err(CaptionError::PolicyRefusal("content filter".into()));
            }
            let content = reply.content.unwrap_or_default();
            match parse(&content) {
                Parsed::Ok(v) => return Ok(v),
                Parsed::Refused(r) => return Err(CaptionError::PolicyRefusal(r)),
                Parsed::Invalid(reason) => {
                    log::warn!("malformed LLM reply (attempt {}/{attempts}): {reason}", attempt + 1);
                    last = Failure::Malformed(reason);
                }
            }
        }
        Err(match last {
            Failure::Transport(last) => CaptionError::LlmUnavailable { attempts, last },
            Failure::Malformed(reason) => CaptionError::MalformedResponse { attempts, reason },
        })
    }

    /// Caption for a probe image, conditioned on the image and its label.
    pub fn generate_plausible_caption(&self, probe: &ProbeImage, image_bytes: &[u8]) -> Result<String, CaptionError> {
        if probe.class_label.trim().is_empty() {
            return Err(CaptionError::InvalidInput("empty class label".into()));
        }
        let data_url = image_data_url(image_bytes).map_err(|message| CaptionError::ImageDecode {
            image_ref: probe.image_ref.clone(),
            message,
        })?;
        let (system, user) = prompts::caption_prompt(&probe.class_label);
        let req = ChatRequest {
            model: self.cfg.model_name.clone(),
            messages: vec![Message::system(system), Message::user_with_image(user, data_url)],
            temperature: self.cfg.caption_temperature,
            response_format: ResponseFormat::json_object(),
        };
        self.request(&req, prompts::parse_caption_reply)
    }

    /// `n` counterfactual captions anchored on `caption`.
    pub fn generate_counterfactuals(
        &self,
        caption: &str,
        class_label: &str,
        other_labels: &[String],
        n: usize,
    ) -> Result<Vec<String>, CaptionError> {
        if caption.trim().is_empty() {
            return Err(CaptionError::InvalidInput("empty plausible caption".into()));
        }
        if n == 0 {
            return Err(CaptionError::InvalidInput("n must be at least 1".into()));
        }
        let (system, user) = prompts::counterfactual_prompt(caption, class_label, other_labels, n);
        let req = ChatRequest {
            model: self.cfg.model_name.clone(),
            messages: vec![Message::system(system), Message::user_text(user)],
            temperature: self.cfg.temperature,
            response_format: ResponseFormat::json_object(),
        };
        self.request(&req, |raw| prompts::parse_counterfactual_reply(raw, caption, n))
    }
}

/// Outcome of [`generate_bundles`].
#[derive(Debug, Clone)]
pub struct CaptionRun {
    /// In lexicographic class order.
    pub bundles: Vec<CaptionBundle>,
    pub generated: usize,
    pub cached: usize,
}

fn candidate_labels(m: &DatasetManifest, label: &str, seed: u64) -> Result<Vec<String>, DatasetError> {
    let others: Vec<String> = m.class_labels.iter().filter(|l| *l != label).cloned().collect();
    if others.len() <= MAX_CANDIDATE_LABELS {
        return Ok(others);
    }
    let mut picked = sample_other_labels(m, label, MAX_CANDIDATE_LABELS, seed)?;
    picked.sort();
    Ok(picked)
}

fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn caption_one(
    client: &CaptionClient,
    m: &DatasetManifest,
    probe: &ProbeImage,
    seed: u64,
    n: usize,
    out_dir: &Path,
    write_lock: &Mutex<()>,
) -> Result<(CaptionBundle, bool), CaptionError> {
    let path = store::bundle_path(out_dir, &probe.dataset_id, &probe.class_label);
    if path.exists() {
        let existing = load_bundle(&path)?;
        if existing.same_key(probe, client.config()) && existing.counterfactuals.len() == n {
            return Ok((existing, true));
        }
    }
    let image_path = m.resolve(&probe.image_ref);
    let bytes = std::fs::read(&image_path).map_err(|e| CaptionError::io(&image_path, e))?;
    let caption = client.generate_plausible_caption(probe, &bytes)?;
    let others = candidate_labels(m, &probe.class_label, seed)?;
    let counterfactuals = client.generate_counterfactuals(&caption, &probe.class_label, &others, n)?;
    let bundle = CaptionBundle {
        dataset_id: probe.dataset_id.clone(),
        class_label: probe.class_label.clone(),
        image_ref: probe.image_ref.clone(),
        plausible_caption: caption,
        counterfactuals,
        llm_model: client.config().model_name.clone(),
        prompt_template_id: prompts::bundle_template_id(),
        created_at: now_utc(),
    };
    let _guard = write_lock.lock().unwrap();
    store_bundle(&bundle, out_dir)?;
    Ok((bundle, false))
}

/// Outcome of one probe: the bundle and whether it came from disk.
type Slot = Mutex<Option<Result<(CaptionBundle, bool), CaptionError>>>;

/// Selects probe images and captions each one, reusing stored bundles.
///
/// Runs up to `client.config().concurrency` requests in flight; the shared
/// rate limiter bounds the overall request rate.
pub fn generate_bundles(
    client: &CaptionClient,
    m: &DatasetManifest,
    seed: u64,
    n: usize,
    out_dir: &Path,
) -> Result<CaptionRun, CaptionError> {
    let probes = sample_probe_images(m, seed)?;
    let write_lock = Mutex::new(());
    let next = AtomicUsize::new(0);
    let slots: Vec<Slot> =
        probes.iter().map(|_| Mutex::new(None)).collect();
    let workers = client.config().concurrency.min(probes.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= probes.len() {
                    break;
                }
                let r = caption_one(client, m, &probes[i], seed, n, out_dir, &write_lock);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    let mut run = CaptionRun {
        bundles: Vec::with_capacity(probes.len()),
        generated: 0,
        cached: 0,
    };
    for slot in slots {
        let (bundle, cached) = slot.into_inner().unwrap().expect("every probe is processed")?;
        if cached {
            run.cached += 1;
        } else {
            run.generated += 1;
        }
        run.bundles.push(bundle);
    }
    Ok(run)
}
