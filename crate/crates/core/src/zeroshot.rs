//! Ground-truth zero-shot accuracy on a dataset's test split.
//!
//! One prompt per class is embedded from the template; each test image is
//! assigned the class whose prompt embedding has the highest cosine, the
//! lexicographically smaller label winning exact ties.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetManifest, Split};
use crate::embedder::{EmbedError, Embedder};
use crate::features::{render_prompt, FeatureError};
use crate::vector::{cosine_sim, EmbeddingVector};
use crate::{Categorized, Category, SCHEMA_VERSION};

pub const DEFAULT_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum ZeroShotError {
    #[error("dataset {0:?} has no test images")]
    EmptyTestSplit(String),
    #[error(transparent)]
    Prompt(#[from] FeatureError),
    #[error("{context}: {source}")]
    Embed {
        context: String,
        #[source]
        source: EmbedError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Categorized for ZeroShotError {
    fn category(&self) -> Category {
        match self {
            ZeroShotError::Prompt(e) => e.category(),
            ZeroShotError::Embed { source, .. } => source.category(),
            _ => Category::Data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotReport {
    pub dataset_id: String,
    pub accuracy: f64,
    pub n_test: usize,
    pub n_correct: usize,
    /// Over classes that have test images.
    pub per_class_accuracy: BTreeMap<String, f64>,
    pub prompt_template: String,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    schema_version: u32,
    #[serde(flatten)]
    report: &'a ZeroShotReport,
}

impl ZeroShotReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&ReportFile {
            schema_version: SCHEMA_VERSION,
            report: self,
        })
        .expect("report serializes");
        s.push('\n');
        s
    }

    pub fn path(out_dir: &Path, dataset_id: &str) -> PathBuf {
        out_dir.join(format!("{dataset_id}.zeroshot.json"))
    }

    pub fn save(&self, out_dir: &Path) -> Result<PathBuf, ZeroShotError> {
        let path = Self::path(out_dir, &self.dataset_id);
        let io = |source| ZeroShotError::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(out_dir).map_err(io)?;
        std::fs::write(&path, self.to_json()).map_err(io)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, ZeroShotError> {
        let text = std::fs::read_to_string(path).map_err(|source| ZeroShotError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parse = |message: String| ZeroShotError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?;
        let version = v
            .as_object_mut()
            .and_then(|o| o.remove("schema_version"))
            .and_then(|s| s.as_u64());
        if version != Some(u64::from(SCHEMA_VERSION)) {
            return Err(parse(format!("schema_version must be {SCHEMA_VERSION}")));
        }
        let r: Self = serde_json::from_value(v).map_err(|e| parse(e.to_string()))?;
        if !(0.0..=1.0).contains(&r.accuracy) || r.n_correct > r.n_test {
            return Err(parse("accuracy outside [0, 1]".into()));
        }
        Ok(r)
    }
}

/// Index of the best-scoring prompt. Prompts follow the sorted class labels,
/// so keeping the first maximum resolves ties toward the smaller label.
pub fn classify(img: &EmbeddingVector, prompts: &[EmbeddingVector]) -> Result<usize, ZeroShotError> {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, p) in prompts.iter().enumerate() {
        let s = cosine_sim(img, p)
            .map_err(|e| ZeroShotError::Embed {
                context: "scoring".into(),
                source: e.into(),
            })?
            .value();
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok(best.0)
}

/// Accuracy from `(true label, predicted label)` outcomes.
pub fn tally<'a>(outcomes: impl IntoIterator<Item = (&'a str, &'a str)>) -> (usize, usize, BTreeMap<String, f64>) {
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (truth, pred) in outcomes {
        let e = per.entry(truth.to_string()).or_default();
        e.1 += 1;
        if truth == pred {
            e.0 += 1;
        }
    }
    let n_test = per.values().map(|c| c.1).sum();
    let n_correct = per.values().map(|c| c.0).sum();
    let per_class = per.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect();
    (n_correct, n_test, per_class)
}

pub fn zero_shot_accuracy(
    m: &DatasetManifest,
    embedder: &Embedder,
    template: &str,
) -> Result<ZeroShotReport, ZeroShotError> {
    let test: Vec<_> = m.entries_in(Split::Test).collect();
    if test.is_empty() {
        return Err(ZeroShotError::EmptyTestSplit(m.dataset_id.clone()));
    }
    let labels = &m.class_labels;
    let prompts: Vec<String> = labels
        .iter()
        .map(|l| render_prompt(template, l))
        .collect::<Result<_, _>>()?;
    let prompt_refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let prompt_vecs = embedder.embed_texts(&prompt_refs).map_err(|source| ZeroShotError::Embed {
        context: format!("{}: class prompts", m.dataset_id),
        source,
    })?;

    let predicted: Vec<Vec<usize>> = test
        .par_chunks(DEFAULT_BATCH)
        .map(|chunk| {
            let bytes: Vec<Vec<u8>> = chunk
                .iter()
                .map(|e| {
                    let path = m.resolve(&e.image_ref);
                    std::fs::read(&path).map_err(|source| ZeroShotError::Io { path, source })
                })
                .collect::<Result<_, _>>()?;
            let refs: Vec<&[u8]> = bytes.iter().map(Vec::as_slice).collect();
            let vecs = embedder.embed_images(&refs).map_err(|source| ZeroShotError::Embed {
                context: match &source {
                    EmbedError::Decode { index, .. } => chunk[*index].image_ref.clone(),
                    _ => format!("{}: test images", m.dataset_id),
                },
                source,
            })?;
            vecs.iter().map(|v| classify(v, &prompt_vecs)).collect()
        })
        .collect::<Result<_, ZeroShotError>>()?;

    let outcomes = test
        .iter()
        .zip(predicted.iter().flatten())
        .map(|(e, &k)| (e.class_label.as_str(), labels[k].as_str()));
    let (n_correct, n_test, per_class_accuracy) = tally(outcomes);
    Ok(ZeroShotReport {
        dataset_id: m.dataset_id.clone(),
        accuracy: n_correct as f64 / n_test as f64,
        n_test,
        n_correct,
        per_class_accuracy,
        prompt_template: template.into(),
    })
}
