//! Similarity features of one probe image.
//!
//! Column order (`feature_order_version` "v1"):
//!
//! ```text
//! [s_pc, s_cf_1 .. s_cf_n, s_true_label, s_other_1 .. s_other_c]
//! ```
//!
//! `s_cf` and `s_other` are sorted descending, which makes a row invariant
//! to the order in which counterfactuals and other labels were produced.
//! With the default `n = c = 5` a full row has 12 entries; the `llm-only`
//! variant keeps the first block (`1 + n`) and `vanilla-only` the second
//! (`1 + c`).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vector::{cosine_sim, EmbeddingVector, SimilarityScore, VectorError};
use crate::{Categorized, Category, FEATURE_ORDER_VERSION};

pub const DEFAULT_N_COUNTERFACTUALS: usize = 5;
pub const DEFAULT_LABEL_TEMPLATE: &str = "A photo of a {label}";
const PLACEHOLDER: &str = "{label}";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("expected {expected} {what}, got {got}")]
    WrongArity {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("class label is empty")]
    EmptyLabel,
    #[error("prompt template {0:?} has no {{label}} placeholder")]
    BadTemplate(String),
    #[error("no ground-truth accuracy for dataset {0:?}")]
    MissingTarget(String),
    #[error("target accuracy {value} for dataset {dataset_id:?} is outside [0, 1]")]
    TargetOutOfRange { dataset_id: String, value: f64 },
    #[error("no feature rows")]
    EmptyDataset,
    #[error("feature rows mix widths or variants: {0}")]
    Inconsistent(String),
    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Categorized for FeatureError {
    fn category(&self) -> Category {
        match self {
            FeatureError::BadTemplate(_) => Category::Config,
            _ => Category::Data,
        }
    }
}

/// Which similarity blocks a row carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    LlmOnly,
    VanillaOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::LlmOnly, Variant::VanillaOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::LlmOnly => "llm-only",
            Variant::VanillaOnly => "vanilla-only",
        }
    }

    pub fn uses_llm(self) -> bool {
        self != Variant::VanillaOnly
    }

    pub fn uses_vanilla(self) -> bool {
        self != Variant::LlmOnly
    }

    /// Row width for `n` counterfactuals and `c` other labels.
    pub fn width(self, n: usize, c: usize) -> usize {
        match self {
            Variant::Full => 2 + n + c,
            Variant::LlmOnly => 1 + n,
            Variant::VanillaOnly => 1 + c,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (expected full, llm-only or vanilla-only)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// One regression sample per class.
    PerRow,
    /// One regression sample per dataset: the mean of its rows.
    PerDatasetMean,
}

impl AggregationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::PerRow => "per-row",
            AggregationMode::PerDatasetMean => "per-dataset-mean",
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per-row" => Ok(AggregationMode::PerRow),
            "per-dataset-mean" => Ok(AggregationMode::PerDatasetMean),
            _ => Err(format!("unknown mode {s:?} (expected per-row or per-dataset-mean)")),
        }
    }
}

/// Substitutes `label` into `template` without any other normalization.
pub fn render_prompt(template: &str, label: &str) -> Result<String, FeatureError> {
    if label.is_empty() {
        return Err(FeatureError::EmptyLabel);
    }
    if !template.contains(PLACEHOLDER) {
        return Err(FeatureError::BadTemplate(template.into()));
    }
    Ok(template.replace(PLACEHOLDER, label))
}

/// `"A photo of a {label}"` with the label substituted.
pub fn label_prompt(label: &str) -> Result<String, FeatureError> {
    render_prompt(DEFAULT_LABEL_TEMPLATE, label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRow {
    pub dataset_id: String,
    pub class_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_pc: Option<SimilarityScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_cf: Option<Vec<SimilarityScore>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_true_label: Option<SimilarityScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_other_labels: Option<Vec<SimilarityScore>>,
    pub feature_order_version: String,
}

/// Cosine clamped to [-1, 1]; unit vectors within tolerance can overshoot
/// by a few ulps.
fn score(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<SimilarityScore, FeatureError> {
    Ok(SimilarityScore(cosine_sim(a, b)?.value().clamp(-1.0, 1.0)))
}

fn sorted_scores(img: &EmbeddingVector, vs: &[EmbeddingVector]) -> Result<Vec<SimilarityScore>, FeatureError> {
    let mut s: Vec<SimilarityScore> = vs.iter().map(|v| score(img, v)).collect::<Result<_, _>>()?;
    s.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(s)
}

fn check_arity(what: &'static str, expected: usize, got: usize) -> Result<(), FeatureError> {
    if expected != got {
        return Err(FeatureError::WrongArity { what, expected, got });
    }
    Ok(())
}

/// `(s_pc, s_cf sorted descending)`.
pub fn llm_block(
    img: &EmbeddingVector,
    pc: &EmbeddingVector,
    cfs: &[EmbeddingVector],
    n: usize,
) -> Result<(SimilarityScore, Vec<SimilarityScore>), FeatureError> {
    check_arity("counterfactual embeddings", n, cfs.len())?;
    Ok((score(img, pc)?, sorted_scores(img, cfs)?))
}

/// `(s_true_label, s_other sorted descending)`.
pub fn vanilla_block(
    img: &EmbeddingVector,
    true_lbl: &EmbeddingVector,
    others: &[EmbeddingVector],
    c: usize,
) -> Result<(SimilarityScore, Vec<SimilarityScore>), FeatureError> {
    check_arity("other-label embeddings", c, others.len())?;
    Ok((score(img, true_lbl)?, sorted_scores(img, others)?))
}

/// Full row with default arity (5 counterfactuals, 5 other labels).
pub fn build_feature_row(
    dataset_id: &str,
    class_label: &str,
    img: &EmbeddingVector,
    pc: &EmbeddingVector,
    cfs: &[EmbeddingVector],
    true_lbl: &EmbeddingVector,
    others: &[EmbeddingVector],
) -> Result<FeatureRow, FeatureError> {
    let (s_pc, s_cf) = llm_block(img, pc, cfs, DEFAULT_N_COUNTERFACTUALS)?;
    let (s_true, s_other) = vanilla_block(img, true_lbl, others, DEFAULT_N_COUNTERFACTUALS)?;
    Ok(FeatureRow {
        dataset_id: dataset_id.into(),
        class_label: class_label.into(),
        s_pc: Some(s_pc),
        s_cf: Some(s_cf),
        s_true_label: Some(s_true),
        s_other_labels: Some(s_other),
        feature_order_version: FEATURE_ORDER_VERSION.into(),
    })
}

impl FeatureRow {
    /// Variant implied by which blocks are present.
    pub fn variant(&self) -> Result<Variant, FeatureError> {
        let llm = self.s_pc.is_some() && self.s_cf.is_some();
        let vanilla = self.s_true_label.is_some() && self.s_other_labels.is_some();
        let partial = self.s_pc.is_some() != self.s_cf.is_some()
            || self.s_true_label.is_some() != self.s_other_labels.is_some();
        match (llm, vanilla, partial) {
            (true, true, false) => Ok(Variant::Full),
            (true, false, false) => Ok(Variant::LlmOnly),
            (false, true, false) => Ok(Variant::VanillaOnly),
            _ => Err(FeatureError::Inconsistent(format!(
                "row {}/{} has an incomplete block",
                self.dataset_id, self.class_label
            ))),
        }
    }

    /// Scores in column order.
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.s_pc.map(|s| s.0));
        out.extend(self.s_cf.iter().flatten().map(|s| s.0));
        out.extend(self.s_true_label.map(|s| s.0));
        out.extend(self.s_other_labels.iter().flatten().map(|s| s.0));
        out
    }

    pub fn width(&self) -> usize {
        self.values().len()
    }

    /// Drops the blocks `variant` does not use. Fails if a needed block is absent.
    pub fn project(&self, variant: Variant) -> Result<FeatureRow, FeatureError> {
        let have = self.variant()?;
        if have != Variant::Full && have != variant {
            return Err(FeatureError::Inconsistent(format!(
                "cannot project a {have} row to {variant}"
            )));
        }
        let mut row = self.clone();
        if !variant.uses_llm() {
            row.s_pc = None;
            row.s_cf = None;
        }
        if !variant.uses_vanilla() {
            row.s_true_label = None;
            row.s_other_labels = None;
        }
        Ok(row)
    }
}

/// Checks that rows share a variant and width; returns them.
pub fn common_shape(rows: &[FeatureRow]) -> Result<(Variant, usize), FeatureError> {
    let first = rows.first().ok_or(FeatureError::EmptyDataset)?;
    let shape = (first.variant()?, first.width());
    for r in rows {
        let s = (r.variant()?, r.width());
        if s != shape {
            return Err(FeatureError::Inconsistent(format!(
                "{}/{} is {} with width {}, expected {} with width {}",
                r.dataset_id, r.class_label, s.0, s.1, shape.0, shape.1
            )));
        }
    }
    Ok(shape)
}

/// Which dataset (and, in per-row mode, which class) a matrix row came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowMeta {
    pub dataset_id: String,
    pub class_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub meta: Vec<RowMeta>,
    pub variant: Variant,
}

impl DesignMatrix {
    pub fn width(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// Row indices per dataset, datasets in lexicographic order.
    pub fn groups(&self) -> BTreeMap<String, Vec<usize>> {
        let mut g: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, m) in self.meta.iter().enumerate() {
            g.entry(m.dataset_id.clone()).or_default().push(i);
        }
        g
    }
}

/// Elementwise mean of the rows' values, summed in input order.
pub fn mean_row(rows: &[&FeatureRow]) -> Vec<f64> {
    let mut acc = vec![0.0; rows.first().map_or(0, |r| r.width())];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r.values()) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    acc.iter().map(|a| a / n).collect()
}

/// Regression inputs. Per-row mode keeps input row order; per-dataset-mean
/// mode emits one row per dataset in lexicographic order.
pub fn assemble_design_matrix(
    rows: &[FeatureRow],
    targets: &BTreeMap<String, f64>,
    mode: AggregationMode,
) -> Result<DesignMatrix, FeatureError> {
    let (variant, _) = common_shape(rows)?;
    let target = |id: &str| -> Result<f64, FeatureError> {
        let v = *targets.get(id).ok_or_else(|| FeatureError::MissingTarget(id.into()))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(FeatureError::TargetOutOfRange {
                dataset_id: id.into(),
                value: v,
            });
        }
        Ok(v)
    };
    let mut m = DesignMatrix {
        x: Vec::new(),
        y: Vec::new(),
        meta: Vec::new(),
        variant,
    };
    match mode {
        AggregationMode::PerRow => {
            for r in rows {
                m.y.push(target(&r.dataset_id)?);
                m.x.push(r.values());
                m.meta.push(RowMeta {
                    dataset_id: r.dataset_id.clone(),
                    class_label: Some(r.class_label.clone()),
                });
            }
        }
        AggregationMode::PerDatasetMean => {
            let mut by_dataset: BTreeMap<&str, Vec<&FeatureRow>> = BTreeMap::new();
            for r in rows {
                by_dataset.entry(&r.dataset_id).or_default().push(r);
            }
            for (id, rs) in by_dataset {
                m.y.push(target(id)?);
                m.x.push(mean_row(&rs));
                m.meta.push(RowMeta {
                    dataset_id: id.into(),
                    class_label: None,
                });
            }
        }
    }
    Ok(m)
}

pub fn feature_file_path(out_dir: &Path, dataset_id: &str) -> PathBuf {
    out_dir.join(format!("{dataset_id}.features.jsonl"))
}

/// One JSON object per line.
pub fn write_feature_file(path: &Path, rows: &[FeatureRow]) -> Result<(), FeatureError> {
    let io = |source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("feature row serializes");
        buf.push(b'\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

pub fn read_feature_file(path: &Path) -> Result<Vec<FeatureRow>, FeatureError> {
    let text = std::fs::read_to_string(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| FeatureError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let row: FeatureRow = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        row.variant().map_err(|e| parse(e.to_string()))?;
        if row.values().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(parse("score outside [-1, 1]".into()));
        }
        rows.push(row);
    }
    Ok(rows)
}
