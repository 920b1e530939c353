//! Compositions of the module operations, one per CLI command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captiongen::{CaptionBundle, CaptionError};
use crate::dataset::{sample_other_labels, sample_probe_images, DatasetError, DatasetManifest};
use crate::embedder::{EmbedError, Embedder};
use crate::features::{
    llm_block, render_prompt, vanilla_block, FeatureError, FeatureRow, Variant, AggregationMode,
    DEFAULT_LABEL_TEMPLATE, DEFAULT_N_COUNTERFACTUALS,
};
use crate::metrics::{summarize, EvalPair, EvalPairs, MetricsError, Units};
use crate::regressor::{train, DatasetPrediction, LambdaSelection, RegressError, RegressionModel};
use crate::rng::SplitMix64;
use crate::vector::EmbeddingVector;
use crate::zeroshot::{ZeroShotError, ZeroShotReport};
use crate::{Categorized, Category, FEATURE_ORDER_VERSION, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset {dataset_id:?}: no caption bundle for class {class_label:?}")]
    MissingBundle { dataset_id: String, class_label: String },
    #[error("no zero-shot report for dataset {0:?}")]
    MissingReport(String),
    #[error("dataset {0:?} appears in more than one input file")]
    DuplicateDataset(String),
    #[error("no {0} found")]
    NoInputs(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Regress(#[from] RegressError),
    #[error(transparent)]
    ZeroShot(#[from] ZeroShotError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Categorized for PipelineError {
    fn category(&self) -> Category {
        match self {
            PipelineError::Invalid(_) => Category::Config,
            PipelineError::Dataset(e) => e.category(),
            PipelineError::Caption(e) => e.category(),
            PipelineError::Embed(e) => e.category(),
            PipelineError::Feature(e) => e.category(),
            PipelineError::Regress(e) => e.category(),
            PipelineError::ZeroShot(e) => e.category(),
            PipelineError::Metrics(e) => e.category(),
            _ => Category::Data,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub n_counterfactuals: usize,
    pub c_other_labels: usize,
    pub seed: u64,
    pub variant: Variant,
    pub label_template: String,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_counterfactuals: DEFAULT_N_COUNTERFACTUALS,
            c_other_labels: DEFAULT_N_COUNTERFACTUALS,
            seed: 42,
            variant: Variant::Full,
            label_template: DEFAULT_LABEL_TEMPLATE.into(),
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_counterfactuals == 0 || self.c_other_labels == 0 {
            return Err(PipelineError::Invalid(
                "counterfactual and other-label counts must be at least 1".into(),
            ));
        }
        render_prompt(&self.label_template, "x").map_err(|e| PipelineError::Invalid(e.to_string()))?;
        Ok(())
    }
}

/// Texts one class needs embedded, in the order the row builder reads them.
struct ClassTexts {
    class_label: String,
    image_ref: String,
    llm: Option<(String, Vec<String>)>,
    vanilla: Option<(String, Vec<String>)>,
}

/// One feature row per class, in lexicographic class order.
///
/// Probe images are taken from the bundles when the variant uses captions,
/// and otherwise from the seeded probe sample (which selects the same images
/// for the same seed).
pub fn compute_features(
    m: &DatasetManifest,
    bundles: &[CaptionBundle],
    embedder: &Embedder,
    cfg: &FeatureConfig,
) -> Result<Vec<FeatureRow>, PipelineError> {
    cfg.validate()?;
    let by_class: BTreeMap<&str, &CaptionBundle> = bundles
        .iter()
        .filter(|b| b.dataset_id == m.dataset_id)
        .map(|b| (b.class_label.as_str(), b))
        .collect();
    let probes = sample_probe_images(m, cfg.seed)?;
    let mut plan = Vec::with_capacity(probes.len());
    for probe in probes {
        let bundle = by_class.get(probe.class_label.as_str()).copied();
        let llm = if cfg.variant.uses_llm() {
            let b = bundle.ok_or_else(|| PipelineError::MissingBundle {
                dataset_id: m.dataset_id.clone(),
                class_label: probe.class_label.clone(),
            })?;
            Some((b.plausible_caption.clone(), b.counterfactuals.clone()))
        } else {
            None
        };
        let vanilla = if cfg.variant.uses_vanilla() {
            let others = sample_other_labels(m, &probe.class_label, cfg.c_other_labels, cfg.seed)?;
            let prompts = others
                .iter()
                .map(|l| render_prompt(&cfg.label_template, l))
                .collect::<Result<_, _>>()?;
            Some((render_prompt(&cfg.label_template, &probe.class_label)?, prompts))
        } else {
            None
        };
        plan.push(ClassTexts {
            image_ref: bundle.map_or(probe.image_ref, |b| b.image_ref.clone()),
            class_label: probe.class_label,
            llm,
            vanilla,
        });
    }

    let mut texts: Vec<&str> = Vec::new();
    for p in &plan {
        for (head, tail) in [&p.llm, &p.vanilla].into_iter().flatten() {
            texts.push(head);
            texts.extend(tail.iter().map(String::as_str));
        }
    }
    let text_vecs = embedder.embed_texts(&texts)?;
    let images: Vec<Vec<u8>> = plan
        .iter()
        .map(|p| {
            let path = m.resolve(&p.image_ref);
            std::fs::read(&path).map_err(io_err(&path))
        })
        .collect::<Result<_, _>>()?;
    let image_refs: Vec<&[u8]> = images.iter().map(Vec::as_slice).collect();
    let image_vecs = embedder.embed_images(&image_refs)?;

    let mut cursor = text_vecs.iter();
    let mut take = |k: usize| -> Vec<EmbeddingVector> { cursor.by_ref().take(k).cloned().collect() };
    let mut rows = Vec::with_capacity(plan.len());
    for (p, img) in plan.iter().zip(&image_vecs) {
        let mut row = FeatureRow {
            dataset_id: m.dataset_id.clone(),
            class_label: p.class_label.clone(),
            s_pc: None,
            s_cf: None,
            s_true_label: None,
            s_other_labels: None,
            feature_order_version: FEATURE_ORDER_VERSION.into(),
        };
        if let Some((_, cfs)) = &p.llm {
            let head = take(1);
            let (s_pc, s_cf) = llm_block(img, &head[0], &take(cfs.len()), cfg.n_counterfactuals)?;
            row.s_pc = Some(s_pc);
            row.s_cf = Some(s_cf);
        }
        if let Some((_, others)) = &p.vanilla {
            let head = take(1);
            let (s_true, s_other) = vanilla_block(img, &head[0], &take(others.len()), cfg.c_other_labels)?;
            row.s_true_label = Some(s_true);
            row.s_other_labels = Some(s_other);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Files named on the command line; directories expand to their entries
/// ending in `suffix`, sorted.
pub fn collect_inputs(paths: &[PathBuf], suffix: &str) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(io_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Feature rows keyed by dataset.
pub fn load_feature_sets(files: &[PathBuf]) -> Result<BTreeMap<String, Vec<FeatureRow>>, PipelineError> {
    if files.is_empty() {
        return Err(PipelineError::NoInputs("feature files"));
    }
    let mut sets: BTreeMap<String, Vec<FeatureRow>> = BTreeMap::new();
    for f in files {
        let rows = crate::features::read_feature_file(f)?;
        let mut ids: Vec<&str> = rows.iter().map(|r| r.dataset_id.as_str()).collect();
        ids.dedup();
        for id in ids {
            if sets.contains_key(id) {
                return Err(PipelineError::DuplicateDataset(id.into()));
            }
        }
        for r in rows {
            sets.entry(r.dataset_id.clone()).or_default().push(r);
        }
    }
    Ok(sets)
}

/// Ground-truth accuracy per dataset from zero-shot report files.
pub fn load_targets(files: &[PathBuf]) -> Result<BTreeMap<String, f64>, PipelineError> {
    if files.is_empty() {
        return Err(PipelineError::NoInputs("zero-shot reports"));
    }
    let mut out = BTreeMap::new();
    for f in files {
        let r = ZeroShotReport::load(f)?;
        if out.insert(r.dataset_id.clone(), r.accuracy).is_some() {
            return Err(PipelineError::DuplicateDataset(r.dataset_id));
        }
    }
    Ok(out)
}

/// Rows projected to `variant` when they carry every block; other rows are
/// passed through so that a shape mismatch surfaces at the model.
fn rows_for(rows: &[FeatureRow], variant: Variant) -> Result<Vec<FeatureRow>, PipelineError> {
    rows.iter()
        .map(|r| match r.variant()? {
            Variant::Full if variant != Variant::Full => Ok(r.project(variant)?),
            _ => Ok(r.clone()),
        })
        .collect()
}

pub fn train_model(
    sets: &BTreeMap<String, Vec<FeatureRow>>,
    targets: &BTreeMap<String, f64>,
    variant: Variant,
    mode: AggregationMode,
    grid: &[f64],
) -> Result<(RegressionModel, LambdaSelection), PipelineError> {
    let mut rows = Vec::new();
    for (id, set) in sets {
        if !targets.contains_key(id) {
            return Err(PipelineError::MissingReport(id.clone()));
        }
        rows.extend(rows_for(set, variant)?);
    }
    Ok(train(&rows, targets, mode, grid)?)
}

pub fn predict_sets(
    model: &RegressionModel,
    sets: &BTreeMap<String, Vec<FeatureRow>>,
) -> Result<Vec<DatasetPrediction>, PipelineError> {
    sets.values()
        .map(|rows| Ok(model.predict_dataset(&rows_for(rows, model.variant)?)?))
        .collect()
}

#[derive(Serialize)]
struct PredictionFile<'a> {
    schema_version: u32,
    #[serde(flatten)]
    prediction: &'a DatasetPrediction,
}

pub fn prediction_path(out_dir: &Path, dataset_id: &str) -> PathBuf {
    out_dir.join(format!("{dataset_id}.prediction.json"))
}

pub fn save_prediction(p: &DatasetPrediction, out_dir: &Path) -> Result<PathBuf, PipelineError> {
    let path = prediction_path(out_dir, &p.dataset_id);
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut text = serde_json::to_string_pretty(&PredictionFile {
        schema_version: SCHEMA_VERSION,
        prediction: p,
    })
    .expect("prediction serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

pub fn load_prediction(path: &Path) -> Result<DatasetPrediction, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let parse = |message: String| PipelineError::Parse {
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
    serde_json::from_value(v).map_err(|e| parse(e.to_string()))
}

/// Fraction-scale pairs for every prediction, in prediction order.
pub fn pair_with_targets(
    predictions: &[DatasetPrediction],
    targets: &BTreeMap<String, f64>,
) -> Result<EvalPairs, PipelineError> {
    let pairs = predictions
        .iter()
        .map(|p| {
            let t = targets
                .get(&p.dataset_id)
                .ok_or_else(|| PipelineError::MissingReport(p.dataset_id.clone()))?;
            Ok(EvalPair {
                dataset_id: p.dataset_id.clone(),
                true_accuracy: *t,
                predicted_accuracy: p.predicted_accuracy,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    Ok(EvalPairs::new(Units::Fraction, pairs)?)
}

/// `max(2, round(fraction * k))` dataset ids, chosen by seed; at least two
/// datasets are always left for training.
pub fn choose_holdout(ids: &[String], fraction: f64, seed: u64) -> Result<Vec<String>, PipelineError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(PipelineError::Invalid(format!("holdout fraction {fraction} outside [0, 1)")));
    }
    let k = ((fraction * ids.len() as f64).round() as usize).max(2);
    if ids.len() < k + 2 {
        return Err(PipelineError::Invalid(format!(
            "{} datasets cannot supply {k} held-out and 2 training datasets",
            ids.len()
        )));
    }
    let mut pool: Vec<&String> = ids.iter().collect();
    pool.sort();
    let mut rng = SplitMix64::keyed(seed, &["holdout"]);
    for i in 0..k {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    let mut out: Vec<String> = pool[..k].iter().map(|s| s.to_string()).collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub lambda: f64,
    /// `None` when undefined on the held-out set.
    pub pearson_r: Option<f64>,
    pub rmse: f64,
    pub predictions: Vec<EvalPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub units: Units,
    pub aggregation_mode: AggregationMode,
    pub training_datasets: Vec<String>,
    pub holdout_datasets: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates every variant on the same split. `sets` must hold
/// full-variant rows.
pub fn ablate(
    sets: &BTreeMap<String, Vec<FeatureRow>>,
    targets: &BTreeMap<String, f64>,
    holdout: &[String],
    mode: AggregationMode,
    grid: &[f64],
    units: Units,
) -> Result<AblationReport, PipelineError> {
    for id in holdout {
        if !sets.contains_key(id) {
            return Err(PipelineError::Invalid(format!("held-out dataset {id:?} has no features")));
        }
    }
    let (test, train_sets): (BTreeMap<_, _>, BTreeMap<_, _>) = sets
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .partition(|(k, _)| holdout.contains(k));
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let (model, selection) = train_model(&train_sets, targets, variant, mode, grid)?;
        let preds = predict_sets(&model, &test)?;
        let pairs = pair_with_targets(&preds, targets)?.to_units(units);
        let summary = summarize(&pairs)?;
        rows.push(AblationRow {
            variant,
            lambda: selection.lambda,
            pearson_r: summary.pearson_r,
            rmse: summary.rmse,
            predictions: pairs.pairs,
        });
    }
    Ok(AblationReport {
        units,
        aggregation_mode: mode,
        training_datasets: train_sets.into_keys().collect(),
        holdout_datasets: test.into_keys().collect(),
        rows,
    })
}
