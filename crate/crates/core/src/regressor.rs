//! Ridge regression from feature rows to zero-shot accuracy.
//!
//! Columns are standardized with the population standard deviation, the
//! intercept is the unpenalized target mean, and the standardized weights
//! solve `(ZᵀZ + λI) w = Zᵀ(y − ȳ)` by Cholesky factorization. A column with
//! zero variance keeps std 1, is centered, takes no part in the solve and
//! gets weight exactly 0.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::features::{common_shape, mean_row, AggregationMode, FeatureError, FeatureRow, Variant};
use crate::{Categorized, Category, FEATURE_ORDER_VERSION, SCHEMA_VERSION};

/// Relative spread below which a column counts as constant.
const DEGENERATE_STD: f64 = 1e-12;
/// Smallest admissible Cholesky pivot, relative to the largest, when λ = 0.
const SINGULAR_PIVOT: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum RegressError {
    #[error("design matrix is empty")]
    Empty,
    #[error("row {row} has {got} columns, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("{0} targets for {1} rows")]
    TargetLength(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("normal equations are singular; use lambda > 0")]
    SingularSystem,
    #[error("lambda selection needs at least 2 datasets, got {0}")]
    InsufficientGroups(usize),
    #[error("lambda grid is empty")]
    EmptyGrid,
    #[error("feature version mismatch: {0}")]
    VersionMismatch(String),
    #[error("no feature rows to predict from")]
    EmptyRows,
    #[error("rows span several datasets: {0:?} and {1:?}")]
    MixedDatasets(String, String),
    #[error("{path}: schema_version {found} is not supported (expected {SCHEMA_VERSION})")]
    SchemaVersionMismatch { path: PathBuf, found: u64 },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Categorized for RegressError {
    fn category(&self) -> Category {
        match self {
            RegressError::BadLambda(_) | RegressError::EmptyGrid => Category::Config,
            RegressError::Feature(e) => e.category(),
            _ => Category::Data,
        }
    }
}

/// Fitted parameters in the original feature units.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    /// Weights on standardized columns.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
}

impl RidgeFit {
    pub fn predict_raw(&self, row: &[f64]) -> f64 {
        let mut acc = self.intercept;
        for (j, x) in row.iter().enumerate() {
            acc += self.weights[j] * ((x - self.feature_means[j]) / self.feature_stds[j]);
        }
        acc
    }
}

fn check_design(x: &[Vec<f64>], y: &[f64]) -> Result<usize, RegressError> {
    let d = x.first().ok_or(RegressError::Empty)?.len();
    if y.len() != x.len() {
        return Err(RegressError::TargetLength(y.len(), x.len()));
    }
    for (row, r) in x.iter().enumerate() {
        if r.len() != d {
            return Err(RegressError::Ragged { row, expected: d, got: r.len() });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(RegressError::NonFinite("features"));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(RegressError::NonFinite("targets"));
    }
    Ok(d)
}

/// Closed-form ridge fit with an unpenalized intercept.
pub fn fit_ridge(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<RidgeFit, RegressError> {
    let d = check_design(x, y)?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(RegressError::BadLambda(lambda));
    }
    let n = x.len();
    let nf = n as f64;

    let mut means = vec![0.0; d];
    for r in x {
        for (m, v) in means.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= nf;
    }
    let mut stds = vec![0.0; d];
    for r in x {
        for j in 0..d {
            let c = r[j] - means[j];
            stds[j] += c * c;
        }
    }
    let mut active = Vec::with_capacity(d);
    for j in 0..d {
        stds[j] = (stds[j] / nf).sqrt();
        if stds[j] <= DEGENERATE_STD * means[j].abs().max(1.0) {
            stds[j] = 1.0;
        } else {
            active.push(j);
        }
    }

    let y_mean = y.iter().sum::<f64>() / nf;
    let mut weights = vec![0.0; d];
    if !active.is_empty() {
        let z = DMatrix::from_fn(n, active.len(), |i, k| {
            let j = active[k];
            (x[i][j] - means[j]) / stds[j]
        });
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
        let mut a = z.transpose() * &z;
        for k in 0..active.len() {
            a[(k, k)] += lambda;
        }
        let b = z.transpose() * yc;
        let chol = a.clone().cholesky().ok_or(RegressError::SingularSystem)?;
        if lambda == 0.0 {
            let l = chol.l_dirty();
            let max_diag = (0..active.len()).map(|k| a[(k, k)]).fold(0.0, f64::max);
            let min_pivot = (0..active.len()).map(|k| l[(k, k)] * l[(k, k)]).fold(f64::INFINITY, f64::min);
            if min_pivot <= SINGULAR_PIVOT * max_diag {
                return Err(RegressError::SingularSystem);
            }
        }
        let w = chol.solve(&b);
        for (k, &j) in active.iter().enumerate() {
            weights[j] = w[k];
        }
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(RegressError::SingularSystem);
    }
    Ok(RidgeFit {
        weights,
        intercept: y_mean,
        lambda,
        feature_means: means,
        feature_stds: stds,
    })
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..count)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
        .collect()
}

/// 13 points from 1e-3 to 1e3.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-3, 1e3, 13)
}

/// One dataset's regression rows and its accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub dataset_id: String,
    pub x: Vec<Vec<f64>>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// `(lambda, leave-one-dataset-out RMSE)` in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Dataset prediction from raw row predictions: the clamped mean.
fn aggregate(raw: &[f64]) -> f64 {
    (raw.iter().sum::<f64>() / raw.len() as f64).clamp(0.0, 1.0)
}

/// Leave-one-dataset-out RMSE of dataset-level predictions at `lambda`.
pub fn loo_rmse(groups: &[Group], lambda: f64) -> Result<f64, RegressError> {
    let mut sq = 0.0;
    for (held, g) in groups.iter().enumerate() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (i, other) in groups.iter().enumerate() {
            if i != held {
                x.extend(other.x.iter().cloned());
                y.extend(std::iter::repeat_n(other.accuracy, other.x.len()));
            }
        }
        let fit = fit_ridge(&x, &y, lambda)?;
        let raw: Vec<f64> = g.x.iter().map(|r| fit.predict_raw(r)).collect();
        let err = aggregate(&raw) - g.accuracy;
        sq += err * err;
    }
    Ok((sq / groups.len() as f64).sqrt())
}

/// Grid value with the lowest leave-one-dataset-out RMSE; among equal
/// scores the larger lambda wins.
pub fn select_lambda(groups: &[Group], grid: &[f64]) -> Result<LambdaSelection, RegressError> {
    if groups.len() < 2 {
        return Err(RegressError::InsufficientGroups(groups.len()));
    }
    if grid.is_empty() {
        return Err(RegressError::EmptyGrid);
    }
    if let Some(&bad) = grid.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(RegressError::BadLambda(bad));
    }
    let scores: Vec<(f64, f64)> = grid
        .iter()
        .map(|&l| loo_rmse(groups, l).map(|r| (l, r)))
        .collect::<Result<_, _>>()?;
    let best = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let lambda = scores
        .iter()
        .filter(|s| s.1 == best)
        .map(|s| s.0)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(LambdaSelection { lambda, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub feature_order_version: String,
    pub aggregation_mode: AggregationMode,
    pub variant: Variant,
    pub training_datasets: Vec<String>,
}

#[derive(Serialize)]
struct ModelFile<'a> {
    schema_version: u32,
    #[serde(flatten)]
    model: &'a RegressionModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub class_label: String,
    pub raw_prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPrediction {
    pub dataset_id: String,
    pub predicted_accuracy: f64,
    pub per_class_predictions: Vec<ClassPrediction>,
}

impl RegressionModel {
    pub fn new(fit: RidgeFit, mode: AggregationMode, variant: Variant, training_datasets: Vec<String>) -> Self {
        Self {
            weights: fit.weights,
            intercept: fit.intercept,
            lambda: fit.lambda,
            feature_means: fit.feature_means,
            feature_stds: fit.feature_stds,
            feature_order_version: FEATURE_ORDER_VERSION.into(),
            aggregation_mode: mode,
            variant,
            training_datasets,
        }
    }

    pub fn width(&self) -> usize {
        self.weights.len()
    }

    fn validate(&self) -> Result<(), String> {
        let d = self.weights.len();
        if d == 0 || self.feature_means.len() != d || self.feature_stds.len() != d {
            return Err("weights, feature_means and feature_stds must be non-empty and equally long".into());
        }
        let finite = self
            .weights
            .iter()
            .chain(&self.feature_means)
            .chain(&self.feature_stds)
            .chain([&self.intercept, &self.lambda])
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite parameter".into());
        }
        if self.feature_stds.iter().any(|s| *s <= 0.0) {
            return Err("feature_stds must be positive".into());
        }
        if self.lambda < 0.0 {
            return Err("lambda must be non-negative".into());
        }
        Ok(())
    }

    pub fn predict_raw(&self, row: &[f64]) -> f64 {
        let mut acc = self.intercept;
        for (j, x) in row.iter().enumerate() {
            acc += self.weights[j] * ((x - self.feature_means[j]) / self.feature_stds[j]);
        }
        acc
    }

    fn check_rows(&self, rows: &[FeatureRow]) -> Result<(), RegressError> {
        if self.feature_order_version != FEATURE_ORDER_VERSION {
            return Err(RegressError::VersionMismatch(format!(
                "model uses feature order {:?}, this build writes {FEATURE_ORDER_VERSION:?}",
                self.feature_order_version
            )));
        }
        let (variant, width) = common_shape(rows)?;
        if let Some(r) = rows.iter().find(|r| r.feature_order_version != self.feature_order_version) {
            return Err(RegressError::VersionMismatch(format!(
                "row {}/{} has feature order {:?}, model expects {:?}",
                r.dataset_id, r.class_label, r.feature_order_version, self.feature_order_version
            )));
        }
        if width != self.width() || variant != self.variant {
            return Err(RegressError::VersionMismatch(format!(
                "rows are {variant} with width {width}, model is {} with width {}",
                self.variant,
                self.width()
            )));
        }
        Ok(())
    }

    /// Dataset-level prediction from one dataset's rows.
    pub fn predict_dataset(&self, rows: &[FeatureRow]) -> Result<DatasetPrediction, RegressError> {
        let first = rows.first().ok_or(RegressError::EmptyRows)?;
        if let Some(r) = rows.iter().find(|r| r.dataset_id != first.dataset_id) {
            return Err(RegressError::MixedDatasets(first.dataset_id.clone(), r.dataset_id.clone()));
        }
        self.check_rows(rows)?;
        let per_class: Vec<ClassPrediction> = rows
            .iter()
            .map(|r| ClassPrediction {
                class_label: r.class_label.clone(),
                raw_prediction: self.predict_raw(&r.values()),
            })
            .collect();
        let predicted_accuracy = match self.aggregation_mode {
            AggregationMode::PerRow => {
                aggregate(&per_class.iter().map(|p| p.raw_prediction).collect::<Vec<_>>())
            }
            AggregationMode::PerDatasetMean => {
                let refs: Vec<&FeatureRow> = rows.iter().collect();
                self.predict_raw(&mean_row(&refs)).clamp(0.0, 1.0)
            }
        };
        Ok(DatasetPrediction {
            dataset_id: first.dataset_id.clone(),
            predicted_accuracy,
            per_class_predictions: per_class,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&ModelFile {
            schema_version: SCHEMA_VERSION,
            model: self,
        })
        .expect("model serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), RegressError> {
        let io = |source| RegressError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        std::fs::write(path, self.to_json()).map_err(io)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, RegressError> {
        let parse_err = |message: String| RegressError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut value: Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| parse_err("top level is not an object".into()))?;
        let version = obj
            .remove("schema_version")
            .ok_or_else(|| parse_err("missing field `schema_version`".into()))?;
        match version.as_u64() {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(found) => {
                return Err(RegressError::SchemaVersionMismatch {
                    path: path.to_path_buf(),
                    found,
                })
            }
            None => return Err(parse_err("field `schema_version` is not an integer".into())),
        }
        let model: Self = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        model.validate().map_err(parse_err)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, RegressError> {
        let text = std::fs::read_to_string(path).map_err(|source| RegressError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }
}

/// Regression groups from feature rows and per-dataset accuracies.
/// Datasets come out in lexicographic order.
pub fn groups_from_rows(
    rows: &[FeatureRow],
    targets: &BTreeMap<String, f64>,
    mode: AggregationMode,
) -> Result<Vec<Group>, RegressError> {
    let m = crate::features::assemble_design_matrix(rows, targets, mode)?;
    Ok(m.groups()
        .into_iter()
        .map(|(dataset_id, idx)| Group {
            accuracy: m.y[idx[0]],
            x: idx.iter().map(|&i| m.x[i].clone()).collect(),
            dataset_id,
        })
        .collect())
}

/// Selects lambda by leave-one-dataset-out CV, then fits on all rows.
pub fn train(
    rows: &[FeatureRow],
    targets: &BTreeMap<String, f64>,
    mode: AggregationMode,
    grid: &[f64],
) -> Result<(RegressionModel, LambdaSelection), RegressError> {
    let groups = groups_from_rows(rows, targets, mode)?;
    let selection = select_lambda(&groups, grid)?;
    let (variant, _) = common_shape(rows)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for g in &groups {
        x.extend(g.x.iter().cloned());
        y.extend(std::iter::repeat_n(g.accuracy, g.x.len()));
    }
    let fit = fit_ridge(&x, &y, selection.lambda)?;
    let datasets = groups.into_iter().map(|g| g.dataset_id).collect();
    Ok((RegressionModel::new(fit, mode, variant, datasets), selection))
}
