//! Pearson correlation and RMSE between true and predicted accuracies.
//!
//! Values carry a [`Units`] tag and are never rescaled implicitly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Categorized, Category};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least {needed} pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("{0} series is constant; Pearson-r is undefined")]
    ConstantSeries(&'static str),
    #[error("non-finite accuracy for dataset {0:?}")]
    NonFinite(String),
    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl Categorized for MetricsError {
    fn category(&self) -> Category {
        Category::Data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    /// Accuracies in [0, 1].
    Fraction,
    /// Accuracies in [0, 100].
    Percent,
}

impl Units {
    pub fn as_str(self) -> &'static str {
        match self {
            Units::Fraction => "fraction",
            Units::Percent => "percent",
        }
    }
}

impl fmt::Display for Units {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Units {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fraction" => Ok(Units::Fraction),
            "percent" => Ok(Units::Percent),
            _ => Err(format!("unknown units {s:?} (expected fraction or percent)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub dataset_id: String,
    pub true_accuracy: f64,
    pub predicted_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPairs {
    pub units: Units,
    pub pairs: Vec<EvalPair>,
}

impl EvalPairs {
    pub fn new(units: Units, pairs: Vec<EvalPair>) -> Result<Self, MetricsError> {
        if let Some(p) = pairs
            .iter()
            .find(|p| !p.true_accuracy.is_finite() || !p.predicted_accuracy.is_finite())
        {
            return Err(MetricsError::NonFinite(p.dataset_id.clone()));
        }
        Ok(Self { units, pairs })
    }

    pub fn from_tuples(units: Units, pairs: &[(&str, f64, f64)]) -> Result<Self, MetricsError> {
        Self::new(
            units,
            pairs
                .iter()
                .map(|&(id, t, p)| EvalPair {
                    dataset_id: id.into(),
                    true_accuracy: t,
                    predicted_accuracy: p,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Same pairs expressed in `units`.
    pub fn to_units(&self, units: Units) -> EvalPairs {
        let k = match (self.units, units) {
            (Units::Fraction, Units::Percent) => 100.0,
            (Units::Percent, Units::Fraction) => 0.01,
            _ => 1.0,
        };
        EvalPairs {
            units,
            pairs: self
                .pairs
                .iter()
                .map(|p| EvalPair {
                    dataset_id: p.dataset_id.clone(),
                    true_accuracy: p.true_accuracy * k,
                    predicted_accuracy: p.predicted_accuracy * k,
                })
                .collect(),
        }
    }

    fn series(&self) -> (Vec<f64>, Vec<f64>) {
        self.pairs.iter().map(|p| (p.true_accuracy, p.predicted_accuracy)).unzip()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation in the n-denominator covariance form.
pub fn pearson_r(pairs: &EvalPairs) -> Result<f64, MetricsError> {
    if pairs.len() < 2 {
        return Err(MetricsError::TooFewPairs { needed: 2, got: pairs.len() });
    }
    let (t, p) = pairs.series();
    let (mt, mp) = (mean(&t), mean(&p));
    let mut cov = 0.0;
    let mut vt = 0.0;
    let mut vp = 0.0;
    for (a, b) in t.iter().zip(&p) {
        let (da, db) = (a - mt, b - mp);
        cov += da * db;
        vt += da * da;
        vp += db * db;
    }
    if vt == 0.0 {
        return Err(MetricsError::ConstantSeries("true"));
    }
    if vp == 0.0 {
        return Err(MetricsError::ConstantSeries("predicted"));
    }
    Ok((cov / (vt.sqrt() * vp.sqrt())).clamp(-1.0, 1.0))
}

/// Root mean squared error, in the units of the pairs.
pub fn rmse(pairs: &EvalPairs) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::TooFewPairs { needed: 1, got: 0 });
    }
    let sq: f64 = pairs
        .pairs
        .iter()
        .map(|p| (p.predicted_accuracy - p.true_accuracy).powi(2))
        .sum();
    Ok((sq / pairs.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub units: Units,
    pub n: usize,
    pub pearson_r: Option<f64>,
    pub rmse: f64,
}

/// Both metrics; Pearson-r is `None` when undefined (fewer than 2 pairs or a
/// constant series).
pub fn summarize(pairs: &EvalPairs) -> Result<MetricsSummary, MetricsError> {
    Ok(MetricsSummary {
        units: pairs.units,
        n: pairs.len(),
        pearson_r: pearson_r(pairs).ok(),
        rmse: rmse(pairs)?,
    })
}

/// Reads `dataset_id<TAB>true<TAB>predicted` lines; `#` starts a comment.
pub fn parse_values(text: &str, units: Units, path: &Path) -> Result<EvalPairs, MetricsError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| MetricsError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 tab-separated columns, got {}", cols.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        pairs.push(EvalPair {
            dataset_id: cols[0].into(),
            true_accuracy: num(cols[1])?,
            predicted_accuracy: num(cols[2])?,
        });
    }
    EvalPairs::new(units, pairs)
}

pub fn load_values(path: &Path, units: Units) -> Result<EvalPairs, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|e| MetricsError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_values(&text, units, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(t: &[f64], p: &[f64]) -> EvalPairs {
        let v: Vec<(String, f64, f64)> = t.iter().zip(p).enumerate().map(|(i, (a, b))| (format!("d{i}"), *a, *b)).collect();
        let refs: Vec<(&str, f64, f64)> = v.iter().map(|(s, a, b)| (s.as_str(), *a, *b)).collect();
        EvalPairs::from_tuples(Units::Fraction, &refs).unwrap()
    }

    #[test]
    fn trivial_cases() {
        let same = pairs(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]);
        assert!((pearson_r(&same).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(rmse(&same).unwrap(), 0.0);
        let anti = pairs(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]);
        assert!((pearson_r(&anti).unwrap() + 1.0).abs() < 1e-15);
        let shifted = pairs(&[0.1, 0.2, 0.3], &[2.1, 2.2, 2.3]);
        assert!((rmse(&shifted).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(pearson_r(&pairs(&[0.5], &[0.5])), Err(MetricsError::TooFewPairs { .. })));
        assert_eq!(
            pearson_r(&pairs(&[0.5, 0.5], &[0.1, 0.2])),
            Err(MetricsError::ConstantSeries("true"))
        );
        assert!(rmse(&pairs(&[], &[])).is_err());
        assert!(EvalPairs::from_tuples(Units::Fraction, &[("x", f64::NAN, 0.1)]).is_err());
    }

    #[test]
    fn values_file() {
        let text = "# dataset\ttrue\tpredicted\nafrican_food\t38.24\t41.22\n\nbeans\t39.84\t26.12 # note\n";
        let p = parse_values(text, Units::Percent, Path::new("v.tsv")).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.pairs[1].predicted_accuracy, 26.12);
        assert!(matches!(
            parse_values("a\t1\n", Units::Percent, Path::new("v.tsv")),
            Err(MetricsError::Parse { line: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn pearson_affine_invariant(
            v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..20),
            a in 0.01f64..100.0, b in -10.0f64..10.0, c in 0.01f64..100.0, d in -10.0f64..10.0,
        ) {
            let (t, p): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let base = pairs(&t, &p);
            prop_assume!(pearson_r(&base).is_ok());
            let tt: Vec<f64> = t.iter().map(|x| a * x + b).collect();
            let pp: Vec<f64> = p.iter().map(|x| c * x + d).collect();
            let moved = pairs(&tt, &pp);
            prop_assert!((pearson_r(&base).unwrap() - pearson_r(&moved).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn rmse_scales_with_units(v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20)) {
            let (t, p): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let f = pairs(&t, &p);
            let r = rmse(&f).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert!((rmse(&f.to_units(Units::Percent)).unwrap() - 100.0 * r).abs() < 1e-9);
            prop_assert_eq!(r == 0.0, t == p);
        }
    }
}
