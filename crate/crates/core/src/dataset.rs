//! Dataset manifests and seeded sampling of probe images and label prompts.
//!
//! A manifest is a UTF-8 file with one `image_ref<TAB>class_label<TAB>split`
//! record per line, where `split` is `probe-pool` or `test`. Lines starting
//! with `#` and blank lines are skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::{Categorized, Category};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid manifest: {0}")]
    Validation(String),
    #[error("class {0:?} has no probe-pool entry")]
    MissingClass(String),
    #[error("dataset {0:?} has a single class; no other labels to sample")]
    SingletonDataset(String),
    #[error("unknown class label {0:?}")]
    UnknownLabel(String),
    #[error("sample count must be at least 1")]
    ZeroCount,
}

impl Categorized for DatasetError {
    fn category(&self) -> Category {
        Category::Data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    ProbePool,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::ProbePool => "probe-pool",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probe-pool" => Ok(Split::ProbePool),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected probe-pool or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_ref: String,
    pub class_label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub entries: Vec<ManifestEntry>,
    /// Sorted, unique.
    pub class_labels: Vec<String>,
    /// Directory that relative image refs are resolved against.
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeImage {
    pub dataset_id: String,
    pub class_label: String,
    pub image_ref: String,
    pub selection_seed: u64,
}

/// Reads and validates a manifest. `dataset_id` defaults to the file stem.
pub fn load_manifest(path: &Path, dataset_id: Option<&str>) -> Result<DatasetManifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let id = match dataset_id {
        Some(id) => id.to_string(),
        None => path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| DatasetError::Validation(format!("cannot derive dataset id from {}", path.display())))?
            .to_string(),
    };
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&id, &text, base_dir)
}

impl DatasetManifest {
    pub fn parse(dataset_id: &str, text: &str, base_dir: PathBuf) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(DatasetError::Parse {
                    line: line_no,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let (image_ref, class_label) = (fields[0].trim(), fields[1].trim());
            if image_ref.is_empty() || class_label.is_empty() {
                return Err(DatasetError::Parse {
                    line: line_no,
                    message: "empty image_ref or class_label".into(),
                });
            }
            let split = fields[2]
                .trim()
                .parse::<Split>()
                .map_err(|message| DatasetError::Parse { line: line_no, message })?;
            entries.push(ManifestEntry {
                image_ref: image_ref.to_string(),
                class_label: class_label.to_string(),
                split,
            });
        }
        Self::new(dataset_id, entries, base_dir)
    }

    pub fn new(dataset_id: &str, entries: Vec<ManifestEntry>, base_dir: PathBuf) -> Result<Self, DatasetError> {
        if dataset_id.is_empty() {
            return Err(DatasetError::Validation("empty dataset id".into()));
        }
        let class_labels: Vec<String> = entries
            .iter()
            .map(|e| e.class_label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if class_labels.is_empty() {
            return Err(DatasetError::Validation(format!("dataset {dataset_id:?} has no classes")));
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert((e.split, e.image_ref.as_str())) {
                return Err(DatasetError::Validation(format!(
                    "duplicate image_ref {:?} in split {}",
                    e.image_ref, e.split
                )));
            }
        }
        Ok(Self {
            dataset_id: dataset_id.to_string(),
            entries,
            class_labels,
            base_dir,
        })
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, image_ref: &str) -> PathBuf {
        let p = Path::new(image_ref);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn probe_pool_by_class(&self) -> BTreeMap<&str, Vec<&ManifestEntry>> {
        let mut pool: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in self.entries_in(Split::ProbePool) {
            pool.entry(e.class_label.as_str()).or_default().push(e);
        }
        pool
    }

    pub fn check_probe_pool(&self) -> Result<(), DatasetError> {
        let pool = self.probe_pool_by_class();
        match self.class_labels.iter().find(|l| !pool.contains_key(l.as_str())) {
            Some(missing) => Err(DatasetError::MissingClass(missing.clone())),
            None => Ok(()),
        }
    }
}

/// Picks one probe-pool image per class, uniformly, in lexicographic class order.
///
/// Each class draws from its own stream keyed by `(seed, dataset_id, class_label)`,
/// so a class's choice does not depend on which other classes exist.
pub fn sample_probe_images(m: &DatasetManifest, seed: u64) -> Result<Vec<ProbeImage>, DatasetError> {
    let pool = m.probe_pool_by_class();
    m.class_labels
        .iter()
        .map(|label| {
            let candidates = pool
                .get(label.as_str())
                .ok_or_else(|| DatasetError::MissingClass(label.clone()))?;
            let mut rng = SplitMix64::keyed(seed, &["probe", &m.dataset_id, label]);
            let pick = candidates[rng.below(candidates.len())];
            Ok(ProbeImage {
                dataset_id: m.dataset_id.clone(),
                class_label: label.clone(),
                image_ref: pick.image_ref.clone(),
                selection_seed: seed,
            })
        })
        .collect()
}

/// Samples `count` class labels other than `target`.
///
/// Without replacement when enough other classes exist; otherwise with
/// replacement (logged), which is the case for e.g. 3-class datasets with
/// `count = 5`.
pub fn sample_other_labels(
    m: &DatasetManifest,
    target: &str,
    count: usize,
    seed: u64,
) -> Result<Vec<String>, DatasetError> {
    if !m.class_labels.iter().any(|l| l == target) {
        return Err(DatasetError::UnknownLabel(target.to_string()));
    }
    if count == 0 {
        return Err(DatasetError::ZeroCount);
    }
    if m.class_labels.len() == 1 {
        return Err(DatasetError::SingletonDataset(m.dataset_id.clone()));
    }
    let mut others: Vec<&String> = m.class_labels.iter().filter(|l| *l != target).collect();
    let mut rng = SplitMix64::keyed(seed, &["other-labels", &m.dataset_id, target]);
    if others.len() >= count {
        // partial Fisher-Yates
        for i in 0..count {
            let j = i + rng.below(others.len() - i);
            others.swap(i, j);
        }
        Ok(others[..count].iter().map(|s| s.to_string()).collect())
    } else {
        log::warn!(
            "dataset {:?}: only {} other classes for {} label prompts; sampling with replacement",
            m.dataset_id,
            others.len(),
            count
        );
        Ok((0..count).map(|_| others[rng.below(others.len())].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(lines: &[(&str, &str, &str)]) -> DatasetManifest {
        let text: String = lines
            .iter()
            .map(|(a, b, c)| format!("{a}\t{b}\t{c}\n"))
            .collect();
        DatasetManifest::parse("ds", &text, PathBuf::new()).unwrap()
    }

    fn n_class(n: usize) -> DatasetManifest {
        let lines: Vec<(String, String)> = (0..n).map(|i| (format!("img{i}.png"), format!("c{i:02}"))).collect();
        let refs: Vec<(&str, &str, &str)> = lines.iter().map(|(a, b)| (a.as_str(), b.as_str(), "probe-pool")).collect();
        manifest(&refs)
    }

    #[test]
    fn parses_three_line_manifest() {
        let m = manifest(&[("x.png", "b", "probe-pool"), ("y.png", "a", "probe-pool"), ("z.png", "a", "probe-pool")]);
        assert_eq!(m.class_labels, vec!["a", "b"]);
        assert_eq!(m.entries.len(), 3);
    }

    #[test]
    fn skips_comments_and_blank_lines() {
        let m = DatasetManifest::parse("d", "# header\n\nx.png\ta\ttest\n", PathBuf::new()).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].split, Split::Test);
    }

    #[test]
    fn unknown_split_names_line() {
        let err = DatasetManifest::parse("d", "x.png\ta\tprobe-pool\ny.png\ta\ttrain\n", PathBuf::new()).unwrap_err();
        match err {
            DatasetError::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("train"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_field_count_is_parse_error() {
        let err = DatasetManifest::parse("d", "x.png a probe-pool\n", PathBuf::new()).unwrap_err();
        assert!(matches!(err, DatasetError::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_and_duplicate_manifests_fail_validation() {
        assert!(matches!(
            DatasetManifest::parse("d", "# nothing\n", PathBuf::new()),
            Err(DatasetError::Validation(_))
        ));
        assert!(matches!(
            DatasetManifest::parse("d", "x\ta\ttest\nx\tb\ttest\n", PathBuf::new()),
            Err(DatasetError::Validation(_))
        ));
        // same ref in different splits is fine
        assert!(DatasetManifest::parse("d", "x\ta\ttest\nx\ta\tprobe-pool\n", PathBuf::new()).is_ok());
    }

    #[test]
    fn beans_style_manifest_has_three_classes() {
        let m = manifest(&[
            ("h1.jpg", "healthy", "probe-pool"),
            ("r1.jpg", "bean_rust", "probe-pool"),
            ("a1.jpg", "angular_leaf_spot", "probe-pool"),
            ("h2.jpg", "healthy", "test"),
        ]);
        assert_eq!(m.class_labels.len(), 3);
    }

    #[test]
    fn load_manifest_uses_file_stem() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("beans.tsv");
        std::fs::write(&p, "img/a.png\thealthy\tprobe-pool\n").unwrap();
        let m = load_manifest(&p, None).unwrap();
        assert_eq!(m.dataset_id, "beans");
        assert_eq!(m.resolve("img/a.png"), dir.path().join("img/a.png"));
        let m = load_manifest(&p, Some("custom")).unwrap();
        assert_eq!(m.dataset_id, "custom");
    }

    #[test]
    fn single_candidate_is_forced() {
        let m = manifest(&[("only.png", "a", "probe-pool"), ("t.png", "a", "test")]);
        for seed in 0..50 {
            let probes = sample_probe_images(&m, seed).unwrap();
            assert_eq!(probes.len(), 1);
            assert_eq!(probes[0].image_ref, "only.png");
        }
    }

    #[test]
    fn probe_sampling_is_deterministic_and_one_per_class() {
        let m = manifest(&[
            ("a1", "a", "probe-pool"),
            ("a2", "a", "probe-pool"),
            ("b1", "b", "probe-pool"),
            ("b2", "b", "probe-pool"),
            ("c1", "c", "probe-pool"),
        ]);
        let first = sample_probe_images(&m, 42).unwrap();
        assert_eq!(first, sample_probe_images(&m, 42).unwrap());
        let labels: Vec<_> = first.iter().map(|p| p.class_label.as_str()).collect();
        assert_eq!(labels, vec!["a", "b", "c"]);
    }

    #[test]
    fn missing_probe_pool_class_is_reported() {
        let m = manifest(&[("a1", "a", "probe-pool"), ("b1", "b", "test")]);
        assert!(matches!(sample_probe_images(&m, 0), Err(DatasetError::MissingClass(c)) if c == "b"));
        assert!(matches!(m.check_probe_pool(), Err(DatasetError::MissingClass(_))));
    }

    #[test]
    fn probe_selection_is_uniform_over_candidates() {
        // 10 candidates, 1000 seeds: each should be chosen ~100 times.
        let lines: Vec<String> = (0..10).map(|i| format!("img{i}")).collect();
        let refs: Vec<(&str, &str, &str)> = lines.iter().map(|l| (l.as_str(), "a", "probe-pool")).collect();
        let m = manifest(&refs);
        let mut counts = BTreeMap::new();
        for seed in 0..1000 {
            let p = sample_probe_images(&m, seed).unwrap();
            *counts.entry(p[0].image_ref.clone()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 10);
        for (img, c) in counts {
            let freq = c as f64 / 1000.0;
            assert!((0.05..=0.15).contains(&freq), "{img}: {freq}");
        }
    }

    #[test]
    fn probe_choice_independent_of_other_classes() {
        let small = manifest(&[("a1", "a", "probe-pool"), ("a2", "a", "probe-pool"), ("a3", "a", "probe-pool")]);
        let big = manifest(&[
            ("a1", "a", "probe-pool"),
            ("a2", "a", "probe-pool"),
            ("a3", "a", "probe-pool"),
            ("z1", "z", "probe-pool"),
        ]);
        for seed in 0..20 {
            assert_eq!(
                sample_probe_images(&small, seed).unwrap()[0],
                sample_probe_images(&big, seed).unwrap()[0]
            );
        }
    }

    #[test]
    fn other_labels_without_replacement() {
        let m = n_class(10);
        let picked = sample_other_labels(&m, "c03", 5, 7).unwrap();
        assert_eq!(picked.len(), 5);
        let distinct: BTreeSet<_> = picked.iter().collect();
        assert_eq!(distinct.len(), 5);
        assert!(!picked.iter().any(|l| l == "c03"));
        assert_eq!(picked, sample_other_labels(&m, "c03", 5, 7).unwrap());
    }

    #[test]
    fn other_labels_fall_back_to_replacement() {
        let m = n_class(3);
        for seed in 0..100 {
            let picked = sample_other_labels(&m, "c00", 5, seed).unwrap();
            assert_eq!(picked.len(), 5);
            assert!(picked.iter().all(|l| l == "c01" || l == "c02"));
            let distinct: BTreeSet<_> = picked.iter().collect();
            assert!(distinct.len() < picked.len(), "pigeonhole: 5 draws from 2 labels must repeat");
        }
    }

    #[test]
    fn other_labels_edge_cases() {
        let two = n_class(2);
        assert_eq!(sample_other_labels(&two, "c00", 1, 3).unwrap(), vec!["c01"]);
        let one = n_class(1);
        assert!(matches!(sample_other_labels(&one, "c00", 1, 0), Err(DatasetError::SingletonDataset(_))));
        assert!(matches!(sample_other_labels(&two, "zz", 1, 0), Err(DatasetError::UnknownLabel(_))));
        assert!(matches!(sample_other_labels(&two, "c00", 0, 0), Err(DatasetError::ZeroCount)));
    }
}
