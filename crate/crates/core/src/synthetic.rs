//! Offline corpus generator for the mock backend.
//!
//! Each dataset gets its own directory holding a manifest, a mock spec and
//! mock PNG images:
//!
//! ```text
//! {dir}/corpus.json
//! {dir}/{dataset_id}/{dataset_id}.tsv
//! {dir}/{dataset_id}/mock.json
//! {dir}/{dataset_id}/images/{class}_{split}_{k}.png
//! ```
//!
//! Datasets differ only in `image_noise_sigma`, so ground-truth zero-shot
//! accuracy falls as sigma rises. The default sweep is spaced so that, at 50
//! classes and dim 32, accuracies land roughly evenly between chance-level
//! and 1.0.
//!
//! Class labels are pronounceable pseudo-words that share no token with each
//! other or with the prompt and stub-caption wording, which keeps mock text
//! routing unambiguous.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::mock::write_mock_png;
use crate::embedder::MockSpec;
use crate::rng::SplitMix64;
use crate::{Categorized, Category};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid corpus spec: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Categorized for SyntheticError {
    fn category(&self) -> Category {
        match self {
            SyntheticError::Config(_) => Category::Config,
            SyntheticError::Io { .. } => Category::Data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// One dataset per entry.
    pub image_noise_sigmas: Vec<f64>,
    pub classes_per_dataset: usize,
    pub probe_images_per_class: usize,
    pub test_images_per_class: usize,
    pub dim: usize,
    pub text_noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            image_noise_sigmas: vec![0.02, 0.22, 0.28, 0.33, 0.40, 0.50, 0.70, 1.0],
            classes_per_dataset: 50,
            probe_images_per_class: 3,
            test_images_per_class: 10,
            dim: 32,
            text_noise_sigma: 0.1,
            seed: 42,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: &str| Err(SyntheticError::Config(m.into()));
        if self.image_noise_sigmas.is_empty() {
            return bad("image_noise_sigmas is empty");
        }
        if self.image_noise_sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("image_noise_sigmas must be finite and non-negative");
        }
        if !self.text_noise_sigma.is_finite() || self.text_noise_sigma < 0.0 {
            return bad("text_noise_sigma must be finite and non-negative");
        }
        if self.classes_per_dataset < 2 {
            return bad("need at least 2 classes per dataset");
        }
        if self.probe_images_per_class == 0 || self.test_images_per_class == 0 {
            return bad("probe and test images per class must be positive");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub dataset_id: String,
    pub image_noise_sigma: f64,
    /// Relative to the corpus directory.
    pub manifest: PathBuf,
    /// Relative to the corpus directory.
    pub mock_spec: PathBuf,
    pub class_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub datasets: Vec<SyntheticDataset>,
}

impl Corpus {
    pub const INDEX_FILE: &'static str = "corpus.json";
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "", "n", "r", "x", "k"];

/// Words the mock router must never see inside a label.
const RESERVED: [&str; 3] = ["photo", "photograph", "picture"];

fn pseudo_word(rng: &mut SplitMix64) -> String {
    let syllables = 2 + rng.below(2);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.below(ONSETS.len())]);
        w.push_str(NUCLEI[rng.below(NUCLEI.len())]);
    }
    w.push_str(CODAS[rng.below(CODAS.len())]);
    w
}

/// `count` distinct pseudo-word labels for one dataset.
pub fn class_labels(seed: u64, dataset_id: &str, count: usize) -> Vec<String> {
    let mut rng = SplitMix64::keyed(seed, &["labels", dataset_id]);
    let mut out = BTreeSet::new();
    while out.len() < count {
        let w = pseudo_word(&mut rng);
        if !RESERVED.contains(&w.as_str()) {
            out.insert(w);
        }
    }
    out.into_iter().collect()
}

pub fn dataset_id(index: usize) -> String {
    format!("synth{index:02}")
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), SyntheticError> {
    let io = |source| SyntheticError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

/// Writes the corpus under `dir` and returns its index. Output is a pure
/// function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Corpus, SyntheticError> {
    spec.validate()?;
    let mut datasets = Vec::with_capacity(spec.image_noise_sigmas.len());
    for (i, &sigma) in spec.image_noise_sigmas.iter().enumerate() {
        let id = dataset_id(i);
        let labels = class_labels(spec.seed, &id, spec.classes_per_dataset);
        let rel = PathBuf::from(&id);
        let mut manifest = String::from("# image_ref\tclass_label\tsplit\n");
        let mut instance = 0u64;
        for label in &labels {
            for (split, count) in [("probe-pool", spec.probe_images_per_class), ("test", spec.test_images_per_class)] {
                for k in 0..count {
                    let name = format!("images/{label}_{split}_{k}.png");
                    write(&dir.join(&rel).join(&name), &write_mock_png(label, (i as u64) << 32 | instance))?;
                    instance += 1;
                    writeln!(manifest, "{name}\t{label}\t{split}").expect("write to String");
                }
            }
        }
        let mock = MockSpec {
            dim: spec.dim,
            class_prototypes: labels
                .iter()
                .enumerate()
                .map(|(k, l)| (l.clone(), k as u64))
                .collect::<BTreeMap<_, _>>(),
            image_noise_sigma: sigma,
            text_noise_sigma: spec.text_noise_sigma,
            seed: SplitMix64::keyed(spec.seed, &["mock", &id]).next_u64(),
        };
        let manifest_rel = rel.join(format!("{id}.tsv"));
        let mock_rel = rel.join("mock.json");
        write(&dir.join(&manifest_rel), manifest.as_bytes())?;
        let mut mock_json = serde_json::to_string_pretty(&mock).expect("mock spec serializes");
        mock_json.push('\n');
        write(&dir.join(&mock_rel), mock_json.as_bytes())?;
        datasets.push(SyntheticDataset {
            dataset_id: id,
            image_noise_sigma: sigma,
            manifest: manifest_rel,
            mock_spec: mock_rel,
            class_labels: labels,
        });
    }
    let corpus = Corpus {
        spec: spec.clone(),
        datasets,
    };
    let mut index = serde_json::to_string_pretty(&corpus).expect("corpus serializes");
    index.push('\n');
    write(&dir.join(Corpus::INDEX_FILE), index.as_bytes())?;
    Ok(corpus)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, SyntheticError> {
    let path = dir.join(Corpus::INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|source| SyntheticError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| SyntheticError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_manifest;
    use crate::embedder::mock::mock_reference_class;
    use crate::features::label_prompt;

    fn small() -> CorpusSpec {
        CorpusSpec {
            image_noise_sigmas: vec![0.0, 0.5],
            classes_per_dataset: 4,
            probe_images_per_class: 2,
            test_images_per_class: 3,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn labels_route_to_themselves() {
        let labels = class_labels(7, "synth00", 40);
        assert_eq!(labels.len(), 40);
        let spec = MockSpec {
            dim: 4,
            class_prototypes: labels.iter().enumerate().map(|(k, l)| (l.clone(), k as u64)).collect(),
            image_noise_sigma: 0.0,
            text_noise_sigma: 0.0,
            seed: 0,
        };
        for l in &labels {
            assert_eq!(mock_reference_class(&label_prompt(l).unwrap(), &spec), l);
        }
    }

    #[test]
    fn writes_loadable_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small(), dir.path()).unwrap();
        assert_eq!(corpus.datasets.len(), 2);
        for d in &corpus.datasets {
            let m = load_manifest(&dir.path().join(&d.manifest), None).unwrap();
            assert_eq!(m.dataset_id, d.dataset_id);
            assert_eq!(m.class_labels, d.class_labels);
            assert_eq!(m.entries.len(), 4 * 5);
            m.check_probe_pool().unwrap();
            MockSpec::load(&dir.path().join(&d.mock_spec)).unwrap();
        }
        assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_corpus(&small(), a.path()).unwrap();
        generate_corpus(&small(), b.path()).unwrap();
        for rel in ["corpus.json", "synth01/synth01.tsv", "synth01/mock.json"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = CorpusSpec {
            classes_per_dataset: 1,
            ..small()
        };
        assert!(matches!(generate_corpus(&spec, Path::new("/nonexistent")), Err(SyntheticError::Config(_))));
    }
}
