//! The `plp` binary: outputs, exit codes and file hygiene.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plp_core::synthetic::{Corpus, CorpusSpec};

fn plp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plp"))
        .args(args)
        .env_remove("PLP_LLM_API_KEY")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = plp(args);
    assert!(out.status.success(), "plp {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, sigmas: Vec<f64>) -> Corpus {
    let spec = CorpusSpec {
        image_noise_sigmas: sigmas,
        classes_per_dataset: 6,
        probe_images_per_class: 1,
        test_images_per_class: 4,
        ..CorpusSpec::default()
    };
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    ok(&["synth", "--spec", s(&spec_path), "--out", s(&dir.join("corpus"))]);
    serde_json::from_slice(&std::fs::read(dir.join("corpus/corpus.json")).unwrap()).unwrap()
}

fn listing(dir: &Path) -> Vec<(PathBuf, u64)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let len = p.metadata().unwrap().len();
                out.push((p, len));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn metrics_on_published_percent_values() {
    let dir = tempfile::tempdir().unwrap();
    let values = dir.path().join("values.tsv");
    std::fs::write(
        &values,
        "# dataset\ttrue\tpredicted\na\t38.24\t41.22\nb\t39.84\t26.12\nc\t89.25\t84.86\nd\t91.68\t76.41\ne\t83.76\t74.38\n",
    )
    .unwrap();
    let stdout = ok(&["metrics", "--values", s(&values), "--units", "percent", "--out", s(dir.path())]);
    assert_eq!(stdout.lines().nth(1), Some("5\t0.9619\t10.3687\tpercent"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["units"], "percent");
    assert_eq!(json["n"], 5);
}

#[test]
fn metrics_convert_only_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let values = dir.path().join("values.tsv");
    std::fs::write(&values, "a\t0.5\t0.4\nb\t0.7\t0.9\n").unwrap();
    let plain = ok(&["metrics", "--values", s(&values)]);
    assert!(plain.lines().nth(1).unwrap().ends_with("0.1581\tfraction"), "{plain}");
    let pct = ok(&["metrics", "--values", s(&values), "--percent"]);
    assert!(pct.lines().nth(1).unwrap().ends_with("15.8114\tpercent"), "{pct}");
}

#[test]
fn missing_api_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), vec![0.2]);
    let manifest = dir.path().join("corpus").join(&corpus.datasets[0].manifest);
    let out = plp(&["captions", "--manifest", s(&manifest), "--out", s(&dir.path().join("b"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("PLP_LLM_API_KEY"), "{stderr}");
    assert!(!dir.path().join("b").exists());
}

#[test]
fn exit_codes_follow_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), vec![0.2]);
    let manifest = dir.path().join("corpus").join(&corpus.datasets[0].manifest);
    let out = s(dir.path()).to_string() + "/out";

    let bad_kind = plp(&["zeroshot", "--backend", "carrier-pigeon:x", "--manifest", s(&manifest), "--out", &out]);
    assert_eq!(bad_kind.status.code(), Some(2));

    let missing = plp(&["zeroshot", "--backend", "mock:/nonexistent.json", "--manifest", "/nonexistent.tsv", "--out", &out]);
    assert_eq!(missing.status.code(), Some(3));

    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let remote = format!("remote:http://127.0.0.1:{port}");
    let unreachable = plp(&["zeroshot", "--backend", &remote, "--manifest", s(&manifest), "--out", &out]);
    assert_eq!(unreachable.status.code(), Some(4), "{}", String::from_utf8_lossy(&unreachable.stderr));
}

#[test]
fn pipeline_writes_only_under_out_and_ablates() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), vec![0.05, 0.3, 0.6, 1.0]);
    let corpus_dir = dir.path().join("corpus");
    let before = listing(&corpus_dir);
    let (bundles, reports, features) = (dir.path().join("b"), dir.path().join("r"), dir.path().join("f"));
    for d in &corpus.datasets {
        let manifest = corpus_dir.join(&d.manifest);
        let backend = format!("mock:{}", corpus_dir.join(&d.mock_spec).display());
        ok(&["captions", "--manifest", s(&manifest), "--llm-base-url", "stub:", "--out", s(&bundles)]);
        ok(&["zeroshot", "--backend", &backend, "--manifest", s(&manifest), "--out", s(&reports)]);
        ok(&["features", "--backend", &backend, "--manifest", s(&manifest), "--bundles", s(&bundles), "--out", s(&features)]);
    }
    assert_eq!(listing(&corpus_dir), before);
    assert!(reports.join("synth00.zeroshot.json").is_file());
    assert!(features.join("synth03.features.jsonl").is_file());

    let ablation = dir.path().join("ablation");
    let stdout = ok(&[
        "ablate",
        "--features",
        s(&features),
        "--reports",
        s(&reports),
        "--holdout",
        "synth00,synth03",
        "--out",
        s(&ablation),
    ]);
    for v in ["full", "llm-only", "vanilla-only"] {
        assert!(stdout.lines().any(|l| l.starts_with(&format!("{v}\t"))), "{stdout}");
    }
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(ablation.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["holdout_datasets"], serde_json::json!(["synth00", "synth03"]));
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
}
