use std::path::{Path, PathBuf};
use std::time::Instant;

use plp_core::captiongen::{generate_bundles, load_dataset_bundles, CaptionClient, LlmConfig};
use plp_core::dataset::{load_manifest, DatasetManifest};
use plp_core::embedder::{open_backend, Embedder};
use plp_core::features::{feature_file_path, write_feature_file};
use plp_core::metrics::{load_values, summarize, EvalPairs, Units};
use plp_core::pipeline::{
    ablate, choose_holdout, collect_inputs, compute_features, load_feature_sets, load_prediction, load_targets,
    pair_with_targets, predict_sets, save_prediction, train_model, FeatureConfig, PipelineError,
};
use plp_core::regressor::{default_lambda_grid, RegressionModel};
use plp_core::synthetic::{generate_corpus, CorpusSpec};
use plp_core::zeroshot::zero_shot_accuracy;
use plp_core::SCHEMA_VERSION;

use crate::{Cli, Command, Failure, LlmArgs, ManifestArgs};

const FEATURES_SUFFIX: &str = ".features.jsonl";
const REPORT_SUFFIX: &str = ".zeroshot.json";
const PREDICTION_SUFFIX: &str = ".prediction.json";

/// Wall time and throughput, printed to stderr when a command finishes.
struct Timing {
    command: &'static str,
    start: Instant,
}

impl Timing {
    fn start(command: &'static str) -> Self {
        Self {
            command,
            start: Instant::now(),
        }
    }

    fn finish(self, classes: Option<usize>) {
        let secs = self.start.elapsed().as_secs_f64();
        match classes {
            Some(n) if secs > 0.0 => eprintln!(
                "plp {}: {n} classes in {secs:.3} s ({:.1} classes/s)",
                self.command,
                n as f64 / secs
            ),
            _ => eprintln!("plp {}: {secs:.3} s", self.command),
        }
    }
}

fn manifest(args: &ManifestArgs) -> Result<DatasetManifest, Failure> {
    Ok(load_manifest(&args.manifest, args.dataset_id.as_deref())?)
}

fn embedder(backend: Option<&str>, out: &Path) -> Result<Embedder, Failure> {
    let spec = backend.ok_or_else(|| Failure::config("--backend is required for this command"))?;
    Ok(Embedder::new(open_backend(spec)?).with_cache_dir(&out.join("cache"))?)
}

fn llm_config(a: &LlmArgs) -> LlmConfig {
    let base = if a.llm_base_url.starts_with("stub:") {
        LlmConfig::stub()
    } else {
        LlmConfig::default()
    };
    LlmConfig {
        base_url: a.llm_base_url.clone(),
        model_name: a.llm_model.clone().unwrap_or(base.model_name.clone()),
        requests_per_minute: a.llm_requests_per_minute.unwrap_or(base.requests_per_minute),
        concurrency: a.llm_concurrency,
        max_retries: a.llm_max_retries,
        timeout_secs: a.llm_timeout_secs,
        ..base
    }
}

fn inputs(paths: &[PathBuf], suffix: &str) -> Result<Vec<PathBuf>, Failure> {
    Ok(collect_inputs(paths, suffix)?)
}

fn grid(g: Option<Vec<f64>>) -> Vec<f64> {
    g.unwrap_or_else(default_lambda_grid)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let io = |e: std::io::Error| {
        Failure::from(PipelineError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(io)
}

fn fmt_r(r: Option<f64>) -> String {
    r.map_or_else(|| "undefined".into(), |r| format!("{r:.4}"))
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let seed = cli.seed;
    let backend = cli.backend.as_deref();
    match cli.command {
        Command::Captions {
            manifest: margs,
            llm,
            n_counterfactuals,
            out,
        } => {
            let t = Timing::start("captions");
            let m = manifest(&margs)?;
            let client = CaptionClient::from_config(llm_config(&llm))?;
            let run = generate_bundles(&client, &m, seed, n_counterfactuals, &out)?;
            println!(
                "{}: {} bundles ({} generated, {} reused), {} LLM requests",
                m.dataset_id,
                run.bundles.len(),
                run.generated,
                run.cached,
                client.calls()
            );
            t.finish(Some(run.bundles.len()));
        }
        Command::Embed {
            manifest: margs,
            bundles,
            out,
        } => {
            let t = Timing::start("embed");
            let m = manifest(&margs)?;
            let e = embedder(backend, &out)?;
            let mut images = Vec::with_capacity(m.entries.len());
            for entry in &m.entries {
                let path = m.resolve(&entry.image_ref);
                images.push(std::fs::read(&path).map_err(|source| PipelineError::Io { path, source })?);
            }
            let refs: Vec<&[u8]> = images.iter().map(Vec::as_slice).collect();
            e.embed_images(&refs)?;
            let mut texts: Vec<String> = Vec::new();
            if let Some(dir) = bundles {
                for b in load_dataset_bundles(&dir, &m.dataset_id)? {
                    texts.push(b.plausible_caption);
                    texts.extend(b.counterfactuals);
                }
            }
            let text_refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            e.embed_texts(&text_refs)?;
            e.flush()?;
            let (n_text, n_image) = e.cache_len();
            println!(
                "{}: {} images, {} texts embedded; cache holds {n_image} image and {n_text} text vectors",
                m.dataset_id,
                images.len(),
                texts.len()
            );
            t.finish(Some(m.class_labels.len()));
        }
        Command::Features {
            manifest: margs,
            bundles,
            variant,
            n_counterfactuals,
            c_other_labels,
            template,
            out,
        } => {
            let t = Timing::start("features");
            let m = manifest(&margs)?;
            let e = embedder(backend, &out)?;
            let b = if variant.uses_llm() {
                load_dataset_bundles(&bundles, &m.dataset_id)?
            } else {
                Vec::new()
            };
            let cfg = FeatureConfig {
                n_counterfactuals,
                c_other_labels: c_other_labels.unwrap_or(n_counterfactuals),
                seed,
                variant,
                label_template: template,
            };
            let rows = compute_features(&m, &b, &e, &cfg)?;
            let path = feature_file_path(&out, &m.dataset_id);
            write_feature_file(&path, &rows)?;
            e.flush()?;
            println!(
                "{}: {} rows x {} features -> {}",
                m.dataset_id,
                rows.len(),
                rows.first().map_or(0, |r| r.width()),
                path.display()
            );
            t.finish(Some(rows.len()));
        }
        Command::Zeroshot {
            manifest: margs,
            template,
            out,
        } => {
            let t = Timing::start("zeroshot");
            let m = manifest(&margs)?;
            let e = embedder(backend, &out)?;
            let report = zero_shot_accuracy(&m, &e, &template)?;
            let path = report.save(&out)?;
            e.flush()?;
            println!(
                "{}: accuracy {:.4} ({}/{}) -> {}",
                report.dataset_id,
                report.accuracy,
                report.n_correct,
                report.n_test,
                path.display()
            );
            t.finish(Some(m.class_labels.len()));
        }
        Command::Train {
            features,
            reports,
            variant,
            mode,
            lambda_grid,
            out,
        } => {
            let t = Timing::start("train");
            let sets = load_feature_sets(&inputs(&features, FEATURES_SUFFIX)?)?;
            let targets = load_targets(&inputs(&reports, REPORT_SUFFIX)?)?;
            let (model, selection) = train_model(&sets, &targets, variant, mode, &grid(lambda_grid))?;
            model.save(&out).map_err(Failure::from)?;
            let cv = selection
                .scores
                .iter()
                .find(|(l, _)| *l == selection.lambda)
                .map_or(f64::NAN, |(_, s)| *s);
            println!(
                "trained {variant} model ({mode}) on {} datasets: lambda {} (LOO RMSE {cv:.4}) -> {}",
                model.training_datasets.len(),
                model.lambda,
                out.display()
            );
            t.finish(Some(sets.values().map(Vec::len).sum()));
        }
        Command::Predict { model, features, out } => {
            let t = Timing::start("predict");
            let model = RegressionModel::load(&model)?;
            let sets = load_feature_sets(&inputs(&features, FEATURES_SUFFIX)?)?;
            let preds = predict_sets(&model, &sets)?;
            println!("dataset_id\tpredicted_accuracy");
            for p in &preds {
                save_prediction(p, &out)?;
                println!("{}\t{:.4}", p.dataset_id, p.predicted_accuracy);
            }
            t.finish(Some(sets.values().map(Vec::len).sum()));
        }
        Command::Metrics {
            values,
            units,
            predictions,
            reports,
            percent,
            out,
        } => {
            let t = Timing::start("metrics");
            let pairs: EvalPairs = match values {
                Some(path) => load_values(&path, units)?,
                None if predictions.is_empty() => {
                    return Err(Failure::config("give either --values or --predictions with --reports"))
                }
                None => {
                    let preds = inputs(&predictions, PREDICTION_SUFFIX)?
                        .iter()
                        .map(|p| load_prediction(p))
                        .collect::<Result<Vec<_>, _>>()?;
                    let targets = load_targets(&inputs(&reports, REPORT_SUFFIX)?)?;
                    pair_with_targets(&preds, &targets)?
                }
            };
            let pairs = if percent { pairs.to_units(Units::Percent) } else { pairs };
            let s = summarize(&pairs)?;
            println!("n\tpearson_r\trmse\tunits");
            println!("{}\t{}\t{:.4}\t{}", s.n, fmt_r(s.pearson_r), s.rmse, s.units);
            if let Some(dir) = out {
                write_json(
                    &dir.join("metrics.json"),
                    &serde_json::json!({
                        "schema_version": SCHEMA_VERSION,
                        "units": s.units,
                        "n": s.n,
                        "pearson_r": s.pearson_r,
                        "rmse": s.rmse,
                        "pairs": pairs.pairs,
                    }),
                )?;
            }
            t.finish(None);
        }
        Command::Ablate {
            features,
            reports,
            holdout,
            mode,
            lambda_grid,
            percent,
            out,
        } => {
            let t = Timing::start("ablate");
            let sets = load_feature_sets(&inputs(&features, FEATURES_SUFFIX)?)?;
            let targets = load_targets(&inputs(&reports, REPORT_SUFFIX)?)?;
            let holdout = match holdout {
                Some(h) => h,
                None => {
                    let ids: Vec<String> = sets.keys().cloned().collect();
                    choose_holdout(&ids, 0.3, seed)?
                }
            };
            let units = if percent { Units::Percent } else { Units::Fraction };
            let report = ablate(&sets, &targets, &holdout, mode, &grid(lambda_grid), units)?;
            let mut doc = serde_json::json!({ "schema_version": SCHEMA_VERSION });
            if let serde_json::Value::Object(fields) = serde_json::to_value(&report).expect("report serializes") {
                doc.as_object_mut().expect("object").extend(fields);
            }
            write_json(&out.join("ablation.json"), &doc)?;
            println!("held out: {}", report.holdout_datasets.join(", "));
            println!("variant\tpearson_r\trmse ({units})");
            for r in &report.rows {
                println!("{}\t{}\t{:.6}", r.variant, fmt_r(r.pearson_r), r.rmse);
            }
            t.finish(Some(sets.values().map(Vec::len).sum()));
        }
        Command::Synth { spec, out } => {
            let t = Timing::start("synth");
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|source| PipelineError::Io { path: path.clone(), source })?;
                    serde_json::from_str(&text)
                        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
                }
                None => CorpusSpec {
                    seed,
                    ..CorpusSpec::default()
                },
            };
            let corpus = generate_corpus(&spec, &out)?;
            println!("dataset_id\timage_noise_sigma\tmanifest\tmock_spec");
            for d in &corpus.datasets {
                println!(
                    "{}\t{}\t{}\t{}",
                    d.dataset_id,
                    d.image_noise_sigma,
                    out.join(&d.manifest).display(),
                    out.join(&d.mock_spec).display()
                );
            }
            t.finish(Some(corpus.datasets.iter().map(|d| d.class_labels.len()).sum()));
        }
    }
    Ok(())
}
