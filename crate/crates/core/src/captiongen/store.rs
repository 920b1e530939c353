//! One JSON file per class at `{dir}/{dataset_id}/{class_label}.json`.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::{CaptionBundle, CaptionError};
use crate::SCHEMA_VERSION;

#[derive(Serialize)]
struct BundleFile<'a> {
    schema_version: u32,
    #[serde(flatten)]
    bundle: &'a CaptionBundle,
}

/// Escapes characters that cannot appear in a single path component.
/// Ordinary labels map to themselves.
pub fn path_component(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for (i, c) in name.chars().enumerate() {
        let escape = matches!(c, '/' | '\\' | '%' | ':' | '\0') || c.is_control() || (i == 0 && c == '.');
        if escape {
            let mut buf = [0u8; 4];
            for b in c.encode_utf8(&mut buf).bytes() {
                out.push_str(&format!("%{b:02X}"));
            }
        } else {
            out.push(c);
        }
    }
    out
}

pub fn bundle_path(dir: &Path, dataset_id: &str, class_label: &str) -> PathBuf {
    dir.join(path_component(dataset_id))
        .join(format!("{}.json", path_component(class_label)))
}

pub fn to_json(bundle: &CaptionBundle) -> String {
    let mut s = serde_json::to_string_pretty(&BundleFile {
        schema_version: SCHEMA_VERSION,
        bundle,
    })
    .expect("bundle serializes");
    s.push('\n');
    s
}

pub fn store_bundle(bundle: &CaptionBundle, dir: &Path) -> Result<PathBuf, CaptionError> {
    let path = bundle_path(dir, &bundle.dataset_id, &bundle.class_label);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CaptionError::io(parent, e))?;
    }
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, to_json(bundle)).map_err(|e| CaptionError::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| CaptionError::io(&path, e))?;
    Ok(path)
}

pub fn store_bundles(bundles: &[CaptionBundle], dir: &Path) -> Result<(), CaptionError> {
    for b in bundles {
        store_bundle(b, dir)?;
    }
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<CaptionBundle, CaptionError> {
    let text = std::fs::read_to_string(path).map_err(|e| CaptionError::io(path, e))?;
    parse_bundle(&text, path)
}

pub(crate) fn parse_bundle(text: &str, path: &Path) -> Result<CaptionBundle, CaptionError> {
    let parse_err = |message: String| CaptionError::Parse {
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
        Some(v) => {
            return Err(CaptionError::SchemaVersionMismatch {
                path: path.to_path_buf(),
                found: v,
            })
        }
        None => return Err(parse_err("field `schema_version` is not an integer".into())),
    }
    let bundle: CaptionBundle = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
    bundle.validate().map_err(parse_err)?;
    Ok(bundle)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CaptionError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CaptionError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Bundles of one dataset, in file-name order.
pub fn load_dataset_bundles(dir: &Path, dataset_id: &str) -> Result<Vec<CaptionBundle>, CaptionError> {
    let sub = dir.join(path_component(dataset_id));
    sorted_entries(&sub)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .map(|p| load_bundle(&p))
        .collect()
}

/// Every bundle under `dir`, grouped by dataset directory.
pub fn load_bundles(dir: &Path) -> Result<Vec<CaptionBundle>, CaptionError> {
    let mut all = Vec::new();
    for sub in sorted_entries(dir)? {
        if !sub.is_dir() {
            continue;
        }
        for p in sorted_entries(&sub)? {
            if p.extension().is_some_and(|e| e == "json") {
                all.push(load_bundle(&p)?);
            }
        }
    }
    Ok(all)
}
