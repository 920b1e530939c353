//! Versioned prompt templates and strict parsing of the replies.
//!
//! Both templates end with an `INPUT: {json}` line restating the variables.
//! The offline stub endpoint answers from that line alone.

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CAPTION_TEMPLATE_ID: &str = "pc-v1";
pub const COUNTERFACTUAL_TEMPLATE_ID: &str = "cf-v1";

/// Provenance tag stored in bundles: both template ids.
pub fn bundle_template_id() -> String {
    format!("{CAPTION_TEMPLATE_ID}+{COUNTERFACTUAL_TEMPLATE_ID}")
}

pub const MAX_CAPTION_WORDS: usize = 60;
pub const MIN_CAPTION_TOKENS: usize = 3;

const CAPTION_SYSTEM: &str = "You write concise, factual captions for photographs.";

const CAPTION_USER: &str = "\
The attached photograph is an example of the class \"{label}\".
Write one caption describing what is visible: the main subject, its appearance and the setting.
Use a single paragraph of at most 60 words.
Reply with a JSON object of the form {\"caption\": \"...\"} and nothing else.";

const COUNTERFACTUAL_SYSTEM: &str =
    "You write counterfactual image captions that are plausible but wrong, for probing image-text models.";

const COUNTERFACTUAL_USER: &str = "\
This caption describes a photograph of the class \"{label}\":
\"{caption}\"
Write {n} counterfactual captions. Each must keep the style, length and sentence structure of the caption above, \
but describe a different, visually confusable concept instead of \"{label}\".
Prefer these other classes from the same dataset: {others}.{relax}
Every caption must be wrong for this photograph, must not mention \"{label}\" and must differ from every other caption.
Reply with a JSON object of the form {\"counterfactuals\": [\"...\"]} holding exactly {n} strings and nothing else.";

const RELAX_CLAUSE: &str = "\nThere are fewer candidate classes than captions requested, \
so you may also describe visually similar concepts that are not in this list.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task")]
pub enum StubInput {
    #[serde(rename = "pc-v1")]
    Caption { class_label: String },
    #[serde(rename = "cf-v1")]
    Counterfactuals {
        class_label: String,
        other_labels: Vec<String>,
        n: usize,
    },
}

fn input_line(input: &StubInput) -> String {
    format!("INPUT: {}", serde_json::to_string(input).expect("serializable"))
}

pub(crate) fn find_stub_input(prompt: &str) -> Option<StubInput> {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("INPUT: "))
        .and_then(|json| serde_json::from_str(json).ok())
}

/// (system, user) text for the plausible-caption request.
pub fn caption_prompt(label: &str) -> (String, String) {
    let user = CAPTION_USER.replace("{label}", label);
    let input = StubInput::Caption {
        class_label: label.to_string(),
    };
    (CAPTION_SYSTEM.to_string(), format!("{user}\n{}", input_line(&input)))
}

/// (system, user) text for the counterfactual request.
pub fn counterfactual_prompt(caption: &str, label: &str, others: &[String], n: usize) -> (String, String) {
    let quoted: Vec<String> = others.iter().map(|o| format!("\"{o}\"")).collect();
    let others_text = if quoted.is_empty() {
        "(none)".to_string()
    } else {
        quoted.join(", ")
    };
    let distinct = others.iter().collect::<std::collections::BTreeSet<_>>().len();
    let relax = if distinct < n { RELAX_CLAUSE } else { "" };
    let user = COUNTERFACTUAL_USER
        .replace("{label}", label)
        .replace("{caption}", caption)
        .replace("{others}", &others_text)
        .replace("{relax}", relax)
        .replace("{n}", &n.to_string());
    let input = StubInput::Counterfactuals {
        class_label: label.to_string(),
        other_labels: others.to_vec(),
        n,
    };
    (COUNTERFACTUAL_SYSTEM.to_string(), format!("{user}\n{}", input_line(&input)))
}

/// Outcome of parsing one reply.
#[derive(Debug, Clone, PartialEq)]
pub enum Parsed<T> {
    Ok(T),
    Refused(String),
    Invalid(String),
}

fn parse_object(raw: &str) -> Result<serde_json::Map<String, Value>, String> {
    let mut body = raw.trim();
    // tolerate a markdown code fence around the JSON
    if let Some(rest) = body.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        body = rest.strip_suffix("```").unwrap_or(rest).trim();
    }
    match serde_json::from_str::<Value>(body) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err("reply is not a JSON object".into()),
        Err(e) => Err(format!("reply is not JSON: {e}")),
    }
}

fn refusal(map: &serde_json::Map<String, Value>) -> Option<String> {
    map.get("refusal").and_then(Value::as_str).map(str::to_string)
}

/// Lowercased, whitespace-collapsed form used for equality checks.
pub fn normalized(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn check_caption(text: &str) -> Result<(), String> {
    let t = text.trim();
    if t.is_empty() {
        return Err("empty caption".into());
    }
    if t.contains("\n\n") || t.contains("\r\n\r\n") {
        return Err("caption spans several paragraphs".into());
    }
    let words = t.split_whitespace().count();
    if words < MIN_CAPTION_TOKENS {
        return Err(format!("caption has {words} words, need at least {MIN_CAPTION_TOKENS}"));
    }
    if words > MAX_CAPTION_WORDS {
        return Err(format!("caption has {words} words, limit is {MAX_CAPTION_WORDS}"));
    }
    Ok(())
}

pub fn parse_caption_reply(raw: &str) -> Parsed<String> {
    let map = match parse_object(raw) {
        Ok(m) => m,
        Err(e) => return Parsed::Invalid(e),
    };
    if let Some(r) = refusal(&map) {
        return Parsed::Refused(r);
    }
    let Some(caption) = map.get("caption").and_then(Value::as_str) else {
        return Parsed::Invalid("missing string field \"caption\"".into());
    };
    match check_caption(caption) {
        Ok(()) => Parsed::Ok(caption.trim().to_string()),
        Err(e) => Parsed::Invalid(e),
    }
}

pub fn parse_counterfactual_reply(raw: &str, caption: &str, n: usize) -> Parsed<Vec<String>> {
    let map = match parse_object(raw) {
        Ok(m) => m,
        Err(e) => return Parsed::Invalid(e),
    };
    if let Some(r) = refusal(&map) {
        return Parsed::Refused(r);
    }
    let Some(items) = map.get("counterfactuals").and_then(Value::as_array) else {
        return Parsed::Invalid("missing array field \"counterfactuals\"".into());
    };
    if items.len() != n {
        return Parsed::Invalid(format!("expected {n} counterfactuals, got {}", items.len()));
    }
    let anchor = normalized(caption);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    for (i, item) in items.iter().enumerate() {
        let Some(text) = item.as_str().map(str::trim) else {
            return Parsed::Invalid(format!("counterfactual {i} is not a string"));
        };
        if text.is_empty() {
            return Parsed::Invalid(format!("counterfactual {i} is empty"));
        }
        let norm = normalized(text);
        if norm == anchor {
            return Parsed::Invalid(format!("counterfactual {i} repeats the plausible caption"));
        }
        if !seen.insert(norm) {
            return Parsed::Invalid(format!("counterfactual {i} duplicates an earlier one"));
        }
        out.push(text.to_string());
    }
    Parsed::Ok(out)
}
