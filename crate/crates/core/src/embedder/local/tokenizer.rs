//! CLIP byte-level BPE tokenizer over `vocab.json` and `merges.txt`.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

use crate::embedder::EmbedError;

pub const CONTEXT_LENGTH: usize = 77;
const SOT: &str = "<|startoftext|>";
const EOT: &str = "<|endoftext|>";
const WORD_END: &str = "</w>";

/// Printable stand-in for every byte, as in GPT-2/CLIP byte-level BPE.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("valid code point")
        };
    }
    table
}

pub struct ClipTokenizer {
    encoder: HashMap<String, i64>,
    ranks: HashMap<(String, String), usize>,
    byte_chars: [char; 256],
    pattern: Regex,
    sot: i64,
    eot: i64,
}

impl ClipTokenizer {
    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self, EmbedError> {
        let vocab_text = std::fs::read_to_string(vocab).map_err(|e| EmbedError::io(vocab, e))?;
        let merges_text = std::fs::read_to_string(merges).map_err(|e| EmbedError::io(merges, e))?;
        let encoder: HashMap<String, i64> = serde_json::from_str(&vocab_text)
            .map_err(|e| EmbedError::Config(format!("{}: {e}", vocab.display())))?;
        Self::new(encoder, &merges_text)
    }

    pub fn new(encoder: HashMap<String, i64>, merges: &str) -> Result<Self, EmbedError> {
        let mut ranks = HashMap::new();
        for (n, line) in merges.lines().enumerate() {
            if line.is_empty() || (n == 0 && line.starts_with("#version")) {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| EmbedError::Config(format!("merges line {}: expected two symbols", n + 1)))?;
            let rank = ranks.len();
            ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
        }
        let special = |t: &str| {
            encoder
                .get(t)
                .copied()
                .ok_or_else(|| EmbedError::Config(format!("vocabulary lacks {t}")))
        };
        let sot = special(SOT)?;
        let eot = special(EOT)?;
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");
        Ok(Self {
            encoder,
            ranks,
            byte_chars: bytes_to_unicode(),
            pattern,
            sot,
            eot,
        })
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(String::from).collect();
        if let Some(last) = parts.last_mut() {
            last.push_str(WORD_END);
        }
        loop {
            let best = parts
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w[0].clone(), w[1].clone())))
                .min_by_key(|(r, _, _)| *r);
            let Some((_, a, b)) = best else { break };
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == a && parts[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
        }
        parts
    }

    /// Token ids without start/end markers.
    pub fn encode(&self, text: &str) -> Result<Vec<i64>, EmbedError> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let piece = m.as_str();
            if piece == SOT || piece == EOT {
                ids.push(if piece == SOT { self.sot } else { self.eot });
                continue;
            }
            let mapped: String = piece.bytes().map(|b| self.byte_chars[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                let id = self
                    .encoder
                    .get(&sym)
                    .ok_or_else(|| EmbedError::Tokenization(format!("symbol {sym:?} of {piece:?} is not in the vocabulary")))?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    /// `[sot, ..., eot, 0, ...]` of length [`CONTEXT_LENGTH`]; long inputs
    /// are truncated so that the end token is always present.
    pub fn tokenize(&self, text: &str) -> Result<Vec<i64>, EmbedError> {
        let body = self.encode(text)?;
        let keep = body.len().min(CONTEXT_LENGTH - 2);
        let mut out = Vec::with_capacity(CONTEXT_LENGTH);
        out.push(self.sot);
        out.extend_from_slice(&body[..keep]);
        out.push(self.eot);
        out.resize(CONTEXT_LENGTH, 0);
        Ok(out)
    }
}
