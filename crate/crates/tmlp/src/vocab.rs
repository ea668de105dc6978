//! `vocab.json` / `merges.txt` in the published GPT-2 format.

use std::collections::HashMap;
use std::path::Path;

use tmlp_core::tokenizer::{BpeVocab, GPT2_VOCAB_SIZE};

use crate::error::{Error, Result};

/// Merge rules from `merges.txt` text: one `left right` pair per line, rank
/// by line order. A leading `#version` line and blank lines are skipped.
pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || (lineno == 0 && line.starts_with("#version")) {
            continue;
        }
        let (l, r) = line
            .split_once(' ')
            .filter(|(l, r)| !l.is_empty() && !r.is_empty() && !r.contains(' '))
            .ok_or_else(|| Error::Format(format!("merges line {}: expected two symbols, got {line:?}", lineno + 1)))?;
        out.push((l.to_string(), r.to_string()));
    }
    Ok(out)
}

pub fn vocab_from_strings(vocab_json: &str, merges_txt: &str) -> Result<BpeVocab> {
    let map: HashMap<String, u32> =
        serde_json::from_str(vocab_json).map_err(|e| Error::Format(format!("vocab.json: {e}")))?;
    let mut entries: Vec<(String, u32)> = map.into_iter().collect();
    entries.sort_by_key(|(_, id)| *id);
    Ok(BpeVocab::from_parts(entries, parse_merges(merges_txt)?)?)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads and checks a full GPT-2 vocabulary.
pub fn load_vocab(vocab_path: &Path, merges_path: &Path) -> Result<BpeVocab> {
    let vocab = vocab_from_strings(&read(vocab_path)?, &read(merges_path)?)?;
    if vocab.len() != GPT2_VOCAB_SIZE {
        return Err(Error::Format(format!(
            "{}: {} tokens, expected {GPT2_VOCAB_SIZE}",
            vocab_path.display(),
            vocab.len()
        )));
    }
    log::info!("vocabulary: {} tokens, {} merges", vocab.len(), vocab.merge_count());
    Ok(vocab)
}
