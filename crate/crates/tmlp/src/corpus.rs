//! Corpus ingestion: UTF-8 text to fixed-length token windows.
//!
//! Text is read line by line and tokenized in chunks. A chunk is cut only
//! where a whitespace character follows a non-whitespace one; every GPT-2
//! pre-token boundary survives such a cut, so the result equals tokenizing
//! the whole file at once.

use std::io::BufRead;
use std::path::Path;

use tmlp_core::tokenizer::BpeVocab;

use crate::error::{Error, Result};

const CHUNK_BYTES: usize = 1 << 16;

/// Byte offset of the last safe cut in `s`, if any.
fn last_cut(s: &str) -> Option<usize> {
    let mut prev_ws = true;
    let mut cut = None;
    for (i, c) in s.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws {
            cut = Some(i);
        }
        prev_ws = ws;
    }
    cut.filter(|&i| i > 0)
}

/// Tokenizes text from `reader` until at least `needed` tokens are
/// available or the input ends.
pub fn tokenize_reader<R: BufRead>(mut reader: R, vocab: &BpeVocab, needed: usize, name: &str) -> Result<Vec<u32>> {
    let mut tokens = Vec::new();
    let mut pending = String::new();
    let mut line = Vec::new();
    let mut lineno = 0usize;
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line).map_err(|e| Error::io(name, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        let text = std::str::from_utf8(&line)
            .map_err(|e| Error::Format(format!("{name}: line {lineno}: invalid UTF-8 at byte {}", e.valid_up_to())))?;
        pending.push_str(text);
        if pending.len() >= CHUNK_BYTES {
            if let Some(cut) = last_cut(&pending) {
                tokens.extend(vocab.encode(&pending[..cut]));
                pending.drain(..cut);
                if tokens.len() >= needed {
                    return Ok(tokens);
                }
            }
        }
    }
    tokens.extend(vocab.encode(&pending));
    Ok(tokens)
}

/// Splits a token stream into `count` consecutive windows of `length`,
/// starting at offset 0.
pub fn windows(tokens: &[u32], count: usize, length: usize) -> Result<Vec<Vec<u32>>> {
    let needed = count * length;
    if tokens.len() < needed {
        return Err(Error::Format(format!(
            "corpus has {} tokens, {count} sequences of {length} need {needed}",
            tokens.len()
        )));
    }
    Ok(tokens[..needed].chunks_exact(length.max(1)).map(<[u32]>::to_vec).collect())
}

pub fn ingest_corpus(path: &Path, vocab: &BpeVocab, count: usize, length: usize) -> Result<Vec<Vec<u32>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let tokens = tokenize_reader(std::io::BufReader::new(file), vocab, count * length, &path.display().to_string())?;
    let seqs = windows(&tokens, count, length)?;
    log::info!("corpus {}: {} sequences of {} tokens", path.display(), seqs.len(), length);
    Ok(seqs)
}
