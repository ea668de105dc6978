//! Prompt and sentence-pair fixtures.
//!
//! All files are UTF-8, one record per line, fields separated by tabs.
//! Lines starting with `#` and blank lines are skipped. The bundled sets are
//! compiled in; any of them can be replaced by a file of the same shape.

use std::path::Path;

use tmlp_core::tokenizer::BpeVocab;

use crate::error::{Error, Result};

pub const KNOWLEDGE_TABLE: &str = include_str!("../data/knowledge_table.tsv");
pub const KNOWLEDGE_EXTENSION: &str = include_str!("../data/knowledge_extension.tsv");
pub const KN_PROMPTS: &str = include_str!("../data/kn_prompts.tsv");
pub const TRANSPLANT_PAIRS: &str = include_str!("../data/transplant_pairs.tsv");
pub const PROGRESSIVE_PROMPTS: &str = include_str!("../data/progressive_prompts.tsv");
pub const GARDEN_PATH_PAIRS: &str = include_str!("../data/garden_path_pairs.tsv");

/// Tab-separated records with at least `min` and at most `max` fields.
fn records(text: &str, min: usize, max: usize, what: &str) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
        if fields.len() < min || fields.len() > max {
            return Err(Error::Format(format!("{what} line {}: {} fields, expected {min} to {max}", i + 1, fields.len())));
        }
        out.push(fields);
    }
    Ok(out)
}

/// Bundled text, or the file at `path` when given.
pub fn source(path: Option<&Path>, bundled: &'static str) -> Result<String> {
    match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e)),
        None => Ok(bundled.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactPrompt {
    pub prompt: String,
    /// Surface form of the expected next token, leading space included.
    pub target: String,
    pub category: String,
}

pub fn parse_fact_prompts(text: &str) -> Result<Vec<FactPrompt>> {
    records(text, 2, 3, "prompt file").map(|rs| {
        rs.into_iter()
            .map(|mut f| FactPrompt {
                category: if f.len() > 2 { f.pop().unwrap() } else { String::new() },
                target: f.pop().unwrap(),
                prompt: f.pop().unwrap(),
            })
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransplantPair {
    pub source: String,
    pub destination: String,
    pub source_fact: String,
    pub destination_fact: String,
}

pub fn parse_transplant_pairs(text: &str) -> Result<Vec<TransplantPair>> {
    records(text, 4, 4, "transplant file").map(|rs| {
        rs.into_iter()
            .map(|f| TransplantPair {
                source: f[0].clone(),
                destination: f[1].clone(),
                source_fact: f[2].clone(),
                destination_fact: f[3].clone(),
            })
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GardenPathPair {
    pub intransitive_verb: String,
    pub transitive_verb: String,
    /// Disambiguating word, without leading space.
    pub disambiguation: String,
    pub intransitive_sentence: String,
    pub transitive_sentence: String,
}

/// A located disambiguation token.
#[derive(Clone, Debug, PartialEq)]
pub struct Located {
    pub tokens: Vec<u32>,
    /// Index of the first BPE piece of the disambiguating word.
    pub position: usize,
}

fn word_at(s: &str, word: &str, from: usize) -> Option<usize> {
    let mut start = from;
    while let Some(off) = s[start..].find(word) {
        let i = start + off;
        let before = s[..i].chars().next_back();
        let after = s[i + word.len()..].chars().next();
        if before.is_none_or(|c| !c.is_alphanumeric()) && after.is_none_or(|c| !c.is_alphanumeric()) {
            return Some(i);
        }
        start = i + word.len();
    }
    None
}

impl GardenPathPair {
    /// The two sentences must differ exactly in the verb, and the
    /// disambiguating word must follow the verb and its object phrase.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("garden-path pair {}/{}: {m}", self.intransitive_verb, self.transitive_verb)));
        let Some(vi) = word_at(&self.intransitive_sentence, &self.intransitive_verb, 0) else {
            return bad(format!("verb not found in {:?}", self.intransitive_sentence));
        };
        let swapped = format!(
            "{}{}{}",
            &self.intransitive_sentence[..vi],
            self.transitive_verb,
            &self.intransitive_sentence[vi + self.intransitive_verb.len()..]
        );
        if swapped != self.transitive_sentence {
            return bad("sentences differ in more than the verb".into());
        }
        for (s, v) in [(&self.intransitive_sentence, &self.intransitive_verb), (&self.transitive_sentence, &self.transitive_verb)] {
            let after_verb = word_at(s, v, 0).expect("verb present") + v.len();
            match word_at(s, &self.disambiguation, after_verb) {
                Some(d) if s[after_verb..d].split_whitespace().count() >= 1 => {}
                _ => return bad(format!("disambiguation {:?} not found after the object in {s:?}", self.disambiguation)),
            }
        }
        Ok(())
    }

    /// Tokens of one sentence and the position of the disambiguating word.
    pub fn locate(&self, transitive: bool, vocab: &BpeVocab) -> Result<Located> {
        let (s, v) = if transitive {
            (&self.transitive_sentence, &self.transitive_verb)
        } else {
            (&self.intransitive_sentence, &self.intransitive_verb)
        };
        let not_found = || Error::Format(format!("disambiguation {:?} not found in {s:?}", self.disambiguation));
        let after_verb = word_at(s, v, 0).ok_or_else(not_found)? + v.len();
        let d = word_at(s, &self.disambiguation, after_verb).ok_or_else(not_found)?;
        let start = if s[..d].ends_with(' ') { d - 1 } else { d };
        let tokens = vocab.encode(s);
        let prefix = vocab.encode(&s[..start]);
        if !tokens.starts_with(&prefix) || prefix.len() >= tokens.len() {
            return Err(not_found());
        }
        let piece = vocab.token_bytes(tokens[prefix.len()])?;
        if !s.as_bytes()[start..].starts_with(piece) {
            return Err(not_found());
        }
        Ok(Located { tokens, position: prefix.len() })
    }
}

pub fn parse_garden_path_pairs(text: &str) -> Result<Vec<GardenPathPair>> {
    let pairs: Vec<GardenPathPair> = records(text, 5, 5, "garden-path file")?
        .into_iter()
        .map(|f| GardenPathPair {
            intransitive_verb: f[0].clone(),
            transitive_verb: f[1].clone(),
            disambiguation: f[2].clone(),
            intransitive_sentence: f[3].clone(),
            transitive_sentence: f[4].clone(),
        })
        .collect();
    for p in &pairs {
        p.validate()?;
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_sets_parse() {
        assert_eq!(parse_fact_prompts(KNOWLEDGE_TABLE).unwrap().len(), 10);
        assert_eq!(parse_fact_prompts(KNOWLEDGE_EXTENSION).unwrap().len(), 150);
        assert_eq!(parse_fact_prompts(KN_PROMPTS).unwrap().len(), 20);
        assert_eq!(parse_fact_prompts(PROGRESSIVE_PROMPTS).unwrap().len(), 12);
        assert_eq!(parse_transplant_pairs(TRANSPLANT_PAIRS).unwrap().len(), 5);
        let gp = parse_garden_path_pairs(GARDEN_PATH_PAIRS).unwrap();
        assert_eq!(gp.len(), 15);
        assert_eq!(gp[0].intransitive_sentence, "After the dog struggled the vet took off the muzzle.");
    }

    #[test]
    fn garden_path_validation() {
        let mut p = parse_garden_path_pairs(GARDEN_PATH_PAIRS).unwrap()[0].clone();
        p.transitive_sentence = "After the cat scratched the vet took off the muzzle.".into();
        assert!(p.validate().is_err());
        let mut q = parse_garden_path_pairs(GARDEN_PATH_PAIRS).unwrap()[0].clone();
        q.disambiguation = "gave".into();
        assert!(q.validate().is_err());
        assert_eq!(word_at("in the inn in", "in", 1), Some(11));
    }
}
