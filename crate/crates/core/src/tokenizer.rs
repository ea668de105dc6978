//! GPT-2 byte-level byte-pair encoding.
//!
//! Text is first split by the GPT-2 pre-tokenizer, whose published pattern is
//!
//! ```text
//! 's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
//! ```
//!
//! The alternatives are tried left to right at each position, exactly as a
//! backtracking regex engine would. `\s` is the Unicode `White_Space`
//! property, `\p{L}` / `\p{N}` are the letter and number general-category
//! groups, and the optional leading space is U+0020 only. `\s+(?!\S)` takes a
//! whitespace run but leaves its last character for the following word when
//! the run is followed by a non-space character.
//!
//! Each piece is mapped byte by byte to the initial symbols and merged
//! greedily: the adjacent pair with the lowest merge rank is merged until no
//! ranked pair remains.

use alloc::string::String;
use alloc::vec::Vec;

use hashbrown::HashMap;
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

use crate::error::{Error, Result};

/// Number of entries in the published GPT-2 vocabulary.
pub const GPT2_VOCAB_SIZE: usize = 50257;

/// Id of `<|endoftext|>` in the GPT-2 vocabulary.
pub const END_OF_TEXT: u32 = 50256;

/// GPT-2's reversible byte → printable code point table.
pub fn byte_encoder() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut assigned = [false; 256];
    let printable = (b'!'..=b'~').chain(0xA1u8..=0xAC).chain(0xAEu8..=0xFF);
    for b in printable {
        table[b as usize] = char::from(b);
        assigned[b as usize] = true;
    }
    let mut next = 256u32;
    for b in 0..256usize {
        if !assigned[b] {
            table[b] = char::from_u32(next).expect("valid code point");
            next += 1;
        }
    }
    table
}

/// Vocabulary and merge table.
#[derive(Clone, Debug)]
pub struct BpeVocab {
    id_to_bytes: Vec<Vec<u8>>,
    bytes_to_id: HashMap<Vec<u8>, u32>,
    byte_ids: [u32; 256],
    /// (left, right) → (rank, merged id)
    merges: HashMap<(u32, u32), (u32, u32)>,
    merge_count: usize,
    byte_encoder: [char; 256],
}

impl BpeVocab {
    /// Builds a vocabulary from the `vocab.json` map (byte-encoded token string
    /// → id) and the ordered merge list (rank = position).
    pub fn from_parts<V, M>(vocab: V, merges: M) -> Result<Self>
    where
        V: IntoIterator<Item = (String, u32)>,
        M: IntoIterator<Item = (String, String)>,
    {
        let encoder = byte_encoder();
        let mut decoder: HashMap<char, u8> = HashMap::with_capacity(256);
        for (b, c) in encoder.iter().enumerate() {
            decoder.insert(*c, b as u8);
        }
        let decode_symbol = |s: &str| -> Result<Vec<u8>> {
            s.chars()
                .map(|c| {
                    decoder
                        .get(&c)
                        .copied()
                        .ok_or_else(|| Error::Vocab(alloc::format!("character {c:?} is not byte-encoded")))
                })
                .collect()
        };

        let mut entries: Vec<(Vec<u8>, u32)> = Vec::new();
        for (token, id) in vocab {
            // Special tokens are stored verbatim rather than byte-encoded.
            let bytes = match decode_symbol(&token) {
                Ok(b) => b,
                Err(_) if token.starts_with("<|") && token.ends_with("|>") => token.into_bytes(),
                Err(e) => return Err(e),
            };
            entries.push((bytes, id));
        }
        let n = entries.len();
        let mut id_to_bytes: Vec<Option<Vec<u8>>> = alloc::vec![None; n];
        let mut bytes_to_id = HashMap::with_capacity(n);
        for (bytes, id) in entries {
            let slot = id_to_bytes
                .get_mut(id as usize)
                .ok_or_else(|| Error::Vocab(alloc::format!("token id {id} is not below the vocabulary size {n}")))?;
            if slot.is_some() {
                return Err(Error::Vocab(alloc::format!("token id {id} assigned twice")));
            }
            *slot = Some(bytes.clone());
            if bytes_to_id.insert(bytes, id).is_some() {
                return Err(Error::Vocab(alloc::format!("duplicate token bytes for id {id}")));
            }
        }
        let id_to_bytes: Vec<Vec<u8>> = id_to_bytes.into_iter().map(|b| b.expect("every id filled")).collect();

        let mut byte_ids = [0u32; 256];
        for (b, slot) in byte_ids.iter_mut().enumerate() {
            *slot = *bytes_to_id
                .get(&alloc::vec![b as u8])
                .ok_or_else(|| Error::Vocab(alloc::format!("missing single-byte token for byte {b}")))?;
        }

        let mut merge_map = HashMap::new();
        let mut merge_count = 0usize;
        for (rank, (left, right)) in merges.into_iter().enumerate() {
            let l = decode_symbol(&left)?;
            let r = decode_symbol(&right)?;
            let lookup = |b: &Vec<u8>| bytes_to_id.get(b).copied();
            let li = lookup(&l).ok_or_else(|| Error::Vocab(alloc::format!("merge {rank}: unknown left symbol {left:?}")))?;
            let ri = lookup(&r).ok_or_else(|| Error::Vocab(alloc::format!("merge {rank}: unknown right symbol {right:?}")))?;
            let mut joined = l.clone();
            joined.extend_from_slice(&r);
            let mi = lookup(&joined)
                .ok_or_else(|| Error::Vocab(alloc::format!("merge {rank}: merged symbol {left}{right} not in vocabulary")))?;
            if merge_map.insert((li, ri), (rank as u32, mi)).is_some() {
                return Err(Error::Vocab(alloc::format!("merge {rank} duplicates an earlier pair")));
            }
            merge_count += 1;
        }

        Ok(Self { id_to_bytes, bytes_to_id, byte_ids, merges: merge_map, merge_count, byte_encoder: encoder })
    }

    pub fn len(&self) -> usize {
        self.id_to_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_bytes.is_empty()
    }

    pub fn merge_count(&self) -> usize {
        self.merge_count
    }

    pub fn byte_encoder(&self) -> &[char; 256] {
        &self.byte_encoder
    }

    pub fn token_bytes(&self, id: u32) -> Result<&[u8]> {
        self.id_to_bytes
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::TokenOutOfRange { id, vocab: self.len() })
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.bytes_to_id.get(bytes).copied()
    }

    /// Encodes UTF-8 text. Special tokens are not recognised; `<|endoftext|>`
    /// in the input is tokenized as ordinary text.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pretokenize(text) {
            self.encode_piece(piece.as_bytes(), &mut out);
        }
        out
    }

    fn encode_piece(&self, bytes: &[u8], out: &mut Vec<u32>) {
        if let Some(id) = self.bytes_to_id.get(bytes) {
            out.push(*id);
            return;
        }
        let mut symbols: Vec<u32> = bytes.iter().map(|b| self.byte_ids[*b as usize]).collect();
        loop {
            let mut best: Option<(u32, usize, u32)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                if let Some(&(rank, merged)) = self.merges.get(&(symbols[i], symbols[i + 1])) {
                    if best.is_none_or(|(r, _, _)| rank < r) {
                        best = Some((rank, i, merged));
                    }
                }
            }
            match best {
                Some((_, i, merged)) => {
                    symbols[i] = merged;
                    symbols.remove(i + 1);
                }
                None => break,
            }
        }
        out.extend_from_slice(&symbols);
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(out)
    }

    /// Decodes ids to text. Byte sequences that are not valid UTF-8 (a single
    /// id can end mid-character) are replaced with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Encodes `surface` and returns its id if it is exactly one token.
    pub fn single_token(&self, surface: &str) -> Result<u32> {
        let ids = self.encode(surface);
        match ids.as_slice() {
            [id] => Ok(*id),
            _ => Err(Error::Input(alloc::format!("{surface:?} encodes to {} tokens, expected one", ids.len()))),
        }
    }
}

fn is_letter(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Letter
}

fn is_number(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Number
}

fn is_other(c: char) -> bool {
    !c.is_whitespace() && !is_letter(c) && !is_number(c)
}

const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

/// Splits text into pre-tokens following the GPT-2 pattern.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(text.len(), |(b, _)| *b);
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let end = match_at(text, &chars, i);
        pieces.push(&text[byte_at(i)..byte_at(end)]);
        i = end;
    }
    pieces
}

/// Returns the char index one past the match starting at char index `i`.
fn match_at(text: &str, chars: &[(usize, char)], i: usize) -> usize {
    let n = chars.len();
    let c = chars[i].1;

    if c == '\'' {
        let rest = &text[chars[i].0..];
        for contraction in CONTRACTIONS {
            if rest.starts_with(contraction) {
                return i + contraction.chars().count();
            }
        }
    }

    let run = |start: usize, pred: fn(char) -> bool| {
        let mut j = start;
        while j < n && pred(chars[j].1) {
            j += 1;
        }
        j
    };

    for class in [is_letter as fn(char) -> bool, is_number, is_other] {
        let start = if c == ' ' && i + 1 < n && class(chars[i + 1].1) { i + 1 } else { i };
        if class(chars[start].1) {
            return run(start, class);
        }
    }

    // c is whitespace here.
    let end = run(i, char::is_whitespace);
    if end == n {
        return end;
    }
    if end - i > 1 {
        return end - 1;
    }
    end
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Tiny vocabulary over a handful of bytes, enough to exercise merging.
    fn toy_vocab() -> BpeVocab {
        let enc = byte_encoder();
        let mut vocab: Vec<(String, u32)> = (0..256u32).map(|b| (String::from(enc[b as usize]), b)).collect();
        let sym = |s: &str| -> String { s.bytes().map(|b| enc[b as usize]).collect() };
        let merges = vec![("a", "b"), ("ab", "c"), ("a", "a"), (" ", "ab")];
        let mut id = 256;
        let mut merge_list = Vec::new();
        for (l, r) in merges {
            vocab.push((sym(&alloc::format!("{l}{r}")), id));
            id += 1;
            merge_list.push((sym(l), sym(r)));
        }
        BpeVocab::from_parts(vocab, merge_list).unwrap()
    }

    #[test]
    fn byte_encoder_is_a_bijection_with_printable_identity() {
        let enc = byte_encoder();
        assert_eq!(enc[b'A' as usize], 'A');
        assert_eq!(enc[b' ' as usize], 'Ġ');
        assert_eq!(enc[b'\n' as usize], 'Ċ');
        let mut seen: Vec<char> = enc.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
    }

    #[test]
    fn pretokenizer_splits_like_the_gpt2_pattern() {
        assert_eq!(pretokenize("Hello world"), vec!["Hello", " world"]);
        assert_eq!(pretokenize("I'm here"), vec!["I", "'m", " here"]);
        assert_eq!(pretokenize("  a"), vec![" ", " a"]);
        assert_eq!(pretokenize("a  "), vec!["a", "  "]);
        assert_eq!(pretokenize("\t\ta"), vec!["\t", "\t", "a"]);
        assert_eq!(pretokenize("x 123 !?"), vec!["x", " 123", " !?"]);
        assert_eq!(pretokenize("a\n\nb"), vec!["a", "\n", "\n", "b"]);
        assert_eq!(pretokenize(""), Vec::<&str>::new());
        assert_eq!(pretokenize("'sup"), vec!["'s", "up"]);
        assert_eq!(pretokenize("' x"), vec!["'", " x"]);
    }

    #[test]
    fn merges_apply_in_rank_order() {
        let v = toy_vocab();
        // "abc": (a,b) rank 0 first, then (ab,c).
        assert_eq!(v.encode("abc"), vec![257]);
        // "aab": (a,b) outranks (a,a).
        assert_eq!(v.encode("aab"), vec![b'a' as u32, 256]);
        assert_eq!(v.encode("aaa"), vec![258, b'a' as u32]);
        assert_eq!(v.encode(" ab"), vec![259]);
        assert_eq!(v.encode(""), Vec::<u32>::new());
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let v = toy_vocab();
        assert!(matches!(v.decode(&[9999]), Err(Error::TokenOutOfRange { id: 9999, .. })));
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn inconsistent_merges_are_rejected() {
        let enc = byte_encoder();
        let vocab: Vec<(String, u32)> = (0..256u32).map(|b| (String::from(enc[b as usize]), b)).collect();
        let err = BpeVocab::from_parts(vocab, vec![(String::from("a"), String::from("b"))]).unwrap_err();
        assert!(matches!(err, Error::Vocab(_)));
    }

    proptest::proptest! {
        #[test]
        fn round_trip_on_arbitrary_text(s in "\\PC{0,64}") {
            let v = toy_vocab();
            let ids = v.encode(&s);
            proptest::prop_assert_eq!(v.decode(&ids).unwrap(), s.clone());
            let pieces: String = pretokenize(&s).concat();
            proptest::prop_assert_eq!(pieces, s);
        }
    }
}
