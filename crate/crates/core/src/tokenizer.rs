//! Byte-level BPE tokenizer compatible with the published GPT-2 vocabulary.
//!
//! Loads the standard `vocab.json` (token string → id) and `merges.txt`
//! (header line, then one space-separated merge per line, highest priority
//! first). Text is split with the GPT-2 pre-tokenization pattern, each piece
//! is mapped byte-wise onto printable code points, and merges are applied in
//! rank order.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

pub const END_OF_TEXT: &str = "<|endoftext|>";
pub const BOS_ID: u32 = 50256;
pub const MAX_CONTEXT: usize = 1024;

const PRETOKENIZE: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Token ids plus the text they were encoded from.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
    /// Whether `ids[0]` is a prepended beginning-of-sequence token that is not
    /// part of `text`.
    pub has_bos: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids that correspond to `text`, i.e. without the BOS token.
    pub fn text_ids(&self) -> &[u32] {
        if self.has_bos {
            &self.ids[1..]
        } else {
            &self.ids
        }
    }
}

pub struct Tokenizer {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merge_ranks: HashMap<(String, String), u32>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
    pattern: Regex,
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tokenizer")
            .field("vocab_size", &self.id_to_token.len())
            .field("merges", &self.merge_ranks.len())
            .finish()
    }
}

/// The reversible byte → printable-character table used by GPT-2.
fn byte_alphabet() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut assigned = [false; 256];
    for b in (b'!'..=b'~').chain(0xA1..=0xAC).chain(0xAE..=0xFF) {
        table[b as usize] = char::from_u32(b as u32).unwrap();
        assigned[b as usize] = true;
    }
    let mut next = 0u32;
    for b in 0..256usize {
        if !assigned[b] {
            table[b] = char::from_u32(256 + next).unwrap();
            next += 1;
        }
    }
    table
}

impl Tokenizer {
    /// Loads `vocab.json` and `merges.txt` from the given paths.
    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab = std::fs::read_to_string(vocab_path).map_err(|e| Error::Load {
            path: vocab_path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let merges = std::fs::read_to_string(merges_path).map_err(|e| Error::Load {
            path: merges_path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_strs(&vocab, &merges)
    }

    /// Loads `vocab.json` and `merges.txt` from one directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        Self::from_files(&dir.join("vocab.json"), &dir.join("merges.txt"))
    }

    /// The GPT-2 vocabulary and merges shipped with the crate.
    #[cfg(feature = "bundled-vocab")]
    pub fn gpt2() -> Self {
        Self::from_strs(
            include_str!("../../../assets/gpt2/vocab.json"),
            include_str!("../../../assets/gpt2/merges.txt"),
        )
        .expect("bundled GPT-2 vocabulary")
    }

    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let token_to_id: HashMap<String, u32> = serde_json::from_str(vocab_json)
            .map_err(|e| Error::Format(format!("vocab.json: {e}")))?;
        let n = token_to_id.len();
        let mut id_to_token = vec![None; n];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::Vocab(format!("id {id} outside dense range 0..{n}")))?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::Vocab(format!("id {id} assigned twice")));
            }
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();

        let mut merge_ranks = HashMap::new();
        for (lineno, line) in merges_txt.lines().enumerate() {
            if (lineno == 0 && line.starts_with("#version")) || line.is_empty() {
                continue;
            }
            let (left, right) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("merges.txt line {}: `{line}`", lineno + 1)))?;
            let rank = merge_ranks.len() as u32;
            merge_ranks.entry((left.to_owned(), right.to_owned())).or_insert(rank);
        }

        let byte_to_char = byte_alphabet();
        let char_to_byte = byte_to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Ok(Self {
            token_to_id,
            id_to_token,
            merge_ranks,
            byte_to_char,
            char_to_byte,
            pattern: Regex::new(PRETOKENIZE).expect("static pattern"),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Encodes `text`, optionally prepending the `<|endoftext|>` id.
    ///
    /// Special-token strings inside `text` are encoded as ordinary text.
    pub fn encode(&self, text: &str, prepend_bos: bool) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        if prepend_bos {
            ids.push(BOS_ID);
        }
        ids.extend(self.encode_ordinary(text)?);
        if ids.len() > MAX_CONTEXT {
            return Err(Error::ContextLength {
                len: ids.len(),
                max: MAX_CONTEXT,
            });
        }
        Ok(TokenSequence {
            ids,
            text: text.to_owned(),
            has_bos: prepend_bos,
        })
    }

    fn encode_ordinary(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for piece in self.pattern.find_iter(text) {
            let piece = piece.map_err(|e| Error::Vocab(format!("pre-tokenizer: {e}")))?;
            let mapped: String = piece.as_str().bytes().map(|b| self.byte_to_char[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                let id = self
                    .token_to_id
                    .get(&sym)
                    .ok_or_else(|| Error::Vocab(format!("no id for merged symbol `{sym}`")))?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((_, first)) = best else { break };
            let (left, right) = (symbols[first].clone(), symbols[first + 1].clone());
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Raw bytes of a token sequence.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .id_to_token
                .get(id as usize)
                .ok_or_else(|| Error::Vocab(format!("token id {id} out of range 0..{}", self.vocab_size())))?;
            for ch in tok.chars() {
                let b = self
                    .char_to_byte
                    .get(&ch)
                    .ok_or_else(|| Error::Vocab(format!("token {id} contains unmapped char {ch:?}")))?;
                bytes.push(*b);
            }
        }
        Ok(bytes)
    }

    /// Decodes ids to text. Byte sequences that are not valid UTF-8 (a single
    /// token holding part of a multi-byte character) become U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Display strings for each id, one per position.
    pub fn token_strings(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.decode(&[id])).collect()
    }

    /// True iff `" " + word` encodes to exactly one token.
    pub fn is_single_token(&self, word: &str) -> bool {
        if word.is_empty() {
            return false;
        }
        self.encode_ordinary(&format!(" {word}"))
            .map(|ids| ids.len() == 1)
            .unwrap_or(false)
    }

    /// Id of the single token `" " + word`, if there is one.
    pub fn single_token_id(&self, word: &str) -> Option<u32> {
        if word.is_empty() {
            return None;
        }
        match self.encode_ordinary(&format!(" {word}")).ok()?.as_slice() {
            [id] => Some(*id),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        // bytes 'a','b' map to themselves, the space byte maps to U+0120
        let vocab = r#"{"a":0,"b":1,"ab":2,"Ġ":3,"Ġa":4,"Ġab":5,"<|endoftext|>":6}"#;
        let merges = "#version: 0.2\nĠ a\na b\nĠa b\n";
        Tokenizer::from_strs(vocab, merges).unwrap()
    }

    #[test]
    fn byte_alphabet_is_a_bijection() {
        let table = byte_alphabet();
        let mut seen: Vec<char> = table.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(table[b' ' as usize], 'Ġ');
        assert_eq!(table[b'A' as usize], 'A');
    }

    #[test]
    fn toy_merges_apply_in_rank_order() {
        let t = toy();
        assert_eq!(t.encode("ab ab", false).unwrap().ids, vec![2, 5]);
        assert_eq!(t.encode("ba", false).unwrap().ids, vec![1, 0]);
        assert_eq!(t.decode(&[2, 5]).unwrap(), "ab ab");
    }

    #[test]
    fn empty_text_with_bos() {
        let t = toy();
        let seq = t.encode("", true).unwrap();
        assert_eq!(seq.ids, vec![BOS_ID]);
        assert!(seq.text_ids().is_empty());
        assert_eq!(t.decode(&[]).unwrap(), "");
    }

    #[test]
    fn out_of_range_id_is_a_vocab_error() {
        assert!(matches!(toy().decode(&[99]), Err(Error::Vocab(_))));
    }

    #[test]
    fn context_length_is_enforced() {
        let t = toy();
        let long = "a ".repeat(MAX_CONTEXT);
        assert!(matches!(t.encode(&long, false), Err(Error::ContextLength { .. })));
    }

    #[test]
    fn single_token_checks() {
        let t = toy();
        assert!(t.is_single_token("ab"));
        assert!(!t.is_single_token("b"));
        assert!(!t.is_single_token(""));
    }

    #[test]
    fn sparse_vocab_is_rejected() {
        let err = Tokenizer::from_strs(r#"{"a":0,"b":5}"#, "").unwrap_err();
        assert!(matches!(err, Error::Vocab(_)));
    }
}
