//! Byte-level BPE encoder/decoder compatible with GPT-2 vocabularies.
//!
//! The pre-tokenizer is a hand-rolled scanner equivalent to the published
//! GPT-2 pattern `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`;
//! a golden fixture pins its behavior against a reference implementation.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Loaded GPT-2-style vocabulary: token table, merge ranks and the
/// byte→printable-codepoint table. Immutable after load.
#[derive(Debug)]
pub struct BpeVocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<Option<String>>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
}

/// The GPT-2 byte→codepoint convention: printable latin-1 bytes map to
/// themselves, everything else to 256+n in first-free order.
fn build_byte_map() -> ([char; 256], HashMap<char, u8>) {
    let mut byte_to_char = ['\0'; 256];
    let printable = (0x21u16..=0x7e)
        .chain(0xa1..=0xac)
        .chain(0xae..=0xff)
        .collect::<Vec<_>>();
    let mut next = 0u32;
    for b in 0..256u16 {
        let c = if printable.contains(&b) {
            char::from_u32(u32::from(b)).unwrap()
        } else {
            let c = char::from_u32(256 + next).unwrap();
            next += 1;
            c
        };
        byte_to_char[b as usize] = c;
    }
    let mut char_to_byte = HashMap::with_capacity(256);
    for (b, &c) in byte_to_char.iter().enumerate() {
        char_to_byte.insert(c, b as u8);
    }
    (byte_to_char, char_to_byte)
}

/// Load `vocab.json` (token → id) and `merges.txt` (ranked merge pairs).
///
/// Validates that ids are injective, merge pairs are unique, every byte
/// token and merge output exists in the vocabulary, and every vocabulary
/// token consists only of byte-mapped codepoints — together these make
/// `encode` total.
pub fn load_vocab(vocab_path: &Path, merges_path: &Path) -> Result<BpeVocab> {
    let vocab_text = std::fs::read_to_string(vocab_path)?;
    let raw: HashMap<String, u32> =
        serde_json::from_str(&vocab_text).map_err(|e| Error::Parse {
            path: vocab_path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;

    let max_id = raw.values().copied().max().unwrap_or(0) as usize;
    let mut id_to_token: Vec<Option<String>> = vec![None; max_id + 1];
    let mut token_to_id = HashMap::with_capacity(raw.len());
    for (tok, id) in raw {
        if let Some(prev) = &id_to_token[id as usize] {
            return Err(Error::Parse {
                path: vocab_path.display().to_string(),
                line: 0,
                message: format!("id {id} assigned to both \"{prev}\" and \"{tok}\""),
            });
        }
        id_to_token[id as usize] = Some(tok.clone());
        token_to_id.insert(tok, TokenId(id));
    }

    let merges_text = std::fs::read_to_string(merges_path)?;
    let mut merge_ranks = HashMap::new();
    let mut rank = 0usize;
    // First line is a version comment by convention.
    for (lineno, line) in merges_text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let (left, right) = match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => (l, r),
            _ => {
                return Err(Error::Parse {
                    path: merges_path.display().to_string(),
                    line: lineno + 1,
                    message: format!("expected \"left right\", got {line:?}"),
                })
            }
        };
        let key = (left.to_string(), right.to_string());
        if merge_ranks.contains_key(&key) {
            return Err(Error::Parse {
                path: merges_path.display().to_string(),
                line: lineno + 1,
                message: format!("duplicate merge pair {left:?} {right:?}"),
            });
        }
        merge_ranks.insert(key, rank);
        rank += 1;
    }

    let (byte_to_char, char_to_byte) = build_byte_map();

    for (b, c) in byte_to_char.iter().enumerate() {
        if !token_to_id.contains_key(&c.to_string()) {
            return Err(Error::Parse {
                path: vocab_path.display().to_string(),
                line: 0,
                message: format!("vocabulary lacks the byte token for 0x{b:02x} ({c:?})"),
            });
        }
    }
    for ((l, r), rank) in &merge_ranks {
        let merged = format!("{l}{r}");
        if !token_to_id.contains_key(&merged) {
            return Err(Error::Parse {
                path: merges_path.display().to_string(),
                line: rank + 2,
                message: format!("merge output {merged:?} missing from vocabulary"),
            });
        }
    }
    for tok in token_to_id.keys() {
        if let Some(bad) = tok.chars().find(|c| !char_to_byte.contains_key(c)) {
            return Err(Error::Parse {
                path: vocab_path.display().to_string(),
                line: 0,
                message: format!("token {tok:?} contains unmapped codepoint {bad:?}"),
            });
        }
    }

    Ok(BpeVocab {
        token_to_id,
        id_to_token,
        merge_ranks,
        byte_to_char,
        char_to_byte,
    })
}

impl BpeVocab {
    /// Vocabulary size (max id + 1).
    pub fn n_vocab(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token_of(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id.index()).and_then(|t| t.as_deref())
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    /// Byte-level BPE encoding: pre-tokenize, map bytes to codepoints,
    /// then apply lowest-rank merges greedily. Total on all UTF-8 input.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for piece in pretokenize(text) {
            self.bpe_piece(piece, &mut out);
        }
        out
    }

    fn bpe_piece(&self, piece: &str, out: &mut Vec<TokenId>) {
        let mut symbols: Vec<String> = piece
            .bytes()
            .map(|b| self.byte_to_char[b as usize].to_string())
            .collect();
        if symbols.is_empty() {
            return;
        }
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..symbols.len().saturating_sub(1) {
                let key = (symbols[i].clone(), symbols[i + 1].clone());
                if let Some(&rank) = self.merge_ranks.get(&key) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((_, pos)) = best else { break };
            // Merge every adjacent occurrence of the winning pair, left to right.
            let l = symbols[pos].clone();
            let r = symbols[pos + 1].clone();
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == l && symbols[i + 1] == r {
                    merged.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        for sym in symbols {
            let id = self
                .token_to_id
                .get(&sym)
                .copied()
                .expect("load_vocab validated byte and merge coverage");
            out.push(id);
        }
    }

    /// Inverse of `encode`; invalid UTF-8 byte sequences become U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token_of(id).ok_or(Error::TokenRange {
                id: id.0,
                n_vocab: self.n_vocab(),
            })?;
            for c in tok.chars() {
                bytes.push(
                    *self
                        .char_to_byte
                        .get(&c)
                        .expect("load_vocab validated token codepoints"),
                );
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// The id of `text` iff it encodes to exactly one token.
    ///
    /// Targets and distractors are stored as exact strings, leading
    /// whitespace included; nothing is normalized before encoding.
    pub fn single_token_id(&self, text: &str) -> Result<TokenId> {
        if text.is_empty() {
            return Err(Error::Param("single_token_id on empty string".into()));
        }
        let ids = self.encode(text);
        if ids.len() == 1 {
            Ok(ids[0])
        } else {
            Err(Error::MultiTokenTarget {
                text: text.to_string(),
                pieces: ids.len(),
            })
        }
    }
}

/// Split text the way the GPT-2 pattern does. Returns borrowed spans.
///
/// Alternatives are tried in the published order: contraction suffixes,
/// optional-space + letters, optional-space + digits, optional-space +
/// other non-space, whitespace-not-before-nonspace, whitespace.
pub fn pretokenize(text: &str) -> Vec<&str> {
    const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];
    let mut pieces = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(**c)) {
            pieces.push(&text[i..i + c.len()]);
            i += c.len();
            continue;
        }
        let first = rest.chars().next().unwrap();
        let body_start = if first == ' ' { i + 1 } else { i };
        let class_match = text[body_start..].chars().next().and_then(|head| {
            let class: fn(char) -> bool = if head.is_alphabetic() {
                |c| c.is_alphabetic()
            } else if head.is_numeric() {
                |c| c.is_numeric()
            } else if !head.is_whitespace() {
                |c| !c.is_whitespace() && !c.is_alphabetic() && !c.is_numeric()
            } else {
                return None;
            };
            let mut end = body_start;
            for ch in text[body_start..].chars() {
                if class(ch) {
                    end += ch.len_utf8();
                } else {
                    break;
                }
            }
            Some(end)
        });
        if let Some(end) = class_match {
            pieces.push(&text[i..end]);
            i = end;
            continue;
        }
        // Whitespace run (first must be whitespace here, possibly a lone
        // space followed by more whitespace).
        debug_assert!(first.is_whitespace());
        let mut end = i;
        let mut last_len = 0;
        for ch in rest.chars() {
            if ch.is_whitespace() {
                last_len = ch.len_utf8();
                end += last_len;
            } else {
                break;
            }
        }
        if end < bytes.len() && end - last_len > i {
            // `\s+(?!\S)`: leave the final whitespace char for the next piece.
            pieces.push(&text[i..end - last_len]);
            i = end - last_len;
        } else {
            pieces.push(&text[i..end]);
            i = end;
        }
    }
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_fixture(
        dir: &Path,
        vocab: &str,
        merges: &str,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let vp = dir.join("vocab.json");
        let mp = dir.join("merges.txt");
        std::fs::File::create(&vp)
            .unwrap()
            .write_all(vocab.as_bytes())
            .unwrap();
        std::fs::File::create(&mp)
            .unwrap()
            .write_all(merges.as_bytes())
            .unwrap();
        (vp, mp)
    }

    fn fixture_vocab() -> BpeVocab {
        let vp = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/vocab.json"));
        let mp = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/merges.txt"));
        load_vocab(vp, mp).expect("fixture vocab loads")
    }

    // Byte-only vocab (all 256 byte tokens, dense ids) for isolated tests.
    fn byte_vocab_json() -> String {
        let (b2c, _) = build_byte_map();
        let map: HashMap<String, u32> = b2c
            .iter()
            .enumerate()
            .map(|(b, c)| (c.to_string(), b as u32))
            .collect();
        serde_json::to_string(&map).unwrap()
    }

    #[test]
    fn pretokenize_pins() {
        assert_eq!(pretokenize("hello world"), vec!["hello", " world"]);
        assert_eq!(pretokenize("I'll go"), vec!["I", "'ll", " go"]);
        assert_eq!(pretokenize("a  b"), vec!["a", " ", " b"]);
        assert_eq!(pretokenize("x12y"), vec!["x", "12", "y"]);
        assert_eq!(pretokenize("hi!!"), vec!["hi", "!!"]);
        assert_eq!(pretokenize("tail   "), vec!["tail", "   "]);
        assert_eq!(pretokenize("\n\nnew"), vec!["\n", "\n", "new"]);
        assert_eq!(pretokenize(" lead"), vec![" lead"]);
        assert_eq!(pretokenize(""), Vec::<&str>::new());
    }

    #[test]
    fn empty_merges_splits_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (vp, mp) = write_fixture(dir.path(), &byte_vocab_json(), "#version: test\n");
        let v = load_vocab(&vp, &mp).unwrap();
        let ids = v.encode("ab");
        assert_eq!(ids.len(), 2);
        assert_eq!(v.decode(&ids).unwrap(), "ab");
    }

    #[test]
    fn duplicate_merge_pair_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (b2c, _) = build_byte_map();
        let mut map: HashMap<String, u32> = b2c
            .iter()
            .enumerate()
            .map(|(b, c)| (c.to_string(), b as u32))
            .collect();
        map.insert("ab".into(), 256);
        let vocab = serde_json::to_string(&map).unwrap();
        let (vp, mp) = write_fixture(dir.path(), &vocab, "#version: test\na b\na b\n");
        match load_vocab(&vp, &mp) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_merge_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let (vp, mp) = write_fixture(dir.path(), &byte_vocab_json(), "#v\na b c\n");
        match load_vocab(&vp, &mp) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn encode_empty_is_empty() {
        let v = fixture_vocab();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn ascii_round_trip() {
        let v = fixture_vocab();
        for s in [
            "The theory held.",
            "Gary scared Anna because he was violent.",
            "  spaced   out  ",
            "don't stop",
            "A1 B2 C3 -- punct!?",
        ] {
            assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn single_token_targets() {
        let v = fixture_vocab();
        assert!(v.single_token_id(" A").is_ok());
        assert!(v.single_token_id(" B").is_ok());
        assert!(v.single_token_id(" he").is_ok());
        assert!(v.single_token_id(" she").is_ok());
        match v.single_token_id("spiky") {
            Err(Error::MultiTokenTarget { text, pieces }) => {
                assert_eq!(text, "spiky");
                assert!(pieces > 1);
            }
            other => panic!("expected MultiTokenTarget, got {other:?}"),
        }
        assert!(matches!(v.single_token_id(""), Err(Error::Param(_))));
    }

    #[test]
    fn decode_out_of_range() {
        let v = fixture_vocab();
        let bad = TokenId(v.n_vocab() as u32 + 7);
        assert!(matches!(v.decode(&[bad]), Err(Error::TokenRange { .. })));
    }

    #[test]
    fn encode_is_deterministic() {
        let v = fixture_vocab();
        let s = "Although Pelcrad was sick, the others went on.";
        assert_eq!(v.encode(s), v.encode(s));
    }
}
