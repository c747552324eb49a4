//! Word/punctuation tokenizer and the closed vocabulary shared by every model.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rustc_hash::FxBuildHasher;
use serde::{Deserialize, Serialize};

type Map<K, V> = hashbrown::HashMap<K, V, FxBuildHasher>;

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

const RESERVED: [&str; 3] = ["<unk>", "<s>", "</s>"];

/// One token of surface text with its byte span in the source string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub span: Range<usize>,
}

/// Splits text into lowercased tokens: maximal alphanumeric runs, and every
/// other non-whitespace character as a token of its own.
pub fn tokens(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if word_start.is_none() {
                word_start = Some(i);
            }
            continue;
        }
        if let Some(start) = word_start.take() {
            out.push(make_token(text, start..i));
        }
        if !ch.is_whitespace() {
            out.push(make_token(text, i..i + ch.len_utf8()));
        }
    }
    if let Some(start) = word_start {
        out.push(make_token(text, start..text.len()));
    }
    out
}

fn make_token(text: &str, span: Range<usize>) -> Token {
    let mut lowered = String::new();
    for ch in text[span.clone()].chars() {
        lowered.extend(ch.to_lowercase());
    }
    Token { text: lowered, span }
}

/// Number of tokens in `text`, without sentinels.
pub fn token_count(text: &str) -> usize {
    tokens(text).len()
}

/// A token id sequence framed by `BOS` and `EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    /// Wraps raw ids, adding the sentinels.
    pub fn from_ids(ids: impl IntoIterator<Item = TokenId>) -> Self {
        let mut v = Vec::new();
        v.push(BOS);
        v.extend(ids);
        v.push(EOS);
        TokenSeq(v)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false: a sequence carries at least its two sentinels.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of predicted positions (everything after `BOS`).
    pub fn predicted(&self) -> usize {
        self.0.len() - 1
    }

    /// True when the sequence holds no tokens besides the sentinels.
    pub fn is_sentinel_only(&self) -> bool {
        self.0.len() <= 2
    }
}

/// Closed vocabulary. Ids 0..3 are reserved for `<unk>`, `<s>` and `</s>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: Map<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from texts; ids follow first appearance.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self::from(Vec::new());
        for text in texts {
            for tok in tokens(text) {
                vocab.insert(tok.text);
            }
        }
        vocab
    }

    fn insert(&mut self, word: String) -> TokenId {
        if let Some(&id) = self.index.get(&word) {
            return id;
        }
        let id = self.words.len() as TokenId;
        self.index.insert(word.clone(), id);
        self.words.push(word);
        id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Words in id order, reserved entries included.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Tokenizes and maps to ids; out-of-vocabulary words become `UNK`.
    pub fn encode(&self, text: &str) -> TokenSeq {
        TokenSeq::from_ids(tokens(text).into_iter().map(|t| self.id(&t.text)))
    }

    /// Stable FNV-1a digest of the word list.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for w in &self.words {
            h.write(w.as_bytes());
            h.write(&[0xff]);
        }
        h.finish()
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let mut vocab = Vocabulary {
            words: Vec::new(),
            index: Map::default(),
        };
        for r in RESERVED {
            vocab.insert(String::from(r));
        }
        for w in words {
            vocab.insert(w);
        }
        vocab
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words.into_iter().skip(RESERVED.len()).collect()
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn texts(s: &str) -> Vec<String> {
        tokens(s).into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(texts("A b."), vec!["a", "b", "."]);
        assert_eq!(texts("don't stop!!"), vec!["don", "'", "t", "stop", "!", "!"]);
    }

    #[test]
    fn sentinels_frame_every_sequence() {
        let vocab = Vocabulary::build(["a b"]);
        let seq = vocab.encode("A b.");
        let a = vocab.id("a");
        let b = vocab.id("b");
        assert_eq!(seq.ids(), &[BOS, a, b, UNK, EOS]);
        assert_eq!(vocab.encode("").ids(), &[BOS, EOS]);
    }

    #[test]
    fn spans_point_into_source() {
        let src = "Héllo, wörld";
        let toks = tokens(src);
        assert_eq!(&src[toks[0].span.clone()], "Héllo");
        assert_eq!(&src[toks[1].span.clone()], ",");
        assert_eq!(&src[toks[2].span.clone()], "wörld");
    }

    #[test]
    fn vocabulary_roundtrips_through_word_list() {
        let vocab = Vocabulary::build(["x y z", "z w"]);
        let words: Vec<String> = vocab.clone().into();
        assert_eq!(words, vec!["x", "y", "z", "w"]);
        let back = Vocabulary::from(words);
        assert_eq!(back, vocab);
        assert_eq!(back.fingerprint(), vocab.fingerprint());
    }
}
