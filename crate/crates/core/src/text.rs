//! Vocabulary handling and offset-preserving tokenization.
//!
//! CJK ideographs become one token each. Maximal runs of ASCII-style
//! letters and digits are split by greedy longest match against the
//! vocabulary. Everything else is a single-character token. Whitespace is a
//! hard boundary and never appears inside an offset span.
//!
//! All offsets are measured in Unicode scalar values (chars), not bytes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Identifier of a base vocabulary term.
pub type TermId = u32;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

const SPECIALS: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("duplicate token {token:?} on line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("empty token on line {line}")]
    EmptyToken { line: usize },
    #[error("vocabulary is empty")]
    EmptyVocab,
    #[error("i/o error reading vocabulary: {0}")]
    Io(#[from] std::io::Error),
}

/// Term vocabulary with dense ids `0..len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TermId>,
    pad: TermId,
    unk: TermId,
    cls: TermId,
    sep: TermId,
    max_piece_chars: usize,
}

impl Vocab {
    /// Builds a vocabulary from tokens in id order. Missing special tokens
    /// are appended after the given tokens.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list: Vec<String> = Vec::new();
        let mut ids = HashMap::new();
        for (line, token) in tokens.into_iter().enumerate() {
            let token = token.into();
            if token.is_empty() {
                return Err(TextError::EmptyToken { line: line + 1 });
            }
            if ids.contains_key(&token) {
                return Err(TextError::DuplicateToken { token, line: line + 1 });
            }
            ids.insert(token.clone(), list.len() as TermId);
            list.push(token);
        }
        if list.is_empty() {
            return Err(TextError::EmptyVocab);
        }
        for special in SPECIALS {
            if !ids.contains_key(special) {
                ids.insert(special.to_string(), list.len() as TermId);
                list.push(special.to_string());
            }
        }
        let max_piece_chars = list
            .iter()
            .filter(|t| !SPECIALS.contains(&t.as_str()))
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Self {
            pad: ids[PAD_TOKEN],
            unk: ids[UNK_TOKEN],
            cls: ids[CLS_TOKEN],
            sep: ids[SEP_TOKEN],
            tokens: list,
            ids,
            max_piece_chars,
        })
    }

    /// Parses a vocabulary file: UTF-8, one token per line, line index = id.
    pub fn parse(contents: &str) -> Result<Self, TextError> {
        let lines: Vec<&str> = contents.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
        Self::from_tokens(lines)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TermId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TermId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> TermId {
        self.pad
    }

    pub fn unk_id(&self) -> TermId {
        self.unk
    }

    pub fn cls_id(&self) -> TermId {
        self.cls
    }

    pub fn sep_id(&self) -> TermId {
        self.sep
    }

    pub fn is_special(&self, id: TermId) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep
    }

    /// FNV-1a hash over the token list, used to tie artifacts to a vocabulary.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::hash::Fnv1a::new();
        for t in &self.tokens {
            h.write(t.as_bytes());
            h.write(b"\n");
        }
        h.finish()
    }
}

/// Loads a vocabulary file. Line number is the term id; special tokens are
/// appended when absent.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab, TextError> {
    Vocab::load(path)
}

/// Character span `[start, end)` in the original text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Offset {
    pub start: usize,
    pub end: usize,
}

impl Offset {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// A tokenized input framed as `[CLS] x [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub token_ids: Vec<TermId>,
    /// `None` for `[CLS]`/`[SEP]` and padding.
    pub offsets: Vec<Option<Offset>>,
    pub attention_mask: Vec<u8>,
    pub original_text: String,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Count of tokens with mask 1 (specials included).
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Number of real tokens, i.e. excluding `[CLS]`, `[SEP]` and padding.
    pub fn real_len(&self) -> usize {
        self.active_len().saturating_sub(2)
    }

    /// Positions (in the framed sequence) of the real tokens.
    pub fn real_positions(&self) -> std::ops::Range<usize> {
        1..1 + self.real_len()
    }

    pub fn real_ids(&self) -> &[TermId] {
        &self.token_ids[self.real_positions()]
    }

    pub fn real_offsets(&self) -> Vec<Offset> {
        self.offsets[self.real_positions()]
            .iter()
            .map(|o| o.expect("real tokens carry offsets"))
            .collect()
    }

    /// Original-text surface of a real token at framed position `pos`.
    pub fn surface(&self, pos: usize) -> String {
        match self.offsets.get(pos).copied().flatten() {
            Some(o) => self.original_text.chars().skip(o.start).take(o.len()).collect(),
            None => String::new(),
        }
    }

    /// Right-pads with `[PAD]` to `len` positions (mask 0).
    pub fn padded(&self, len: usize, pad_id: TermId) -> TokenizedText {
        let mut out = self.clone();
        while out.token_ids.len() < len {
            out.token_ids.push(pad_id);
            out.offsets.push(None);
            out.attention_mask.push(0);
        }
        out
    }
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x3134F
        | 0xF900..=0xFAFF
        | 0x2F800..=0x2FA1F)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() && !is_cjk(c)
}

/// Tokenizes `text` into at most `max_len` tokens including `[CLS]`/`[SEP]`.
///
/// `max_len` below 2 is treated as 2.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenizedText {
    let budget = max_len.max(2) - 2;
    let chars: Vec<char> = text.chars().collect();
    let mut pieces: Vec<(TermId, Offset)> = Vec::new();

    let mut i = 0;
    while i < chars.len() && pieces.len() < budget {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if is_word_char(c) {
            let mut run_end = i;
            while run_end < chars.len() && is_word_char(chars[run_end]) {
                run_end += 1;
            }
            while i < run_end && pieces.len() < budget {
                let (id, len) = longest_match(&chars[i..run_end], vocab);
                pieces.push((id, Offset::new(i, i + len)));
                i += len;
            }
        } else {
            let id = vocab.id(&c.to_string()).unwrap_or(vocab.unk_id());
            pieces.push((id, Offset::new(i, i + 1)));
            i += 1;
        }
    }

    let n = pieces.len() + 2;
    let mut token_ids = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    token_ids.push(vocab.cls_id());
    offsets.push(None);
    for (id, off) in pieces {
        token_ids.push(id);
        offsets.push(Some(off));
    }
    token_ids.push(vocab.sep_id());
    offsets.push(None);
    TokenizedText {
        attention_mask: vec![1; token_ids.len()],
        token_ids,
        offsets,
        original_text: text.to_string(),
    }
}

/// Greedy longest vocabulary match at the start of `run`; a single `[UNK]`
/// char when nothing matches.
fn longest_match(run: &[char], vocab: &Vocab) -> (TermId, usize) {
    let longest = run.len().min(vocab.max_piece_chars);
    let mut piece = String::new();
    for len in (1..=longest).rev() {
        piece.clear();
        piece.extend(&run[..len]);
        if let Some(id) = vocab.id(&piece) {
            return (id, len);
        }
    }
    (vocab.unk_id(), 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(tokens: &[&str]) -> Vocab {
        Vocab::from_tokens(tokens.iter().copied()).unwrap()
    }

    #[test]
    fn specials_are_appended() {
        let v = Vocab::parse("a\nb\n").unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(0));
        assert_eq!(v.id("b"), Some(1));
        assert!(v.id(CLS_TOKEN).is_some());
    }

    #[test]
    fn duplicate_token_rejected() {
        match Vocab::parse("a\nb\na\n") {
            Err(TextError::DuplicateToken { token, line }) => {
                assert_eq!(token, "a");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_vocab_rejected() {
        assert!(matches!(Vocab::parse(""), Err(TextError::EmptyVocab)));
    }

    #[test]
    fn bert_sized_vocab_keeps_line_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let mut lines: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut c = 0x4E00u32;
        while lines.len() < 21128 {
            lines.push(char::from_u32(c).unwrap().to_string());
            c += 1;
        }
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        let expected = fs::read_to_string(&path).unwrap().lines().count();
        let v = load_vocab(&path).unwrap();
        assert_eq!(expected, 21128);
        assert_eq!(v.len(), expected);
    }

    #[test]
    fn empty_text_is_cls_sep() {
        let v = vocab(&["a"]);
        let t = tokenize("", &v, 8);
        assert_eq!(t.token_ids, vec![v.cls_id(), v.sep_id()]);
        assert_eq!(t.attention_mask, vec![1, 1]);
        assert_eq!(t.real_len(), 0);
    }

    #[test]
    fn cjk_per_character() {
        let v = vocab(&["你", "好"]);
        let t = tokenize("你好", &v, 8);
        assert_eq!(t.len(), 4);
        assert_eq!(t.real_offsets(), vec![Offset::new(0, 1), Offset::new(1, 2)]);
        assert_eq!(t.real_ids(), &[0, 1]);
    }

    #[test]
    fn latin_greedy_longest_match() {
        let v = vocab(&["ab", "c"]);
        let t = tokenize("abc", &v, 8);
        assert_eq!(t.token_ids, vec![v.cls_id(), 0, 1, v.sep_id()]);
        assert_eq!(t.real_offsets(), vec![Offset::new(0, 2), Offset::new(2, 3)]);
    }

    #[test]
    fn unknown_char_keeps_true_offset() {
        let v = vocab(&["a"]);
        let t = tokenize("a 你a", &v, 8);
        assert_eq!(t.real_ids(), &[0, v.unk_id(), 0]);
        assert_eq!(
            t.real_offsets(),
            vec![Offset::new(0, 1), Offset::new(2, 3), Offset::new(3, 4)]
        );
    }

    #[test]
    fn truncation_keeps_sep_last() {
        let v = vocab(&["一", "二", "三"]);
        let t = tokenize("一二三一二三", &v, 4);
        assert_eq!(t.len(), 4);
        assert_eq!(*t.token_ids.last().unwrap(), v.sep_id());
        assert_eq!(t.real_ids(), &[0, 1]);
    }

    proptest! {
        #[test]
        fn offsets_cover_non_whitespace(text in "[a-c一二 ,x]{0,24}", max_len in 2usize..40) {
            let v = vocab(&["a", "ab", "bc", "一", "二"]);
            let t = tokenize(&text, &v, max_len);
            prop_assert!(t.len() <= max_len);
            prop_assert_eq!(t.token_ids[0], v.cls_id());
            prop_assert_eq!(*t.token_ids.last().unwrap(), v.sep_id());
            prop_assert_eq!(t.len(), t.offsets.len());
            prop_assert_eq!(t.len(), t.attention_mask.len());
            let offs = t.real_offsets();
            for w in offs.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
            for o in &offs {
                prop_assert!(o.end > o.start);
            }
            let chars: Vec<char> = text.chars().collect();
            let covered: String = offs.iter().flat_map(|o| chars[o.start..o.end].iter()).collect();
            let expected: String = chars.iter().filter(|c| !c.is_whitespace()).collect();
            if t.len() < max_len {
                prop_assert_eq!(covered, expected);
            } else {
                prop_assert!(expected.starts_with(&covered));
            }
            prop_assert_eq!(&t, &tokenize(&text, &v, max_len));
        }
    }
}
