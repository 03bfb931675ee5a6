//! Reference word segmentation and BMES labelling.
//!
//! The segmenter is a frequency lexicon plus an ordered list of regular
//! expressions. Its word spans are aligned to tokenizer offsets to produce
//! per-token `S`/`B`/`M`/`E` supervision for the union head.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{tokenize, Offset, TokenizedText, Vocab};

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error("lexicon line {line}: {reason}")]
    BadLexiconLine { line: usize, reason: String },
    #[error("rule on line {line} does not compile: {source}")]
    BadRule {
        line: usize,
        #[source]
        source: Box<fancy_regex::Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-token segmentation class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Bmes {
    S = 0,
    B = 1,
    M = 2,
    E = 3,
}

impl Bmes {
    pub const ALL: [Bmes; 4] = [Bmes::S, Bmes::B, Bmes::M, Bmes::E];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Whether `next` may directly follow `self`.
    pub fn allows(self, next: Bmes) -> bool {
        match self {
            Bmes::B | Bmes::M => matches!(next, Bmes::M | Bmes::E),
            Bmes::E | Bmes::S => matches!(next, Bmes::S | Bmes::B),
        }
    }
}

impl From<Bmes> for u8 {
    fn from(b: Bmes) -> u8 {
        b as u8
    }
}

impl TryFrom<u8> for Bmes {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Bmes::from_index(v as usize).ok_or_else(|| format!("BMES label out of range: {v}"))
    }
}

impl fmt::Display for Bmes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Bmes::S => "S",
            Bmes::B => "B",
            Bmes::M => "M",
            Bmes::E => "E",
        };
        f.write_str(c)
    }
}

/// Labels over the real tokens of one text (specials excluded).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BmesLabels(pub Vec<Bmes>);

impl BmesLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks the transition constraints: starts with S/B, ends with S/E,
    /// and every adjacent pair is allowed.
    pub fn is_valid(&self) -> bool {
        let Some(first) = self.0.first() else {
            return true;
        };
        let last = *self.0.last().unwrap();
        matches!(first, Bmes::S | Bmes::B)
            && matches!(last, Bmes::S | Bmes::E)
            && self.0.windows(2).all(|w| w[0].allows(w[1]))
    }

    pub fn as_indices(&self) -> Vec<u8> {
        self.0.iter().map(|&b| b as u8).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpanSource {
    Lexicon,
    Regex,
    Fallback,
}

/// One segmented word, in character positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegSpan {
    pub start: usize,
    pub end: usize,
    pub source: SpanSource,
}

impl SegSpan {
    pub fn new(start: usize, end: usize, source: SpanSource) -> Self {
        Self { start, end, source }
    }
}

/// Word → frequency dictionary.
#[derive(Debug, Clone)]
pub struct Lexicon {
    words: HashMap<String, u64>,
    max_chars: usize,
}

impl Lexicon {
    pub fn from_entries<I, S>(entries: I) -> Result<Self, SegmentationError>
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let mut words = HashMap::new();
        for (w, f) in entries {
            let w = w.into();
            if !w.is_empty() {
                let slot = words.entry(w).or_insert(0);
                *slot = (*slot).max(f);
            }
        }
        if words.is_empty() {
            return Err(SegmentationError::EmptyLexicon);
        }
        let max_chars = words.keys().map(|w| w.chars().count()).max().unwrap_or(1);
        Ok(Self { words, max_chars })
    }

    /// Parses `word<TAB>frequency` lines. Blank lines and `#` comments are skipped.
    pub fn parse(contents: &str) -> Result<Self, SegmentationError> {
        let mut entries = Vec::new();
        for (i, line) in contents.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, freq) = line.split_once('\t').ok_or_else(|| SegmentationError::BadLexiconLine {
                line: i + 1,
                reason: "expected word<TAB>frequency".into(),
            })?;
            let freq: u64 = freq.trim().parse().map_err(|e| SegmentationError::BadLexiconLine {
                line: i + 1,
                reason: format!("bad frequency: {e}"),
            })?;
            entries.push((word.to_string(), freq));
        }
        Self::from_entries(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SegmentationError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// The desk-scale lexicon bundled with the crate.
    pub fn bundled() -> Self {
        Self::parse(include_str!("../data/lexicon.tsv")).expect("bundled lexicon parses")
    }

    pub fn frequency(&self, word: &str) -> Option<u64> {
        self.words.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains_key(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Ordered regular-expression rules; earlier rules win at the same position.
#[derive(Debug, Clone)]
pub struct RuleSet {
    rules: Vec<Regex>,
}

/// Quantity phrases: a number followed by one measure character.
pub const QUANTITY_RULE: &str = r"(?:[0-9]+(?:\.[0-9]+)?|[零一二两三四五六七八九十百千万]+)[个只条张本件台辆米克斤元块岁年月日天次位名层份项页度吨升]";
/// Mixed letter/digit product models and version identifiers.
pub const PRODUCT_RULE: &str = r"(?:[A-Za-z]+[0-9]|[0-9]+[A-Za-z])[A-Za-z0-9]*(?:[.\-][A-Za-z0-9]+)*";
/// Integers and decimals, optionally a percentage.
pub const NUMBER_RULE: &str = r"[0-9]+(?:\.[0-9]+)?%?";

impl RuleSet {
    pub fn new<I, S>(patterns: I) -> Result<Self, SegmentationError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let rules = patterns
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                Regex::new(p.as_ref()).map_err(|e| SegmentationError::BadRule {
                    line: i + 1,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rules })
    }

    pub fn empty() -> Self {
        Self { rules: Vec::new() }
    }

    /// Quantity phrases, product/version patterns, then plain numbers.
    pub fn default_rules() -> Self {
        Self::new([QUANTITY_RULE, PRODUCT_RULE, NUMBER_RULE]).expect("default rules compile")
    }

    /// One pattern per line, priority = line order. Blank lines are skipped
    /// but still count toward line numbers in errors.
    pub fn parse(contents: &str) -> Result<Self, SegmentationError> {
        let mut rules = Vec::new();
        for (i, line) in contents.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            rules.push(Regex::new(line).map_err(|e| SegmentationError::BadRule {
                line: i + 1,
                source: Box::new(e),
            })?);
        }
        Ok(Self { rules })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SegmentationError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Segments `text` into word spans covering every non-whitespace char.
///
/// Scanning left to right, the first rule (in priority order) with a
/// non-empty match starting at the current position claims it. Text between
/// rule claims is split by greedy longest match against the lexicon;
/// characters with no lexicon entry become single-char fallback spans.
pub fn segment(text: &str, lexicon: &Lexicon, rules: &RuleSet) -> Vec<SegSpan> {
    let byte_at: Vec<usize> = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .collect();
    let chars: Vec<char> = text.chars().collect();
    let char_at_byte = |b: usize| byte_at.partition_point(|&x| x < b);

    // Pending match per rule: (start_byte, end_byte), valid while the scan
    // position has not passed start_byte.
    let mut pending: Vec<Option<(usize, usize)>> = vec![None; rules.rules.len()];
    let mut exhausted = vec![false; rules.rules.len()];
    let mut claims: Vec<(usize, usize)> = Vec::new();
    let mut pos = 0;
    while pos < chars.len() && !rules.rules.is_empty() {
        let pos_byte = byte_at[pos];
        let mut claimed = None;
        for (r, rule) in rules.rules.iter().enumerate() {
            if exhausted[r] {
                continue;
            }
            let stale = pending[r].is_none_or(|(s, _)| s < pos_byte);
            if stale {
                pending[r] = next_match(rule, text, pos_byte);
                if pending[r].is_none() {
                    exhausted[r] = true;
                    continue;
                }
            }
            if let Some((s, e)) = pending[r] {
                if s == pos_byte && e > s {
                    claimed = Some(char_at_byte(e));
                    break;
                }
            }
        }
        match claimed {
            Some(end) => {
                claims.push((pos, end));
                pos = end;
            }
            None => pos += 1,
        }
    }

    let mut spans = Vec::new();
    let mut cursor = 0;
    for &(s, e) in &claims {
        lexicon_fill(&chars, cursor, s, lexicon, &mut spans);
        spans.push(SegSpan::new(s, e, SpanSource::Regex));
        cursor = e;
    }
    lexicon_fill(&chars, cursor, chars.len(), lexicon, &mut spans);
    spans
}

/// Leftmost non-empty match starting at or after `from`.
fn next_match(rule: &Regex, text: &str, mut from: usize) -> Option<(usize, usize)> {
    while from <= text.len() {
        match rule.find_from_pos(text, from) {
            Ok(Some(m)) if m.end() > m.start() => return Some((m.start(), m.end())),
            Ok(Some(m)) => {
                // Empty match: step past it to the next char boundary.
                let next = text[m.start()..].chars().next().map(|c| m.start() + c.len_utf8())?;
                from = next;
            }
            Ok(None) => return None,
            Err(e) => {
                log::warn!("rule evaluation failed: {e}");
                return None;
            }
        }
    }
    None
}

fn lexicon_fill(chars: &[char], from: usize, to: usize, lexicon: &Lexicon, spans: &mut Vec<SegSpan>) {
    let mut i = from;
    let mut buf = String::new();
    while i < to {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let mut run_end = i;
        while run_end < to && !chars[run_end].is_whitespace() {
            run_end += 1;
        }
        let longest = (run_end - i).min(lexicon.max_chars);
        let mut matched = None;
        for len in (1..=longest).rev() {
            buf.clear();
            buf.extend(&chars[i..i + len]);
            if lexicon.contains(&buf) {
                matched = Some(len);
                break;
            }
        }
        match matched {
            Some(len) => {
                spans.push(SegSpan::new(i, i + len, SpanSource::Lexicon));
                i += len;
            }
            None => {
                spans.push(SegSpan::new(i, i + 1, SpanSource::Fallback));
                i += 1;
            }
        }
    }
}

/// Aligns oracle word spans to tokenizer offsets.
///
/// A span covering exactly one whole token gives `S`; a span covering
/// `k >= 2` whole tokens gives `B M.. E`. When any token straddles a span
/// boundary, or the span's characters are not fully covered by tokens (for
/// example after truncation), every token touching that span is labelled `S`.
pub fn align_labels(tok: &TokenizedText, seg: &[SegSpan]) -> BmesLabels {
    let offsets = tok.real_offsets();
    let mut labels = vec![Bmes::S; offsets.len()];
    let chars: Vec<char> = tok.original_text.chars().collect();

    let mut first = 0;
    for span in seg {
        while first < offsets.len() && offsets[first].end <= span.start {
            first += 1;
        }
        let mut members = Vec::new();
        let mut straddles = false;
        let mut covered = 0;
        let mut t = first;
        while t < offsets.len() && offsets[t].start < span.end {
            let o = offsets[t];
            if o.end > span.start {
                members.push(t);
                if o.start < span.start || o.end > span.end {
                    straddles = true;
                } else {
                    covered += o.len();
                }
            }
            t += 1;
        }
        if members.len() < 2 || straddles {
            continue;
        }
        let span_chars = chars
            .get(span.start..span.end.min(chars.len()))
            .map(|cs| cs.iter().filter(|c| !c.is_whitespace()).count())
            .unwrap_or(0);
        if covered != span_chars {
            continue;
        }
        let k = members.len();
        for (j, &m) in members.iter().enumerate() {
            labels[m] = if j == 0 {
                Bmes::B
            } else if j + 1 == k {
                Bmes::E
            } else {
                Bmes::M
            };
        }
    }
    BmesLabels(labels)
}

/// Deterministically repairs a label sequence so it satisfies the
/// transition constraints. Offending tokens (and members of runs that are
/// never closed) become `S`.
pub fn repair(labels: &[Bmes]) -> BmesLabels {
    let mut out = Vec::with_capacity(labels.len());
    let mut open: Option<usize> = None;
    let close_as_singles = |out: &mut Vec<Bmes>, from: usize| {
        for l in &mut out[from..] {
            *l = Bmes::S;
        }
    };
    for &l in labels {
        match l {
            Bmes::S => {
                if let Some(s) = open.take() {
                    close_as_singles(&mut out, s);
                }
                out.push(Bmes::S);
            }
            Bmes::B => {
                if let Some(s) = open.take() {
                    close_as_singles(&mut out, s);
                }
                open = Some(out.len());
                out.push(Bmes::B);
            }
            Bmes::M => {
                if open.is_some() {
                    out.push(Bmes::M);
                } else {
                    out.push(Bmes::S);
                }
            }
            Bmes::E => {
                if open.take().is_some() {
                    out.push(Bmes::E);
                } else {
                    out.push(Bmes::S);
                }
            }
        }
    }
    if let Some(s) = open {
        close_as_singles(&mut out, s);
    }
    BmesLabels(out)
}

/// Groups real-token indices (0 = first token after `[CLS]`) into words.
///
/// Labels are repaired first, so the result always partitions
/// `0..tok.real_len()`. Missing labels count as `S`; extra labels are ignored.
pub fn decode_bmes(labels: &BmesLabels, tok: &TokenizedText) -> Vec<Vec<usize>> {
    let n = tok.real_len();
    let mut raw: Vec<Bmes> = labels.0.iter().copied().take(n).collect();
    raw.resize(n, Bmes::S);
    groups_of(&repair(&raw))
}

/// Groups for an already-valid label sequence.
pub fn groups_of(labels: &BmesLabels) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    let mut current = Vec::new();
    for (i, &l) in labels.0.iter().enumerate() {
        match l {
            Bmes::S => groups.push(vec![i]),
            Bmes::B | Bmes::M => current.push(i),
            Bmes::E => {
                current.push(i);
                groups.push(std::mem::take(&mut current));
            }
        }
    }
    debug_assert!(current.is_empty());
    groups
}

/// Tokenizer + segmenter + aligner bundled for producing training labels.
#[derive(Debug, Clone)]
pub struct Labeller {
    pub vocab: Vocab,
    pub lexicon: Lexicon,
    pub rules: RuleSet,
    pub max_len: usize,
}

impl Labeller {
    pub fn new(vocab: Vocab, lexicon: Lexicon, rules: RuleSet, max_len: usize) -> Self {
        Self {
            vocab,
            lexicon,
            rules,
            max_len,
        }
    }

    pub fn label(&self, text: &str) -> (TokenizedText, BmesLabels) {
        let tok = tokenize(text, &self.vocab, self.max_len);
        let seg = segment(text, &self.lexicon, &self.rules);
        let labels = align_labels(&tok, &seg);
        (tok, labels)
    }
}

/// Groups of real-token indices induced by oracle spans whose boundaries
/// coincide with token boundaries. Spans touching no token are skipped.
pub fn span_groups(tok: &TokenizedText, seg: &[SegSpan]) -> Vec<Vec<usize>> {
    let offsets: Vec<Offset> = tok.real_offsets();
    seg.iter()
        .map(|s| {
            offsets
                .iter()
                .enumerate()
                .filter(|(_, o)| o.start < s.end && o.end > s.start)
                .map(|(i, _)| i)
                .collect::<Vec<_>>()
        })
        .filter(|g| !g.is_empty())
        .collect()
}
