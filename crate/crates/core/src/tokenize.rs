//! Tokenizers used for chunking and for usage accounting.
//!
//! Tokens are reported as byte spans into the source text so chunk text can
//! always be sliced verbatim from the original document.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

pub type Span = Range<usize>;

pub trait Tokenizer: Send + Sync {
    /// Identifier recorded in store snapshots and reports.
    fn id(&self) -> &str;

    fn tokenize(&self, text: &str) -> Vec<Span>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

/// Splits on Unicode whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn id(&self) -> &str {
        "whitespace"
    }

    fn tokenize(&self, text: &str) -> Vec<Span> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    spans.push(s..i);
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push(s..text.len());
        }
        spans
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary file is missing the `{BPE_HEADER}` header")]
    MissingHeader,
    #[error("line {line}: expected `left right`")]
    BadLine { line: usize },
    #[error("reading vocabulary: {0}")]
    Io(#[from] std::io::Error),
}

const BPE_HEADER: &str = "#trialmatch-bpe v1";
/// Stand-in for a literal space inside merge files.
const SPACE_MARK: char = '\u{2581}';

/// Byte-pair subword tokenizer driven by an ordered merge list.
///
/// Text is first split into pre-tokens (an optional leading space plus a run
/// of letters, digits or punctuation; stray whitespace stands alone), then each
/// pre-token is merged greedily by merge rank.
#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    id: String,
    ranks: HashMap<(String, String), usize>,
    merges: Vec<(String, String)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Space,
    Other,
}

fn class(c: char) -> Class {
    if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Digit
    } else if c.is_whitespace() {
        Class::Space
    } else {
        Class::Other
    }
}

fn pretokenize(text: &str) -> Vec<Span> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |(b, _)| *b);
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let (_, c) = chars[i];
        let mut j = i;
        if class(c) == Class::Space {
            while j < chars.len() && class(chars[j].1) == Class::Space {
                j += 1;
            }
            // A single trailing ' ' attaches to the following word.
            if j < chars.len() && chars[j - 1].1 == ' ' {
                if j - 1 > i {
                    pieces.push(start..end_of(j - 1));
                }
                let lead = j - 1;
                let cls = class(chars[j].1);
                let mut k = j;
                while k < chars.len() && class(chars[k].1) == cls {
                    k += 1;
                }
                pieces.push(chars[lead].0..end_of(k));
                i = k;
                continue;
            }
            pieces.push(start..end_of(j));
            i = j;
            continue;
        }
        let cls = class(c);
        while j < chars.len() && class(chars[j].1) == cls {
            j += 1;
        }
        pieces.push(start..end_of(j));
        i = j;
    }
    pieces
}

impl BpeTokenizer {
    pub fn from_merges(id: impl Into<String>, merges: Vec<(String, String)>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(r, (a, b))| ((a.clone(), b.clone()), r))
            .collect();
        BpeTokenizer {
            id: id.into(),
            ranks,
            merges,
        }
    }

    pub fn parse(id: impl Into<String>, source: &str) -> Result<Self, VocabError> {
        let mut lines = source.lines();
        if lines.next().map(str::trim) != Some(BPE_HEADER) {
            return Err(VocabError::MissingHeader);
        }
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(VocabError::BadLine { line: n + 2 });
            };
            let unmark = |s: &str| s.replace(SPACE_MARK, " ");
            merges.push((unmark(a), unmark(b)));
        }
        Ok(Self::from_merges(id, merges))
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let source = std::fs::read_to_string(path)?;
        let id = format!(
            "bpe:{}",
            path.file_name().map(|f| f.to_string_lossy()).unwrap_or_default()
        );
        Self::parse(id, &source)
    }

    /// The merge list shipped with the crate, trained on the packaged protocols.
    pub fn packaged() -> Self {
        Self::parse("bpe:clinical-v1", include_str!("../data/bpe-merges.txt"))
            .expect("packaged merges parse")
    }

    pub fn to_vocab_file(&self) -> String {
        let mark = |s: &str| s.replace(' ', &SPACE_MARK.to_string());
        let mut out = String::from(BPE_HEADER);
        out.push('\n');
        for (a, b) in &self.merges {
            out.push_str(&format!("{} {}\n", mark(a), mark(b)));
        }
        out
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Learns `num_merges` merges from `texts`. Ties on pair frequency are
    /// broken by the lexicographically smallest pair.
    pub fn train<'a, I>(id: impl Into<String>, texts: I, num_merges: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words: HashMap<Vec<String>, usize> = HashMap::new();
        for text in texts {
            for span in pretokenize(text) {
                if text[span.clone()].chars().all(char::is_whitespace) {
                    continue;
                }
                let symbols = text[span].chars().map(String::from).collect();
                *words.entry(symbols).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
        words.sort();
        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (w, freq) in &words {
                for pair in w.windows(2) {
                    *counts.entry((&pair[0], &pair[1])).or_default() += freq;
                }
            }
            let Some(best) = counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|((a, b), _)| (a.to_string(), b.to_string()))
            else {
                break;
            };
            for (w, _) in &mut words {
                *w = merge_pair(w, &best.0, &best.1);
            }
            merges.push(best);
        }
        Self::from_merges(id, merges)
    }

    fn encode_piece(&self, piece: &str) -> Vec<String> {
        let mut symbols: Vec<String> = piece.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())))
                .min();
            let Some(&rank) = best else { break };
            let (a, b) = &self.merges[rank];
            symbols = merge_pair(&symbols, a, b);
        }
        symbols
    }
}

fn merge_pair(symbols: &[String], a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

impl Tokenizer for BpeTokenizer {
    fn id(&self) -> &str {
        &self.id
    }

    fn tokenize(&self, text: &str) -> Vec<Span> {
        let mut spans = Vec::new();
        for piece in pretokenize(text) {
            let mut at = piece.start;
            for sym in self.encode_piece(&text[piece.clone()]) {
                spans.push(at..at + sym.len());
                at += sym.len();
            }
        }
        spans
    }
}
