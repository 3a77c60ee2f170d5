//! CoNLL-U treebanks, vocabularies and pretrained word vectors.
//!
//! Only the ID, FORM, HEAD and DEPREL columns are modeled. Multiword-token
//! lines (`3-4`) and empty nodes (`5.1`) are skipped. Position 0 of every
//! sentence is an implicit ROOT token that is never stored.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// 1-based position in the sentence.
    pub index: usize,
    pub form: String,
    /// Governor position, 0 for ROOT.
    pub head: usize,
    pub deprel: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

impl Sentence {
    /// Builds a sentence from `(form, head, deprel)` triples.
    pub fn from_triples<S: AsRef<str>>(triples: &[(S, usize, S)]) -> Self {
        let tokens = triples
            .iter()
            .enumerate()
            .map(|(k, (form, head, rel))| Token {
                index: k + 1,
                form: form.as_ref().to_string(),
                head: *head,
                deprel: rel.as_ref().to_string(),
            })
            .collect();
        Sentence { tokens }
    }

    /// Number of real tokens `T` (ROOT excluded).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Form at position `k`, where 0 is ROOT.
    pub fn form(&self, k: usize) -> &str {
        if k == 0 {
            ROOT_FORM
        } else {
            &self.tokens[k - 1].form
        }
    }

    pub fn heads(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        for (k, tok) in self.tokens.iter().enumerate() {
            if tok.index != k + 1 {
                return Err(Error::InvalidEdge(format!(
                    "token indices must be contiguous from 1, found {} at position {}",
                    tok.index,
                    k + 1
                )));
            }
            if tok.head > t || tok.head == tok.index {
                return Err(Error::InvalidEdge(format!(
                    "token {} has head {} (sentence length {})",
                    tok.index, tok.head, t
                )));
            }
        }
        Ok(())
    }
}

pub const ROOT_FORM: &str = "<root>";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Treebank {
    pub sentences: Vec<Sentence>,
    /// Distinct relation labels in order of first occurrence.
    pub labels: Vec<String>,
}

impl Treebank {
    pub fn new(sentences: Vec<Sentence>) -> Self {
        let mut labels: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for s in &sentences {
            for t in &s.tokens {
                if seen.insert(t.deprel.as_str()) {
                    labels.push(t.deprel.clone());
                }
            }
        }
        Treebank { sentences, labels }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Gold edge count per label, aligned with `labels`.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for s in &self.sentences {
            for t in &s.tokens {
                if let Some(r) = self.label_id(&t.deprel) {
                    counts[r] += 1;
                }
            }
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReadOptions {
    /// Accept `_` in HEAD/DEPREL (raw input to be parsed). Missing heads
    /// become 0 and missing labels `_`.
    pub allow_unannotated: bool,
}

pub fn parse_conllu(text: &str) -> Result<Treebank> {
    parse_conllu_with(text, ReadOptions::default())
}

pub fn parse_conllu_with(text: &str, opts: ReadOptions) -> Result<Treebank> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<Token> = Vec::new();
    let mut lines_of: Vec<usize> = Vec::new();

    let finish = |tokens: &mut Vec<Token>, lines_of: &mut Vec<usize>, out: &mut Vec<Sentence>| {
        if tokens.is_empty() {
            return Ok(());
        }
        let t = tokens.len();
        for (tok, &line) in tokens.iter().zip(lines_of.iter()) {
            if tok.head > t {
                return Err(Error::Parse {
                    line,
                    message: format!("HEAD {} out of range for sentence of {} tokens", tok.head, t),
                });
            }
            if tok.head == tok.index {
                return Err(Error::Parse {
                    line,
                    message: format!("token {} is its own head", tok.index),
                });
            }
        }
        out.push(Sentence {
            tokens: std::mem::take(tokens),
        });
        lines_of.clear();
        Ok(())
    };

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            finish(&mut tokens, &mut lines_of, &mut sentences)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let index: usize = id.parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid ID {id:?}"),
        })?;
        if index != tokens.len() + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected ID {}, found {}", tokens.len() + 1, index),
            });
        }
        let head = match cols[6] {
            "_" if opts.allow_unannotated => 0,
            h => h.parse::<usize>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("non-integer HEAD {h:?}"),
            })?,
        };
        let deprel = cols[7];
        if deprel.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty DEPREL".into(),
            });
        }
        tokens.push(Token {
            index,
            form: cols[1].to_string(),
            head,
            deprel: deprel.to_string(),
        });
        lines_of.push(line_no);
    }
    finish(&mut tokens, &mut lines_of, &mut sentences)?;
    Ok(Treebank::new(sentences))
}

/// Emits 10-column CoNLL-U; unmodeled columns are `_`. Every sentence is
/// followed by a blank line.
pub fn write_conllu(tb: &Treebank) -> String {
    let mut out = String::new();
    for s in &tb.sentences {
        for t in &s.tokens {
            let _ = writeln!(
                out,
                "{}\t{}\t_\t_\t_\t_\t{}\t{}\t_\t_",
                t.index, t.form, t.head, t.deprel
            );
        }
        out.push('\n');
    }
    out
}

pub const UNK_WORD: usize = 0;
pub const ROOT_WORD: usize = 1;
pub const PAD_CHAR: usize = 0;
pub const UNK_CHAR: usize = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
    pub chars: Vec<char>,
    pub labels: Vec<String>,
    /// Training frequency of every distinct form, including ones mapped to UNK.
    pub frequencies: Vec<(String, usize)>,
    pub min_freq: usize,
    #[serde(skip)]
    word_ids: HashMap<String, usize>,
    #[serde(skip)]
    char_ids: HashMap<char, usize>,
    #[serde(skip)]
    label_ids: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words && self.chars == other.chars && self.labels == other.labels
    }
}

/// Builds word/char/label maps in first-occurrence order. Words seen fewer
/// than `min_freq` times map to UNK.
pub fn build_vocab(tb: &Treebank, min_freq: usize) -> Result<Vocabulary> {
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    if tb.num_tokens() == 0 {
        return Err(Error::EmptyTreebank);
    }
    let mut order: Vec<String> = Vec::new();
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in &tb.sentences {
        for t in &s.tokens {
            let c = freq.entry(t.form.as_str()).or_insert(0);
            if *c == 0 {
                order.push(t.form.clone());
            }
            *c += 1;
        }
    }
    let mut words = vec!["<unk>".to_string(), ROOT_FORM.to_string()];
    let mut chars = vec!['\0', '\u{FFFD}'];
    let mut seen_chars = std::collections::HashSet::new();
    for w in &order {
        if freq[w.as_str()] >= min_freq {
            words.push(w.clone());
            for ch in w.chars() {
                if seen_chars.insert(ch) {
                    chars.push(ch);
                }
            }
        }
    }
    let frequencies = order.iter().map(|w| (w.clone(), freq[w.as_str()])).collect();
    Ok(Vocabulary::from_parts(words, chars, tb.labels.clone(), frequencies, min_freq))
}

impl Vocabulary {
    pub fn from_parts(
        words: Vec<String>,
        chars: Vec<char>,
        labels: Vec<String>,
        frequencies: Vec<(String, usize)>,
        min_freq: usize,
    ) -> Self {
        let mut v = Vocabulary {
            words,
            chars,
            labels,
            frequencies,
            min_freq,
            word_ids: HashMap::new(),
            char_ids: HashMap::new(),
            label_ids: HashMap::new(),
        };
        v.reindex();
        v
    }

    /// Rebuilds lookup maps; needed after deserialization.
    pub fn reindex(&mut self) {
        self.word_ids = self.words.iter().enumerate().skip(2).map(|(i, w)| (w.clone(), i)).collect();
        self.char_ids = self.chars.iter().enumerate().skip(2).map(|(i, &c)| (c, i)).collect();
        self.label_ids = self.labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    /// Exact form first, then its lowercased form, then UNK.
    pub fn word_id(&self, form: &str) -> usize {
        if let Some(&id) = self.word_ids.get(form) {
            return id;
        }
        let lower = form.to_lowercase();
        self.word_ids.get(&lower).copied().unwrap_or(UNK_WORD)
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_ids.get(&c).copied().unwrap_or(UNK_CHAR)
    }

    pub fn char_ids(&self, form: &str) -> Vec<usize> {
        form.chars().map(|c| self.char_id(c)).collect()
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.label_ids.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for c in &self.chars {
            h.update(c.to_string().as_bytes());
        }
        h.update([1u8]);
        for l in &self.labels {
            h.update(l.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Word vectors in the whitespace-separated text convention
/// (`word v1 v2 ... vd`, optional `count dim` header line).
#[derive(Clone, Debug)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn parse(text: &str) -> Result<Self> {
        let mut dim = 0;
        let mut vectors = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<&str> = parts.collect();
            if n == 0 && values.len() == 1 && word.parse::<usize>().is_ok() {
                continue;
            }
            let parsed: Result<Vec<f64>> = values
                .iter()
                .map(|v| {
                    v.parse::<f64>().map_err(|_| Error::Parse {
                        line: n + 1,
                        message: format!("invalid vector component {v:?}"),
                    })
                })
                .collect();
            let parsed = parsed?;
            if dim == 0 {
                dim = parsed.len();
            }
            if parsed.len() != dim || dim == 0 {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("expected {dim} components, found {}", parsed.len()),
                });
            }
            vectors.entry(word.to_string()).or_insert(parsed);
        }
        Ok(WordVectors { dim, vectors })
    }

    /// Exact form, then lowercased form.
    pub fn lookup(&self, form: &str) -> Option<&[f64]> {
        self.vectors
            .get(form)
            .or_else(|| self.vectors.get(&form.to_lowercase()))
            .map(Vec::as_slice)
    }
}
