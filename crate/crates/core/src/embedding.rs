//! Word vectors, phrase tokenization and mean-pooled phrase embeddings.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Token → vector lookup loaded from a word2vec-style text file.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl WordVectorTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(token).map(Vec::as_slice)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains_key(token)
    }

    /// Inserts a vector. Tokens are lowercased; a token already present is
    /// rejected.
    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        let token = token.to_lowercase();
        if token.is_empty() {
            return Err(Error::InvalidArgument("empty token".into()));
        }
        if self.entries.contains_key(&token) {
            return Err(Error::DuplicateToken(token));
        }
        self.entries.insert(token, vector);
        Ok(())
    }

    /// Tokens in sorted order.
    pub fn tokens(&self) -> Vec<&str> {
        let mut tokens: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        tokens.sort_unstable();
        tokens
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file), path)
    }

    /// Parses the text format: a `<count> <dim>` header followed by one
    /// `<token> <c1> ... <c_dim>` line per token.
    pub fn from_reader(reader: impl BufRead, path: &Path) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let (count, dim) = loop {
            let Some((idx, line)) = lines.next() else {
                return Err(Error::parse(path, 1, "missing header"));
            };
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed = match fields.as_slice() {
                [c, d] => c.parse::<usize>().ok().zip(d.parse::<usize>().ok()),
                _ => None,
            };
            match parsed {
                Some((c, d)) if d > 0 => break (c, d),
                _ => {
                    return Err(Error::parse(
                        path,
                        idx + 1,
                        "malformed header, expected \"<count> <dim>\"",
                    ))
                }
            }
        };

        let mut table = Self::new(dim);
        for (idx, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().unwrap_or_default();
            let vector = fields
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::parse(path, idx + 1, format!("bad component: {e}")))?;
            if vector.len() != dim {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    format!("dimension mismatch: expected {dim}, got {}", vector.len()),
                ));
            }
            if vector.iter().any(|c| !c.is_finite()) {
                return Err(Error::parse(path, idx + 1, "non-finite component"));
            }
            table.insert(token, vector).map_err(|e| match e {
                Error::DuplicateToken(t) => {
                    Error::parse(path, idx + 1, format!("duplicate token {t:?}"))
                }
                other => other,
            })?;
        }
        if table.len() != count {
            return Err(Error::parse(
                path,
                1,
                format!("header declares {count} tokens, file has {}", table.len()),
            ));
        }
        Ok(table)
    }

    /// Writes the table in sorted token order. Components are written as
    /// the shortest decimal that round-trips through `f32`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "{} {}", self.len(), self.dim)?;
            for token in self.tokens() {
                write!(out, "{token}")?;
                for c in &self.entries[token] {
                    write!(out, " {}", *c as f32)?;
                }
                writeln!(out)?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// A tokenized text phrase.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Phrase {
    raw: String,
    tokens: Vec<String>,
}

impl Phrase {
    pub fn new(raw: &str) -> Result<Self> {
        let tokens = tokenize(raw);
        if tokens.is_empty() {
            return Err(Error::EmptyPhrase(raw.to_string()));
        }
        Ok(Self {
            raw: raw.to_string(),
            tokens,
        })
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        Self {
            raw: tokens.join(" "),
            tokens,
        }
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Position of the head noun: the rightmost token found in `lexicon`,
    /// or the last token when none is.
    pub fn head_index(&self, lexicon: &BTreeSet<String>) -> usize {
        self.tokens
            .iter()
            .rposition(|t| lexicon.contains(t))
            .unwrap_or(self.tokens.len() - 1)
    }

    pub fn head_noun(&self, lexicon: &BTreeSet<String>) -> &str {
        &self.tokens[self.head_index(lexicon)]
    }
}

impl fmt::Display for Phrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// Lowercase, split on whitespace, strip ASCII punctuation from token edges.
pub fn tokenize(raw: &str) -> Vec<String> {
    raw.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Mean-pooled phrase vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseEmbedding(pub Vec<f64>);

impl PhraseEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|x| x * factor).collect())
    }
}

/// Mean of the in-vocabulary token vectors; out-of-vocabulary tokens are
/// skipped.
pub fn embed_phrase(table: &WordVectorTable, phrase: &Phrase) -> Result<PhraseEmbedding> {
    let mut sum = vec![0.0; table.dim()];
    let mut n = 0usize;
    for token in phrase.tokens() {
        if let Some(v) = table.get(token) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::OutOfVocabulary(phrase.raw().to_string()));
    }
    let inv = n as f64;
    Ok(PhraseEmbedding(sum.into_iter().map(|s| s / inv).collect()))
}

/// Replaces the head noun of `phrase` with `replacement`, returning the new
/// phrase and the noun that was replaced.
pub fn substitute_head_noun(
    phrase: &Phrase,
    noun_lexicon: &BTreeSet<String>,
    replacement: &str,
) -> (Phrase, String) {
    let idx = phrase.head_index(noun_lexicon);
    let mut tokens = phrase.tokens.clone();
    let head = std::mem::replace(&mut tokens[idx], replacement.to_lowercase());
    (Phrase::from_tokens(tokens), head)
}
