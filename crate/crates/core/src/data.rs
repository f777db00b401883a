//! Vocabulary, encoding and contiguous-lane batching.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    #[default]
    Char,
    Word,
}

/// Symbol table with dense ids in first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    level: Level,
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    unk: Option<usize>,
}

/// Splits `text` into symbols. A newline becomes [`EOS`]; at word level every
/// line, including a final unterminated one, ends with [`EOS`].
fn tokenize(text: &str, level: Level) -> Vec<String> {
    match level {
        Level::Char => text
            .chars()
            .map(|c| if c == '\n' { EOS.to_string() } else { c.to_string() })
            .collect(),
        Level::Word => {
            let body = text.strip_suffix('\n').unwrap_or(text);
            if text.is_empty() {
                return Vec::new();
            }
            body.split('\n')
                .flat_map(|line| {
                    line.split_whitespace()
                        .map(str::to_string)
                        .chain(std::iter::once(EOS.to_string()))
                })
                .collect()
        }
    }
}

impl Vocab {
    pub fn build(text: &str, level: Level) -> Result<Self, DataError> {
        Self::build_from(&[text], level)
    }

    /// Builds over several texts in order (train, then valid, then test).
    pub fn build_from(texts: &[&str], level: Level) -> Result<Self, DataError> {
        let mut vocab = Self {
            level,
            symbols: Vec::new(),
            index: HashMap::new(),
            unk: None,
        };
        for text in texts {
            for tok in tokenize(text, level) {
                vocab.insert(tok);
            }
        }
        if vocab.symbols.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        Ok(vocab)
    }

    /// Vocabulary from an explicit symbol list, as stored in checkpoints.
    pub fn from_symbols(symbols: Vec<String>, level: Level) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let unk = symbols.iter().position(|s| s == UNK);
        Self {
            level,
            symbols,
            index,
            unk,
        }
    }

    /// Reserves an [`UNK`] id that unknown tokens map to instead of failing.
    pub fn with_unk(mut self) -> Self {
        let id = self.insert(UNK.to_string());
        self.unk = Some(id);
        self
    }

    fn insert(&mut self, tok: String) -> usize {
        if let Some(&id) = self.index.get(&tok) {
            return id;
        }
        let id = self.symbols.len();
        self.index.insert(tok.clone(), id);
        self.symbols.push(tok);
        id
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, DataError> {
        tokenize(text, self.level)
            .into_iter()
            .map(|tok| match (self.index.get(&tok), self.unk) {
                (Some(&id), _) => Ok(id),
                (None, Some(unk)) => Ok(unk),
                (None, None) => Err(DataError::UnknownToken { token: tok }),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, DataError> {
        let mut out = String::new();
        let mut line_start = true;
        for &id in ids {
            let sym = self.symbols.get(id).ok_or(DataError::IdOutOfRange {
                id,
                vocab_size: self.len(),
            })?;
            if sym == EOS {
                out.push('\n');
                line_start = true;
                continue;
            }
            if self.level == Level::Word && !line_start {
                out.push(' ');
            }
            out.push_str(sym);
            line_start = false;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<usize>,
    pub split: Split,
}

impl TokenStream {
    pub fn encode(text: &str, vocab: &Vocab, split: Split) -> Result<Self, DataError> {
        Ok(Self {
            ids: vocab.encode(text)?,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `inputs[b]` and `targets[b]` are windows of lane `b`; targets are the
/// inputs shifted one step ahead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn positions(&self) -> usize {
        self.inputs.iter().map(Vec::len).sum()
    }
}

/// Cuts `ids` into `batch_size` contiguous lanes and steps non-overlapping
/// windows of `seq_len` down every lane.
pub fn batchify(ids: &[usize], batch_size: usize, seq_len: usize) -> Result<Vec<Batch>, DataError> {
    if batch_size == 0 || seq_len == 0 || ids.len() < batch_size * (seq_len + 1) {
        return Err(DataError::StreamTooShort {
            len: ids.len(),
            batch_size,
            seq_len,
        });
    }
    let lane_len = ids.len() / batch_size;
    let lanes: Vec<&[usize]> = ids[..lane_len * batch_size].chunks(lane_len).collect();
    let windows = (lane_len - 1) / seq_len;
    Ok((0..windows)
        .map(|w| {
            let start = w * seq_len;
            Batch {
                inputs: lanes
                    .iter()
                    .map(|lane| lane[start..start + seq_len].to_vec())
                    .collect(),
                targets: lanes
                    .iter()
                    .map(|lane| lane[start + 1..start + seq_len + 1].to_vec())
                    .collect(),
            }
        })
        .collect())
}

/// Train/valid/test streams sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: TokenStream,
    pub valid: TokenStream,
    pub test: TokenStream,
}

impl Corpus {
    /// Vocabulary is built over the three texts in train, valid, test order.
    pub fn from_texts(train: &str, valid: &str, test: &str, level: Level) -> Result<Self, DataError> {
        let vocab = Vocab::build_from(&[train, valid, test], level)?;
        Ok(Self {
            train: TokenStream::encode(train, &vocab, Split::Train)?,
            valid: TokenStream::encode(valid, &vocab, Split::Valid)?,
            test: TokenStream::encode(test, &vocab, Split::Test)?,
            vocab,
        })
    }

    pub fn load(train: &Path, valid: &Path, test: &Path, level: Level) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        Ok(Self::from_texts(&read(train)?, &read(valid)?, &read(test)?, level)?)
    }
}
