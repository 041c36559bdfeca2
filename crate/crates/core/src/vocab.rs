//! Token inventory with the special blank/BOS/EOS ids.
//!
//! On disk a vocabulary is one token per line, `<token>\t<flags>`, where flags
//! is a comma list drawn from `blank`, `bos`, `eos`, `word_begin`. The line
//! number is the id. A token spelled `<unk>` is the out-of-vocabulary fallback.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    begins_word: Vec<bool>,
    blank_id: usize,
    bos_id: usize,
    eos_id: usize,
    unk_id: Option<usize>,
    index: HashMap<String, usize>,
}

/// One vocabulary entry before ids are assigned.
#[derive(Debug, Clone, Default)]
pub struct TokenSpec {
    pub text: String,
    pub blank: bool,
    pub bos: bool,
    pub eos: bool,
    pub word_begin: bool,
}

impl TokenSpec {
    pub fn word(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            word_begin: true,
            ..Default::default()
        }
    }

    pub fn piece(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Default::default()
        }
    }
}

impl Vocabulary {
    pub fn new(specs: Vec<TokenSpec>) -> Result<Self> {
        let mut blank = None;
        let mut bos = None;
        let mut eos = None;
        let mut index = HashMap::with_capacity(specs.len());
        for (id, s) in specs.iter().enumerate() {
            if s.text.is_empty() || s.text.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!(
                    "token {id} ({:?}) is empty or contains whitespace",
                    s.text
                )));
            }
            if index.insert(s.text.clone(), id).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {:?}", s.text)));
            }
            for (flag, slot, name) in [
                (s.blank, &mut blank, "blank"),
                (s.bos, &mut bos, "bos"),
                (s.eos, &mut eos, "eos"),
            ] {
                if flag {
                    if slot.is_some() {
                        return Err(Error::Vocabulary(format!("more than one {name} token")));
                    }
                    *slot = Some(id);
                }
            }
        }
        let missing = |n: &str| Error::Vocabulary(format!("no {n} token"));
        let blank_id = blank.ok_or_else(|| missing("blank"))?;
        let bos_id = bos.ok_or_else(|| missing("bos"))?;
        let eos_id = eos.ok_or_else(|| missing("eos"))?;
        if blank_id == bos_id || blank_id == eos_id || bos_id == eos_id {
            return Err(Error::Vocabulary("blank, bos and eos must be distinct tokens".into()));
        }
        let unk_id = index.get(UNK_TOKEN).copied();
        Ok(Self {
            begins_word: specs.iter().map(|s| s.word_begin).collect(),
            tokens: specs.into_iter().map(|s| s.text).collect(),
            blank_id,
            bos_id,
            eos_id,
            unk_id,
            index,
        })
    }

    /// `<blank>`, `<s>`, `</s>`, `<unk>` followed by `words`, each flagged as a word start.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut specs = Self::special_specs();
        specs.extend(words.iter().map(|w| TokenSpec::word(w.as_ref())));
        Self::new(specs)
    }

    /// `<blank>`, `<s>`, `</s>` followed by `labels` (no `<unk>`).
    pub fn with_specials(labels: Vec<TokenSpec>) -> Result<Self> {
        let mut specs = Self::special_specs();
        specs.truncate(3);
        specs.extend(labels);
        Self::new(specs)
    }

    pub(crate) fn special_specs() -> Vec<TokenSpec> {
        vec![
            TokenSpec {
                text: "<blank>".into(),
                blank: true,
                ..Default::default()
            },
            TokenSpec {
                text: "<s>".into(),
                bos: true,
                ..Default::default()
            },
            TokenSpec {
                text: "</s>".into(),
                eos: true,
                ..Default::default()
            },
            TokenSpec::piece(UNK_TOKEN),
        ]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn bos_id(&self) -> usize {
        self.bos_id
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn unk_id(&self) -> Option<usize> {
        self.unk_id
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn begins_word(&self, id: usize) -> bool {
        self.begins_word[id]
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.blank_id || id == self.bos_id || id == self.eos_id
    }

    /// Ids that can appear in a transcript: everything except blank, BOS and EOS.
    pub fn label_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_special(i)).collect()
    }

    /// Ids a language model distributes mass over: labels plus EOS.
    pub fn outcome_ids(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| i != self.blank_id && i != self.bos_id)
            .collect()
    }

    /// Joins label tokens into text; a word-begin token starts a new word.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids.iter().filter(|&&i| !self.is_special(i)) {
            if !out.is_empty() && self.begins_word[id] {
                out.push(' ');
            }
            out.push_str(&self.tokens[id]);
        }
        out
    }

    /// Splits a label sequence into words (groups starting at word-begin tokens).
    pub fn words(&self, ids: &[usize]) -> Vec<String> {
        self.detokenize(ids)
            .split_whitespace()
            .map(str::to_owned)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            let mut flags = Vec::new();
            if id == self.blank_id {
                flags.push("blank");
            }
            if id == self.bos_id {
                flags.push("bos");
            }
            if id == self.eos_id {
                flags.push("eos");
            }
            if self.begins_word[id] {
                flags.push("word_begin");
            }
            let _ = writeln!(out, "{tok}\t{}", flags.join(","));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut specs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (tok, flags) = line.split_once('\t').unwrap_or((line, ""));
            let mut spec = TokenSpec::piece(tok);
            for flag in flags.split(',').map(str::trim).filter(|f| !f.is_empty()) {
                match flag {
                    "blank" => spec.blank = true,
                    "bos" => spec.bos = true,
                    "eos" => spec.eos = true,
                    "word_begin" => spec.word_begin = true,
                    other => {
                        return Err(Error::Vocabulary(format!(
                            "line {}: unknown flag {other:?}",
                            lineno + 1
                        )))
                    }
                }
            }
            specs.push(spec);
        }
        Self::new(specs)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
