//! Explicit context -> distribution language model.
//!
//! Lookup uses the longest stored context that is a suffix of `BOS · history`;
//! a stored context starting with BOS therefore only matches the full history.
//! Unmatched histories use the default distribution.
//!
//! JSON schema:
//!
//! ```json
//! {"format": "asrfuse-table-lm", "version": 1,
//!  "default": {"<token>": <ln prob>, ...},
//!  "contexts": [{"context": ["<s>", "a"], "dist": {"b": -0.1, ...}}, ...]}
//! ```
//!
//! Outcomes missing from a `dist` have probability zero.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LanguageModel;
use crate::error::{Error, Result};
use crate::logmath::logsumexp;
use crate::vocab::Vocabulary;

const FORMAT: &str = "asrfuse-table-lm";

#[derive(Debug, Clone)]
pub struct TableLm {
    vocab: Vocabulary,
    default: Vec<f64>,
    contexts: HashMap<Vec<usize>, Vec<f64>>,
    max_context: usize,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    format: String,
    version: u32,
    default: BTreeMap<String, f64>,
    contexts: Vec<ContextEntry>,
}

#[derive(Serialize, Deserialize)]
struct ContextEntry {
    context: Vec<String>,
    dist: BTreeMap<String, f64>,
}

impl TableLm {
    pub fn new(vocab: Vocabulary, default: Vec<f64>) -> Result<Self> {
        check_dist(&vocab, &default)?;
        Ok(Self {
            vocab,
            default,
            contexts: HashMap::new(),
            max_context: 0,
        })
    }

    /// Uniform over labels plus EOS for every context.
    pub fn uniform(vocab: Vocabulary) -> Self {
        let outcomes = vocab.outcome_ids();
        let lp = -(outcomes.len() as f64).ln();
        let mut d = vec![f64::NEG_INFINITY; vocab.len()];
        for w in outcomes {
            d[w] = lp;
        }
        Self::new(vocab, d).expect("uniform distribution is valid")
    }

    /// Builds a distribution from (token id, probability) pairs, spreading
    /// `1 - Σ p` evenly over the remaining outcomes.
    pub fn spread(vocab: &Vocabulary, peaks: &[(usize, f64)]) -> Result<Vec<f64>> {
        let outcomes = vocab.outcome_ids();
        let mass: f64 = peaks.iter().map(|p| p.1).sum();
        let rest: Vec<usize> = outcomes
            .iter()
            .copied()
            .filter(|w| !peaks.iter().any(|p| p.0 == *w))
            .collect();
        if mass > 1.0 + 1e-12 || (rest.is_empty() && (mass - 1.0).abs() > 1e-12) {
            return Err(Error::arg("peak probabilities must sum to at most one"));
        }
        let mut d = vec![f64::NEG_INFINITY; vocab.len()];
        for &(w, p) in peaks {
            d[w] = p.ln();
        }
        let each = if rest.is_empty() { 0.0 } else { (1.0 - mass).max(0.0) / rest.len() as f64 };
        for w in rest {
            d[w] = each.ln();
        }
        check_dist(vocab, &d)?;
        Ok(d)
    }

    pub fn insert(&mut self, context: Vec<usize>, dist: Vec<f64>) -> Result<()> {
        check_dist(&self.vocab, &dist)?;
        if let Some(&bad) = context.iter().find(|&&id| id >= self.vocab.len()) {
            return Err(Error::arg(format!("context id {bad} outside vocabulary")));
        }
        self.max_context = self.max_context.max(context.len());
        self.contexts.insert(context, dist);
        Ok(())
    }

    fn lookup(&self, context: &[usize]) -> &[f64] {
        let bos = self.vocab.bos_id();
        let full = context.len() + 1;
        let mut key = Vec::with_capacity(self.max_context);
        for len in (1..=self.max_context.min(full)).rev() {
            key.clear();
            if len == full {
                key.push(bos);
                key.extend_from_slice(context);
            } else {
                key.extend_from_slice(&context[context.len() - len..]);
            }
            if let Some(d) = self.contexts.get(&key) {
                return d;
            }
        }
        &self.default
    }

    pub fn to_json(&self) -> String {
        let to_map = |d: &[f64]| -> BTreeMap<String, f64> {
            d.iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(id, &v)| (self.vocab.token(id).to_owned(), v))
                .collect()
        };
        let mut keys: Vec<&Vec<usize>> = self.contexts.keys().collect();
        keys.sort();
        let file = TableFile {
            format: FORMAT.into(),
            version: 1,
            default: to_map(&self.default),
            contexts: keys
                .into_iter()
                .map(|k| ContextEntry {
                    context: k.iter().map(|&id| self.vocab.token(id).to_owned()).collect(),
                    dist: to_map(&self.contexts[k]),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("table serializes")
    }

    pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let file: TableFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if file.format != FORMAT || file.version != 1 {
            return Err(Error::Format(format!("not a version-1 {FORMAT} file")));
        }
        let id = |t: &str| vocab.id(t).ok_or_else(|| Error::Format(format!("unknown token {t:?}")));
        let to_dist = |m: &BTreeMap<String, f64>| -> Result<Vec<f64>> {
            let mut d = vec![f64::NEG_INFINITY; vocab.len()];
            for (t, &v) in m {
                d[id(t)?] = v;
            }
            Ok(d)
        };
        let mut lm = Self::new(vocab.clone(), to_dist(&file.default)?)?;
        for entry in &file.contexts {
            let ctx = entry.context.iter().map(|t| id(t)).collect::<Result<Vec<_>>>()?;
            lm.insert(ctx, to_dist(&entry.dist)?)?;
        }
        Ok(lm)
    }

    pub fn read(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, vocab)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

fn check_dist(vocab: &Vocabulary, dist: &[f64]) -> Result<()> {
    if dist.len() != vocab.len() {
        return Err(Error::Shape(format!(
            "distribution has {} entries, vocabulary {}",
            dist.len(),
            vocab.len()
        )));
    }
    if dist[vocab.blank_id()] != f64::NEG_INFINITY || dist[vocab.bos_id()] != f64::NEG_INFINITY {
        return Err(Error::arg("blank and BOS must have zero probability"));
    }
    let z = logsumexp(dist);
    if !(z.abs() <= 1e-9) {
        return Err(Error::NotNormalized { row: 0, logsum: z });
    }
    Ok(())
}

impl LanguageModel for TableLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_log_probs(&self, context: &[usize]) -> &[f64] {
        self.lookup(context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_lookup_and_anchoring() {
        let v = Vocabulary::from_words(&["x", "y", "z"]).unwrap();
        let (x, y, z) = (v.id("x").unwrap(), v.id("y").unwrap(), v.id("z").unwrap());
        let mut lm = TableLm::uniform(v.clone());
        lm.insert(vec![v.bos_id(), x], TableLm::spread(&v, &[(z, 0.9)]).unwrap()).unwrap();
        lm.insert(vec![x], TableLm::spread(&v, &[(y, 0.9)]).unwrap()).unwrap();
        // Anchored context wins at the sentence start.
        assert!((lm.logprob(&[x], z).exp() - 0.9).abs() < 1e-12);
        // Elsewhere the bare suffix applies.
        assert!((lm.logprob(&[y, x], y).exp() - 0.9).abs() < 1e-12);
        // Unmatched history falls back to the default.
        assert!((lm.logprob(&[y], y).exp() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized() {
        let v = Vocabulary::from_words(&["x"]).unwrap();
        let mut d = vec![f64::NEG_INFINITY; v.len()];
        d[v.eos_id()] = (0.5f64).ln();
        assert!(TableLm::new(v, d).is_err());
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::from_words(&["x", "y"]).unwrap();
        let mut lm = TableLm::uniform(v.clone());
        lm.insert(vec![v.id("x").unwrap()], TableLm::spread(&v, &[(v.eos_id(), 0.7)]).unwrap())
            .unwrap();
        let text = lm.to_json();
        let back = TableLm::from_json(&text, &v).unwrap();
        assert_eq!(back.to_json(), text);
        assert_eq!(back.next_log_probs(&[v.id("x").unwrap()]), lm.next_log_probs(&[v.id("x").unwrap()]));
    }
}
