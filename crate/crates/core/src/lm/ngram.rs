//! Backoff n-gram language model.
//!
//! Scores follow stupid backoff: a seen `(context, token)` gets its relative
//! frequency, otherwise the score of the shortened context times the backoff
//! factor. The unigram floor is add-one over labels plus EOS, with counts
//! taken from label tokens only. Every context's scores are then normalized
//! so each conditional distribution sums to one.
//!
//! Text format (one entry per line, tab separated):
//!
//! ```text
//! #asrfuse-ngram	version=1	order=<n>	backoff=<factor>
//! <order>	<space-separated context tokens>	<token>	<log10 prob>
//! ```
//!
//! A line exists for every context seen in training (contexts start with the
//! BOS token when anchored at the sentence start) and every outcome token.
//! Unseen contexts use the longest listed suffix.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::LanguageModel;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

const HEADER: &str = "#asrfuse-ngram";

#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    backoff: f64,
    vocab: Vocabulary,
    /// Context (BOS-anchored history suffix) -> log10 distribution over vocab ids.
    log10: BTreeMap<Vec<usize>, Vec<f64>>,
    ln: HashMap<Vec<usize>, Vec<f64>>,
}

impl NGramModel {
    /// Maximum-likelihood training on token-id sequences (BOS/EOS implicit).
    pub fn train(vocab: &Vocabulary, corpus: &[Vec<usize>], order: usize, backoff: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::arg("cannot train an n-gram model on an empty corpus"));
        }
        if order == 0 {
            return Err(Error::arg("n-gram order must be at least 1"));
        }
        if !(backoff > 0.0 && backoff.is_finite()) {
            return Err(Error::arg("backoff factor must be positive"));
        }
        let (bos, eos) = (vocab.bos_id(), vocab.eos_id());
        for seq in corpus {
            if let Some(&bad) = seq.iter().find(|&&id| id >= vocab.len() || vocab.is_special(id)) {
                return Err(Error::arg(format!("training token {bad} is not a label")));
            }
        }

        // (context, token) counts for orders >= 2, keyed by context.
        let mut counts: HashMap<Vec<usize>, HashMap<usize, u64>> = HashMap::new();
        let mut unigram = vec![0u64; vocab.len()];
        for seq in corpus {
            let mut history = Vec::with_capacity(seq.len() + 1);
            history.push(bos);
            for (i, &tok) in seq.iter().chain(std::iter::once(&eos)).enumerate() {
                if i < seq.len() {
                    unigram[tok] += 1;
                }
                for ctx_len in 1..order {
                    if ctx_len > history.len() {
                        break;
                    }
                    let ctx = history[history.len() - ctx_len..].to_vec();
                    *counts.entry(ctx).or_default().entry(tok).or_default() += 1;
                }
                history.push(tok);
            }
        }

        let outcomes = vocab.outcome_ids();
        let total: u64 = unigram.iter().sum();
        let denom = (total + outcomes.len() as u64) as f64;
        let mut uni_scores = vec![0.0; vocab.len()];
        for &w in &outcomes {
            uni_scores[w] = (unigram[w] + 1) as f64 / denom;
        }

        let mut contexts: Vec<&Vec<usize>> = counts.keys().collect();
        // Shorter contexts first so backoff targets exist when needed.
        contexts.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        let mut scores: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
        scores.insert(Vec::new(), uni_scores);
        for ctx in contexts {
            let base = backoff_scores(&scores, &ctx[1..], backoff);
            let table = &counts[ctx];
            let ctx_total: u64 = table.values().sum();
            let mut s = vec![0.0; vocab.len()];
            for &w in &outcomes {
                s[w] = match table.get(&w) {
                    Some(&c) => c as f64 / ctx_total as f64,
                    None => backoff * base[w],
                };
            }
            scores.insert(ctx.clone(), s);
        }

        let mut log10 = BTreeMap::new();
        for (ctx, s) in scores {
            let z: f64 = outcomes.iter().map(|&w| s[w]).sum();
            let mut dist = vec![f64::NEG_INFINITY; vocab.len()];
            for &w in &outcomes {
                dist[w] = (s[w] / z).log10();
            }
            log10.insert(ctx, dist);
        }
        Ok(Self::from_tables(vocab.clone(), order, backoff, log10))
    }

    fn from_tables(vocab: Vocabulary, order: usize, backoff: f64, log10: BTreeMap<Vec<usize>, Vec<f64>>) -> Self {
        let ln = log10
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|x| x * std::f64::consts::LN_10).collect()))
            .collect();
        Self {
            order,
            backoff,
            vocab,
            log10,
            ln,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn backoff(&self) -> f64 {
        self.backoff
    }

    /// Number of stored contexts, the empty (unigram) context included.
    pub fn num_contexts(&self) -> usize {
        self.log10.len()
    }

    /// Longest stored suffix of `BOS · context`.
    fn lookup(&self, context: &[usize]) -> &[f64] {
        let max = (self.order - 1).min(context.len() + 1);
        let mut key = Vec::with_capacity(max);
        for len in (1..=max).rev() {
            key.clear();
            if len > context.len() {
                key.push(self.vocab.bos_id());
                key.extend_from_slice(context);
            } else {
                key.extend_from_slice(&context[context.len() - len..]);
            }
            if let Some(d) = self.ln.get(&key) {
                return d;
            }
        }
        &self.ln[&Vec::new()]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}\tversion=1\torder={}\tbackoff={}", self.order, self.backoff);
        for (ctx, dist) in &self.log10 {
            let ctx_text: Vec<&str> = ctx.iter().map(|&id| self.vocab.token(id)).collect();
            let ctx_text = ctx_text.join(" ");
            for (w, &lp) in dist.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let _ = writeln!(out, "{}\t{ctx_text}\t{}\t{lp:?}", ctx.len() + 1, self.vocab.token(w));
            }
        }
        out
    }

    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty n-gram file".into()))?;
        let mut fields = header.split('\t');
        if fields.next() != Some(HEADER) {
            return Err(Error::Format("missing n-gram header".into()));
        }
        let mut order = None;
        let mut backoff = None;
        for f in fields {
            match f.split_once('=') {
                Some(("version", "1")) => {}
                Some(("version", v)) => return Err(Error::Format(format!("unsupported n-gram version {v}"))),
                Some(("order", v)) => order = v.parse::<usize>().ok(),
                Some(("backoff", v)) => backoff = v.parse::<f64>().ok(),
                _ => return Err(Error::Format(format!("bad header field {f:?}"))),
            }
        }
        let (order, backoff) = match (order, backoff) {
            (Some(o), Some(b)) if o >= 1 => (o, b),
            _ => return Err(Error::Format("header needs order and backoff".into())),
        };
        let token_id = |t: &str, line: usize| {
            vocab
                .id(t)
                .ok_or_else(|| Error::Format(format!("line {line}: unknown token {t:?}")))
        };
        let mut log10: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(Error::Format(format!("line {lineno}: expected 4 fields")));
            }
            let ctx = parts[1]
                .split_whitespace()
                .map(|t| token_id(t, lineno))
                .collect::<Result<Vec<_>>>()?;
            if parts[0].parse::<usize>().ok() != Some(ctx.len() + 1) || ctx.len() >= order {
                return Err(Error::Format(format!("line {lineno}: order does not match context")));
            }
            let tok = token_id(parts[2], lineno)?;
            let lp: f64 = parts[3]
                .parse()
                .map_err(|_| Error::Format(format!("line {lineno}: bad probability {:?}", parts[3])))?;
            log10
                .entry(ctx)
                .or_insert_with(|| vec![f64::NEG_INFINITY; vocab.len()])[tok] = lp;
        }
        if !log10.contains_key(&Vec::new()) {
            return Err(Error::Format("n-gram file has no unigram entries".into()));
        }
        let outcomes = vocab.outcome_ids();
        for (ctx, dist) in &log10 {
            let z: f64 = outcomes.iter().map(|&w| 10f64.powf(dist[w])).sum();
            if (z - 1.0).abs() > 1e-9 {
                return Err(Error::Format(format!("context {ctx:?} sums to {z}")));
            }
        }
        Ok(Self::from_tables(vocab.clone(), order, backoff, log10))
    }

    pub fn read(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, vocab)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Unnormalized backoff scores for a context that may not have been seen.
fn backoff_scores(scores: &HashMap<Vec<usize>, Vec<f64>>, ctx: &[usize], backoff: f64) -> Vec<f64> {
    if let Some(s) = scores.get(ctx) {
        return s.clone();
    }
    let base = backoff_scores(scores, &ctx[1..], backoff);
    base.into_iter().map(|v| v * backoff).collect()
}

impl LanguageModel for NGramModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_log_probs(&self, context: &[usize]) -> &[f64] {
        self.lookup(context)
    }
}
