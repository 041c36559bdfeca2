//! Hypotheses, log-linear scorer weights and ranked n-best lists.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// A partial or finished label sequence with its per-scorer log-scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub score_components: BTreeMap<String, f64>,
    pub combined_score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Labels with a trailing EOS removed.
    pub fn transcript_labels(&self, eos: usize) -> &[usize] {
        match self.labels.split_last() {
            Some((&last, rest)) if last == eos => rest,
            _ => &self.labels,
        }
    }
}

/// Ordering used by every search: higher score, then shorter, then lexicographic ids.
pub fn rank_order(a_score: f64, a_labels: &[usize], b_score: f64, b_labels: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_labels.len().cmp(&b_labels.len()))
        .then_with(|| a_labels.cmp(b_labels))
}

/// Log-linear weights per scorer name.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerWeights {
    pub weights: BTreeMap<String, f64>,
    /// Divide the running combined score by the hypothesis length when pruning.
    pub length_norm: bool,
    /// Cap on hypothesis length relative to the number of frames.
    pub max_len_factor: f64,
}

impl ScorerWeights {
    pub fn new<I, S>(weights: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let weights: BTreeMap<String, f64> =
            weights.into_iter().map(|(k, v)| (k.into(), v)).collect();
        if weights.values().all(|&w| w == 0.0) {
            return Err(Error::arg("at least one scorer weight must be nonzero"));
        }
        if weights.values().any(|w| !w.is_finite()) {
            return Err(Error::arg("scorer weights must be finite"));
        }
        Ok(Self {
            weights,
            length_norm: false,
            max_len_factor: 1.0,
        })
    }

    pub fn with_length_norm(mut self, on: bool) -> Self {
        self.length_norm = on;
        self
    }

    pub fn with_max_len_factor(mut self, factor: f64) -> Self {
        self.max_len_factor = factor;
        self
    }

    pub fn weight(&self, name: &str) -> f64 {
        self.weights.get(name).copied().unwrap_or(0.0)
    }

    /// Hypothesis length cap for an input of `frames` frames.
    pub fn max_len(&self, frames: usize) -> usize {
        (self.max_len_factor * frames as f64).floor().max(0.0) as usize
    }

    pub fn combine(&self, components: &BTreeMap<String, f64>) -> f64 {
        components
            .iter()
            .map(|(name, &v)| {
                let w = self.weight(name);
                if w == 0.0 {
                    0.0
                } else {
                    w * v
                }
            })
            .sum()
    }
}

/// Hypotheses sorted by combined score, best first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NBestList {
    hyps: Vec<Hypothesis>,
}

impl NBestList {
    /// Sorts with [`rank_order`] and drops non-finite entries.
    pub fn from_unsorted(mut hyps: Vec<Hypothesis>) -> Self {
        hyps.retain(|h| h.combined_score.is_finite());
        hyps.sort_by(|a, b| rank_order(a.combined_score, &a.labels, b.combined_score, &b.labels));
        Self { hyps }
    }

    /// Keeps the caller's order; used after a stable re-sort.
    pub(crate) fn from_sorted(hyps: Vec<Hypothesis>) -> Self {
        Self { hyps }
    }

    pub fn best(&self) -> Option<&Hypothesis> {
        self.hyps.first()
    }

    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyps.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Hypothesis> {
        self.hyps.iter()
    }

    pub fn hyps(&self) -> &[Hypothesis] {
        &self.hyps
    }

    pub fn truncate(&mut self, n: usize) {
        self.hyps.truncate(n);
    }

    /// `<rank>\t<combined>\t<name=value,...>\t<tokens>` per line, ranks from 1.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for (rank, h) in self.hyps.iter().enumerate() {
            let comps: Vec<String> = h
                .score_components
                .iter()
                .map(|(k, v)| format!("{k}={v:.6}"))
                .collect();
            let toks: Vec<&str> = h.labels.iter().map(|&id| vocab.token(id)).collect();
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{}\t{}",
                rank + 1,
                h.combined_score,
                comps.join(","),
                toks.join(" ")
            );
        }
        out
    }
}

impl<'a> IntoIterator for &'a NBestList {
    type Item = &'a Hypothesis;
    type IntoIter = std::slice::Iter<'a, Hypothesis>;

    fn into_iter(self) -> Self::IntoIter {
        self.hyps.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyp(labels: Vec<usize>, score: f64) -> Hypothesis {
        Hypothesis {
            labels,
            score_components: BTreeMap::from([("ctc".to_string(), score)]),
            combined_score: score,
            finished: true,
        }
    }

    #[test]
    fn ordering_rules() {
        let list = NBestList::from_unsorted(vec![
            hyp(vec![5, 4], -1.0),
            hyp(vec![4], -1.0),
            hyp(vec![3, 9], -1.0),
            hyp(vec![7], -0.5),
            hyp(vec![8], f64::NEG_INFINITY),
        ]);
        let labels: Vec<_> = list.iter().map(|h| h.labels.clone()).collect();
        assert_eq!(labels, vec![vec![7], vec![4], vec![3, 9], vec![5, 4]]);
    }

    #[test]
    fn weights_validation_and_combine() {
        assert!(ScorerWeights::new([("a", 0.0)]).is_err());
        let w = ScorerWeights::new([("ctc", 0.3), ("dec", 0.7)]).unwrap();
        let comps = BTreeMap::from([
            ("ctc".to_string(), -2.0),
            ("dec".to_string(), -1.0),
            ("other".to_string(), f64::NEG_INFINITY),
        ]);
        assert!((w.combine(&comps) - (-0.6 - 0.7)).abs() < 1e-12);
        assert_eq!(w.max_len(7), 7);
        assert_eq!(w.clone().with_max_len_factor(0.5).max_len(7), 3);
    }

    #[test]
    fn nbest_text_format() {
        let vocab = Vocabulary::from_words(&["hi"]).unwrap();
        let list = NBestList::from_unsorted(vec![hyp(vec![4, 2], -1.25)]);
        assert_eq!(list.to_text(&vocab), "1\t-1.250000\tctc=-1.250000\thi </s>\n");
    }
}
