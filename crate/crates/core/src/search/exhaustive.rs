use std::collections::BTreeMap;

use super::{active_scorers, ScorerHandle};
use crate::error::{Error, Result};
use crate::hypothesis::{Hypothesis, NBestList, ScorerWeights};
use crate::vocab::Vocabulary;

/// Largest number of sequences [`exhaustive_decode`] will score.
pub const EXHAUSTIVE_BUDGET: usize = 1_000_000;

/// Scores every label sequence of length `0..=max_len` (each followed by
/// EOS) with the scorers' whole-sequence scores. Reference oracle for the
/// beam searches.
pub fn exhaustive_decode(
    scorers: &[ScorerHandle<'_>],
    weights: &ScorerWeights,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<NBestList> {
    let active = active_scorers(scorers, weights)?;
    let eos = vocab.eos_id();
    let alphabet: Vec<usize> = vocab.label_ids().into_iter().filter(|&l| l != eos).collect();
    let a = alphabet.len();
    let mut total = 0usize;
    let mut layer = 1usize;
    for _ in 0..=max_len {
        total = total.saturating_add(layer);
        layer = layer.saturating_mul(a);
    }
    if total > EXHAUSTIVE_BUDGET {
        return Err(Error::Budget(format!(
            "{total} sequences exceed the exhaustive budget of {EXHAUSTIVE_BUDGET}"
        )));
    }

    let mut hyps = Vec::with_capacity(total);
    for len in 0..=max_len {
        let count = if len == 0 { 1 } else { a.pow(len as u32) };
        for index in 0..count {
            let mut labels = vec![0usize; len];
            let mut rest = index;
            for slot in labels.iter_mut().rev() {
                *slot = alphabet[rest % a];
                rest /= a;
            }
            labels.push(eos);
            let mut comps = BTreeMap::new();
            let mut combined = 0.0;
            for &i in &active {
                let s = scorers[i].scorer.sequence_score(&labels)?;
                combined += weights.weight(&scorers[i].name) * s;
                comps.insert(scorers[i].name.clone(), s);
            }
            hyps.push(Hypothesis { labels, score_components: comps, combined_score: combined, finished: true });
        }
    }
    Ok(NBestList::from_unsorted(hyps))
}
