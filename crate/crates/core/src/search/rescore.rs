use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hypothesis::{Hypothesis, NBestList};
use crate::lm::{lm_logprob, LanguageModel};

/// Second-pass rescoring: `am + lm_weight * lm + length_reward * len`,
/// where `am` is each hypothesis's previous combined score and `len` its
/// label count without EOS. Ties keep their previous order.
pub fn rescore_nbest(nbest: &NBestList, lm: &dyn LanguageModel, lm_weight: f64, length_reward: f64) -> Result<NBestList> {
    if nbest.is_empty() {
        return Err(Error::arg("cannot rescore an empty n-best list"));
    }
    let eos = lm.vocab().eos_id();
    let mut hyps: Vec<Hypothesis> = nbest
        .iter()
        .map(|h| {
            let body = h.transcript_labels(eos);
            let am = h.combined_score;
            let lm_score = lm_logprob(lm, body);
            let len = body.len() as f64;
            let mut combined = am + length_reward * len;
            if lm_weight != 0.0 {
                combined += lm_weight * lm_score;
            }
            Hypothesis {
                labels: h.labels.clone(),
                score_components: BTreeMap::from([
                    ("am".to_owned(), am),
                    ("length".to_owned(), len),
                    ("lm".to_owned(), lm_score),
                ]),
                combined_score: combined,
                finished: h.finished,
            }
        })
        .filter(|h| h.combined_score.is_finite())
        .collect();
    hyps.sort_by(|a, b| b.combined_score.partial_cmp(&a.combined_score).unwrap());
    Ok(NBestList::from_sorted(hyps))
}
