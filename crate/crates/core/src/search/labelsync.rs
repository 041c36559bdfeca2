use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

use super::{active_scorers, DecodeStats, Decoded, ScorerHandle, ScorerState};
use crate::error::{Error, Result};
use crate::hypothesis::{Hypothesis, NBestList, ScorerWeights};
use crate::vocab::Vocabulary;

struct Live {
    labels: Vec<usize>,
    comps: Vec<f64>,
    states: Vec<ScorerState>,
    combined: f64,
    finished: bool,
}

struct Cand {
    parent: usize,
    /// `None` carries a finished parent over unchanged.
    label: Option<usize>,
    comps: Vec<f64>,
    combined: f64,
    key: f64,
}

impl Cand {
    fn len(&self, live: &[Live]) -> usize {
        live[self.parent].labels.len() + usize::from(self.label.is_some())
    }
}

/// Lexicographic comparison of `parent ++ [label]` sequences.
fn seq_cmp(a: (&[usize], Option<usize>), b: (&[usize], Option<usize>)) -> Ordering {
    a.0.iter().chain(a.1.iter()).cmp(b.0.iter().chain(b.1.iter()))
}

/// Label-synchronous beam search over a log-linear mix of scorers.
///
/// Every unfinished hypothesis is expanded by all labels allowed by the
/// scorers' supports plus EOS (only EOS once it holds `max_len` labels).
/// Finished hypotheses stay in the beam and compete with the expansions;
/// the search stops when the best beam entry is finished. With length
/// normalization the pruning key is the combined score divided by the
/// hypothesis length; stored scores are never normalized.
pub fn labelsync_beam(
    scorers: &[ScorerHandle<'_>],
    weights: &ScorerWeights,
    vocab: &Vocabulary,
    beam: usize,
    max_len: usize,
) -> Result<Decoded> {
    let start = Instant::now();
    if beam == 0 {
        return Err(Error::arg("beam must be at least 1"));
    }
    let active = active_scorers(scorers, weights)?;
    let ws: Vec<f64> = active.iter().map(|&i| weights.weight(&scorers[i].name)).collect();
    let eos = vocab.eos_id();

    let mut allowed = vec![true; vocab.len()];
    for &i in &active {
        if let Some(sup) = scorers[i].scorer.support() {
            if sup.len() != vocab.len() {
                return Err(Error::Shape(format!("scorer {:?} support has wrong size", scorers[i].name)));
            }
            allowed.iter_mut().zip(sup).for_each(|(a, s)| *a &= s);
        }
    }
    let mut expand: Vec<usize> = vocab.label_ids().into_iter().filter(|&l| allowed[l] && l != eos).collect();
    expand.push(eos);
    let only_eos = [eos];

    let mut stats = DecodeStats::default();
    let states = active.iter().map(|&i| scorers[i].scorer.init()).collect::<Result<Vec<_>>>()?;
    let mut live = vec![Live { labels: Vec::new(), comps: vec![0.0; active.len()], states, combined: 0.0, finished: false }];

    loop {
        let mut cands = Vec::new();
        let mut scored = 0usize;
        for (pi, h) in live.iter().enumerate() {
            if h.finished {
                let len = h.labels.len().max(1) as f64;
                let key = if weights.length_norm { h.combined / len } else { h.combined };
                cands.push(Cand { parent: pi, label: None, comps: h.comps.clone(), combined: h.combined, key });
                continue;
            }
            let cl: &[usize] = if h.labels.len() >= max_len { &only_eos } else { &expand };
            let deltas = active
                .iter()
                .zip(&h.states)
                .map(|(&i, st)| scorers[i].scorer.score(st, cl))
                .collect::<Result<Vec<_>>>()?;
            scored += cl.len();
            stats.scorer_evals += (cl.len() * active.len()) as u64;
            let len = (h.labels.len() + 1) as f64;
            for (j, &c) in cl.iter().enumerate() {
                let comps: Vec<f64> = h.comps.iter().zip(&deltas).map(|(v, d)| v + d[j]).collect();
                let combined: f64 = comps.iter().zip(&ws).map(|(v, w)| v * w).sum();
                if !combined.is_finite() {
                    continue;
                }
                let key = if weights.length_norm { combined / len } else { combined };
                cands.push(Cand { parent: pi, label: Some(c), comps, combined, key });
            }
        }
        if cands.is_empty() {
            break;
        }
        cands.sort_unstable_by(|a, b| {
            b.key
                .partial_cmp(&a.key)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.len(&live).cmp(&b.len(&live)))
                .then_with(|| seq_cmp((&live[a.parent].labels, a.label), (&live[b.parent].labels, b.label)))
        });
        cands.truncate(beam);

        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let parent = &live[c.parent];
            let Some(label) = c.label else {
                next.push(Live {
                    labels: parent.labels.clone(),
                    comps: c.comps,
                    states: parent.states.clone(),
                    combined: c.combined,
                    finished: true,
                });
                continue;
            };
            let mut labels = parent.labels.clone();
            labels.push(label);
            let finished = label == eos;
            let states = if finished {
                parent.states.clone()
            } else {
                active
                    .iter()
                    .zip(&parent.states)
                    .map(|(&i, st)| scorers[i].scorer.advance(st, label))
                    .collect::<Result<Vec<_>>>()?
            };
            next.push(Live { labels, comps: c.comps, states, combined: c.combined, finished });
        }
        stats.observe(next.len(), scored);
        live = next;
        if live[0].finished {
            break;
        }
    }

    let hyps = live
        .into_iter()
        .filter(|h| h.finished)
        .map(|h| Hypothesis {
            score_components: active
                .iter()
                .zip(&h.comps)
                .map(|(&i, &v)| (scorers[i].name.clone(), v))
                .collect::<BTreeMap<_, _>>(),
            labels: h.labels,
            combined_score: h.combined,
            finished: true,
        })
        .collect();
    stats.wall_time = start.elapsed();
    Ok(Decoded { nbest: NBestList::from_unsorted(hyps), stats })
}
