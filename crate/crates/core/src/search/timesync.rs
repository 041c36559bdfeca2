use std::collections::HashMap;
use std::time::Instant;

use super::{DecodeStats, Decoded};
use crate::error::{Error, Result};
use crate::hypothesis::{rank_order, Hypothesis, NBestList};
use crate::lm::{retokenize, LanguageModel};
use crate::logmath::log_add;
use crate::posteriorgram::Posteriorgram;
use crate::vocab::Vocabulary;

/// How LM scores attach to CTC prefixes in the frame-synchronous search.
trait Fusion {
    type Ext: Clone;

    fn root(&self) -> Self::Ext;
    /// Data of `parent_labels ++ [label]`.
    fn extend(&self, parent: &Self::Ext, parent_labels: &[usize], label: usize) -> Result<Self::Ext>;
    /// Unweighted LM score used while pruning.
    fn partial(&self, ext: &Self::Ext) -> f64;
    /// Unweighted LM score of the complete hypothesis, EOS included.
    fn finalize(&self, ext: &Self::Ext, labels: &[usize]) -> Result<f64>;
    fn has_lm(&self) -> bool;
}

struct NoLm;

impl Fusion for NoLm {
    type Ext = ();

    fn root(&self) {}
    fn extend(&self, _: &(), _: &[usize], _: usize) -> Result<()> {
        Ok(())
    }
    fn partial(&self, _: &()) -> f64 {
        0.0
    }
    fn finalize(&self, _: &(), _: &[usize]) -> Result<f64> {
        Ok(0.0)
    }
    fn has_lm(&self) -> bool {
        false
    }
}

/// LM over the same vocabulary, scored label by label.
struct Shallow<'a> {
    lm: &'a dyn LanguageModel,
    eos: usize,
}

impl Fusion for Shallow<'_> {
    type Ext = f64;

    fn root(&self) -> f64 {
        0.0
    }
    fn extend(&self, parent: &f64, parent_labels: &[usize], label: usize) -> Result<f64> {
        Ok(parent + self.lm.logprob(parent_labels, label))
    }
    fn partial(&self, ext: &f64) -> f64 {
        *ext
    }
    fn finalize(&self, ext: &f64, labels: &[usize]) -> Result<f64> {
        Ok(ext + self.lm.logprob(labels, self.eos))
    }
    fn has_lm(&self) -> bool {
        true
    }
}

#[derive(Clone)]
struct Pending {
    /// LM units of the completed words.
    committed: Vec<usize>,
    committed_score: f64,
    /// Text of the word still being spelled.
    word: String,
}

/// LM over another vocabulary, scored a word at a time.
struct Delayed<'a> {
    am: &'a Vocabulary,
    lm: &'a dyn LanguageModel,
}

impl Delayed<'_> {
    fn score_units(&self, history: &mut Vec<usize>, units: &[usize]) -> f64 {
        let mut s = 0.0;
        for &u in units {
            s += self.lm.logprob(history, u);
            history.push(u);
        }
        s
    }
}

impl Fusion for Delayed<'_> {
    type Ext = Pending;

    fn root(&self) -> Pending {
        Pending { committed: Vec::new(), committed_score: 0.0, word: String::new() }
    }

    fn extend(&self, parent: &Pending, _: &[usize], label: usize) -> Result<Pending> {
        let mut next = parent.clone();
        if self.am.is_special(label) {
            return Ok(next);
        }
        if self.am.begins_word(label) && !next.word.is_empty() {
            let units = retokenize(self.lm.vocab(), &next.word)?;
            next.committed_score += self.score_units(&mut next.committed, &units);
            next.word.clear();
        }
        next.word.push_str(self.am.token(label));
        Ok(next)
    }

    fn partial(&self, ext: &Pending) -> f64 {
        ext.committed_score
    }

    fn finalize(&self, ext: &Pending, _: &[usize]) -> Result<f64> {
        let mut history = ext.committed.clone();
        let units = retokenize(self.lm.vocab(), &ext.word)?;
        let residual = self.score_units(&mut history, &units);
        Ok(ext.committed_score + residual + self.lm.logprob(&history, self.lm.vocab().eos_id()))
    }

    fn has_lm(&self) -> bool {
        true
    }
}

struct Node<E> {
    labels: Vec<usize>,
    ext: E,
    children: HashMap<usize, usize>,
}

fn weighted(lm_weight: f64, lm: f64) -> f64 {
    // Keeps a zero weight exact even for -inf LM scores.
    if lm_weight == 0.0 {
        0.0
    } else {
        lm_weight * lm
    }
}

fn prefix_beam<F: Fusion>(
    pg: &Posteriorgram,
    vocab: &Vocabulary,
    fusion: &F,
    lm_weight: f64,
    beam: usize,
) -> Result<Decoded> {
    let start = Instant::now();
    if beam == 0 {
        return Err(Error::arg("beam must be at least 1"));
    }
    if pg.labels() != vocab.len() {
        return Err(Error::Shape(format!(
            "posteriorgram has {} labels, vocabulary {}",
            pg.labels(),
            vocab.len()
        )));
    }
    if !lm_weight.is_finite() {
        return Err(Error::arg("LM weight must be finite"));
    }
    let blank = vocab.blank_id();
    let eos = vocab.eos_id();
    let labels: Vec<usize> = vocab.label_ids().into_iter().filter(|&l| l != eos).collect();
    let mut stats = DecodeStats { audio_secs: pg.duration_secs(), ..Default::default() };

    let mut nodes = vec![Node { labels: Vec::new(), ext: fusion.root(), children: HashMap::new() }];
    // (node, log p_blank-ending, log p_nonblank-ending)
    let mut beams: Vec<(usize, f64, f64)> = vec![(0, 0.0, f64::NEG_INFINITY)];
    let ninf = f64::NEG_INFINITY;

    for t in 0..pg.frames() {
        let y = pg.row(t);
        let emit: Vec<usize> = labels.iter().copied().filter(|&c| y[c] > ninf).collect();
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut next: Vec<(usize, f64, f64)> = Vec::new();
        let mut add = |next: &mut Vec<(usize, f64, f64)>, n: usize, pb: f64, pnb: f64| {
            let i = *slot.entry(n).or_insert_with(|| {
                next.push((n, ninf, ninf));
                next.len() - 1
            });
            next[i].1 = log_add(next[i].1, pb);
            next[i].2 = log_add(next[i].2, pnb);
        };
        stats.observe(beams.len(), beams.len() * emit.len());
        for &(n, pb, pnb) in &beams {
            let total = log_add(pb, pnb);
            add(&mut next, n, total + y[blank], ninf);
            let last = nodes[n].labels.last().copied();
            if let Some(l) = last {
                add(&mut next, n, ninf, pnb + y[l]);
            }
            for &c in &emit {
                let child = match nodes[n].children.get(&c) {
                    Some(&ch) => ch,
                    None => {
                        let ext = fusion.extend(&nodes[n].ext, &nodes[n].labels, c)?;
                        let mut lab = nodes[n].labels.clone();
                        lab.push(c);
                        nodes.push(Node { labels: lab, ext, children: HashMap::new() });
                        let id = nodes.len() - 1;
                        nodes[n].children.insert(c, id);
                        id
                    }
                };
                let from = if last == Some(c) { pb } else { total };
                add(&mut next, child, ninf, from + y[c]);
            }
            stats.scorer_evals += emit.len() as u64;
        }
        let score = |&(n, pb, pnb): &(usize, f64, f64)| log_add(pb, pnb) + weighted(lm_weight, fusion.partial(&nodes[n].ext));
        let mut keyed: Vec<(f64, (usize, f64, f64))> = next.into_iter().map(|b| (score(&b), b)).collect();
        keyed.retain(|(s, _)| *s > ninf);
        keyed.sort_by(|a, b| rank_order(a.0, &nodes[a.1 .0].labels, b.0, &nodes[b.1 .0].labels));
        keyed.truncate(beam);
        beams = keyed.into_iter().map(|(_, b)| b).collect();
        if beams.is_empty() {
            break;
        }
    }

    let mut hyps = Vec::with_capacity(beams.len());
    for &(n, pb, pnb) in &beams {
        let node = &nodes[n];
        let ctc = log_add(pb, pnb);
        let mut comps = std::collections::BTreeMap::from([("ctc".to_owned(), ctc)]);
        let mut combined = ctc;
        if fusion.has_lm() {
            let lm = fusion.finalize(&node.ext, &node.labels)?;
            comps.insert("lm".to_owned(), lm);
            combined += weighted(lm_weight, lm);
        }
        let mut labels = node.labels.clone();
        labels.push(eos);
        hyps.push(Hypothesis { labels, score_components: comps, combined_score: combined, finished: true });
    }
    stats.wall_time = start.elapsed();
    Ok(Decoded { nbest: NBestList::from_unsorted(hyps), stats })
}

/// Frame-synchronous CTC prefix beam search with optional shallow fusion of
/// an LM over the same vocabulary. Components: `ctc` and `lm`; the combined
/// score is `ctc + lm_weight * lm`, the LM's EOS term added at the end.
pub fn timesync_ctc_beam(
    pg: &Posteriorgram,
    vocab: &Vocabulary,
    lm: Option<&dyn LanguageModel>,
    lm_weight: f64,
    beam: usize,
) -> Result<Decoded> {
    match lm {
        None => prefix_beam(pg, vocab, &NoLm, lm_weight, beam),
        Some(lm) => {
            if lm.vocab().tokens() != vocab.tokens() {
                return Err(Error::Vocabulary(
                    "LM vocabulary differs from the acoustic vocabulary; use delayed fusion".into(),
                ));
            }
            prefix_beam(pg, vocab, &Shallow { lm, eos: vocab.eos_id() }, lm_weight, beam)
        }
    }
}

/// Like [`timesync_ctc_beam`], but the LM has its own vocabulary: words are
/// retokenized into LM units and scored once complete (a word-begin label
/// follows them); the last word and EOS are scored at the end.
pub fn delayed_fusion_beam(
    pg: &Posteriorgram,
    am_vocab: &Vocabulary,
    lm: &dyn LanguageModel,
    lm_weight: f64,
    beam: usize,
) -> Result<Decoded> {
    prefix_beam(pg, am_vocab, &Delayed { am: am_vocab, lm }, lm_weight, beam)
}
