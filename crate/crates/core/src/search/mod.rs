//! Decoding strategies: label-synchronous beam search over any mix of
//! scorers, frame-synchronous CTC prefix beam search with shallow or delayed
//! LM fusion, n-best rescoring, and an exhaustive oracle.

mod exhaustive;
mod labelsync;
mod rescore;
mod scorers;
#[cfg(test)]
mod tests;
mod timesync;

pub use exhaustive::{exhaustive_decode, EXHAUSTIVE_BUDGET};
pub use labelsync::labelsync_beam;
pub use rescore::rescore_nbest;
pub use scorers::{CtcScorer, DecoderScorer, LmScorer};
pub use timesync::{delayed_fusion_beam, timesync_ctc_beam};

use std::any::Any;
use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::hypothesis::{NBestList, ScorerWeights};

/// Opaque per-hypothesis scorer state; cloning is a reference-count bump.
pub type ScorerState = Arc<dyn Any + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScorerKind {
    DecoderAm,
    DecoderLm,
    CtcPrefix,
    Ngram,
    Table,
}

impl ScorerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DecoderAm => "decoder_am",
            Self::DecoderLm => "decoder_lm",
            Self::CtcPrefix => "ctc_prefix",
            Self::Ngram => "ngram",
            Self::Table => "table",
        }
    }
}

/// Incremental label scorer. Scores are log-probability increments, so a
/// hypothesis's component is the sum of the increments along its labels.
pub trait LabelScorer: Send + Sync {
    fn init(&self) -> Result<ScorerState>;

    /// Increment for appending each candidate (EOS included) to the state's prefix.
    fn score(&self, state: &ScorerState, candidates: &[usize]) -> Result<Vec<f64>>;

    fn advance(&self, state: &ScorerState, label: usize) -> Result<ScorerState>;

    /// Labels this scorer can ever give finite score; `None` means all.
    fn support(&self) -> Option<Vec<bool>> {
        None
    }

    /// Total score of a complete sequence (ending in EOS). The default walks
    /// the incremental interface; implementations override it with an
    /// independent whole-sequence computation.
    fn sequence_score(&self, labels: &[usize]) -> Result<f64> {
        let mut state = self.init()?;
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            total += self.score(&state, &[l])?[0];
            if i + 1 < labels.len() {
                state = self.advance(&state, l)?;
            }
        }
        Ok(total)
    }
}

pub(crate) fn downcast<T: Any + Send + Sync>(state: &ScorerState) -> Result<&T> {
    state
        .downcast_ref::<T>()
        .ok_or_else(|| Error::arg("scorer state of the wrong type"))
}

/// A named scorer taking part in a decode.
pub struct ScorerHandle<'a> {
    pub name: String,
    pub kind: ScorerKind,
    pub scorer: Box<dyn LabelScorer + 'a>,
}

impl<'a> ScorerHandle<'a> {
    pub fn new(name: impl Into<String>, kind: ScorerKind, scorer: impl LabelScorer + 'a) -> Self {
        Self { name: name.into(), kind, scorer: Box::new(scorer) }
    }
}

impl std::fmt::Debug for ScorerHandle<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScorerHandle").field("name", &self.name).field("kind", &self.kind).finish()
    }
}

/// Checks names and weights; returns indices of scorers with nonzero weight.
pub(crate) fn active_scorers(scorers: &[ScorerHandle<'_>], weights: &ScorerWeights) -> Result<Vec<usize>> {
    if scorers.is_empty() {
        return Err(Error::arg("no scorer given"));
    }
    let mut names = BTreeSet::new();
    for s in scorers {
        if !names.insert(s.name.as_str()) {
            return Err(Error::arg(format!("duplicate scorer name {:?}", s.name)));
        }
    }
    if let Some(unknown) = weights.weights.keys().find(|k| !names.contains(k.as_str())) {
        return Err(Error::arg(format!("weight given for unknown scorer {unknown:?}")));
    }
    let active: Vec<usize> = (0..scorers.len()).filter(|&i| weights.weight(&scorers[i].name) != 0.0).collect();
    if active.is_empty() {
        return Err(Error::arg("every scorer has weight zero"));
    }
    Ok(active)
}

/// Counters of one decode (or a sum over several).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeStats {
    /// Candidate scorings, summed over scorers.
    pub scorer_evals: u64,
    /// Largest number of hypotheses kept after a pruning step.
    pub peak_live_hyps: usize,
    /// Largest number of candidates scored in one step (memory proxy).
    pub peak_candidates: usize,
    pub wall_time: Duration,
    pub audio_secs: f64,
}

impl DecodeStats {
    /// Wall time over audio duration; `None` without audio.
    pub fn rtf(&self) -> Option<f64> {
        (self.audio_secs > 0.0).then(|| self.wall_time.as_secs_f64() / self.audio_secs)
    }

    /// Sums counts and times, keeps the larger peaks.
    pub fn merge(&mut self, other: &DecodeStats) {
        self.scorer_evals += other.scorer_evals;
        self.peak_live_hyps = self.peak_live_hyps.max(other.peak_live_hyps);
        self.peak_candidates = self.peak_candidates.max(other.peak_candidates);
        self.wall_time += other.wall_time;
        self.audio_secs += other.audio_secs;
    }

    pub(crate) fn observe(&mut self, live: usize, candidates: usize) {
        self.peak_live_hyps = self.peak_live_hyps.max(live);
        self.peak_candidates = self.peak_candidates.max(candidates);
    }
}

/// Result of a decode.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub nbest: NBestList,
    pub stats: DecodeStats,
}

impl Decoded {
    pub fn with_audio_secs(mut self, secs: f64) -> Self {
        self.stats.audio_secs = secs;
        self
    }
}
