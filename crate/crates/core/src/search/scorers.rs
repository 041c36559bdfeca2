use std::sync::Arc;

use super::{downcast, LabelScorer, ScorerHandle, ScorerKind, ScorerState};
use crate::attn::{DecoderModel, IncrementalState, InterfaceConfig};
use crate::ctc::{forward_logprob, Candidate, CtcPrefixScorer, PrefixState};
use crate::error::{Error, Result};
use crate::lm::{lm_logprob, LanguageModel};
use crate::posteriorgram::{EncoderOutput, Posteriorgram};
use crate::vocab::Vocabulary;

fn split_eos(labels: &[usize], eos: usize) -> Result<&[usize]> {
    match labels.split_last() {
        Some((&last, body)) if last == eos => Ok(body),
        _ => Err(Error::arg("complete sequence must end with EOS")),
    }
}

/// CTC prefix scores of one posteriorgram.
pub struct CtcScorer<'a> {
    prefix: CtcPrefixScorer<'a>,
    eos: usize,
    support: Vec<bool>,
}

impl<'a> CtcScorer<'a> {
    pub fn new(pg: &'a Posteriorgram, vocab: &Vocabulary) -> Result<Self> {
        if pg.labels() != vocab.len() {
            return Err(Error::Shape(format!(
                "posteriorgram has {} labels, vocabulary {}",
                pg.labels(),
                vocab.len()
            )));
        }
        let mut support = pg.active_labels();
        for id in [vocab.blank_id(), vocab.bos_id(), vocab.eos_id()] {
            support[id] = false;
        }
        Ok(Self { prefix: CtcPrefixScorer::new(pg, vocab.blank_id())?, eos: vocab.eos_id(), support })
    }
}

impl LabelScorer for CtcScorer<'_> {
    fn init(&self) -> Result<ScorerState> {
        Ok(Arc::new(self.prefix.initial_state()))
    }

    fn score(&self, state: &ScorerState, candidates: &[usize]) -> Result<Vec<f64>> {
        let st: &PrefixState = downcast(state)?;
        let cands: Vec<Candidate> = candidates
            .iter()
            .map(|&c| if c == self.eos { Candidate::End } else { Candidate::Label(c) })
            .collect();
        let base = st.prefix_logprob();
        let psi = self.prefix.candidate_scores(st, &cands)?;
        Ok(psi
            .into_iter()
            .map(|p| if base == f64::NEG_INFINITY { f64::NEG_INFINITY } else { p - base })
            .collect())
    }

    fn advance(&self, state: &ScorerState, label: usize) -> Result<ScorerState> {
        Ok(Arc::new(self.prefix.extend(downcast(state)?, label)?))
    }

    fn support(&self) -> Option<Vec<bool>> {
        Some(self.support.clone())
    }

    fn sequence_score(&self, labels: &[usize]) -> Result<f64> {
        forward_logprob(self.prefix.posteriorgram(), split_eos(labels, self.eos)?, self.prefix.blank())
    }
}

/// Any [`LanguageModel`] over the decoding vocabulary.
pub struct LmScorer<'a> {
    model: &'a dyn LanguageModel,
    eos: usize,
}

impl<'a> LmScorer<'a> {
    pub fn new(model: &'a dyn LanguageModel, vocab: &Vocabulary) -> Result<Self> {
        if model.vocab().tokens() != vocab.tokens() {
            return Err(Error::Vocabulary(
                "language model vocabulary differs from the decoding vocabulary; use delayed fusion".into(),
            ));
        }
        Ok(Self { model, eos: vocab.eos_id() })
    }
}

impl LabelScorer for LmScorer<'_> {
    fn init(&self) -> Result<ScorerState> {
        Ok(Arc::new(Vec::<usize>::new()))
    }

    fn score(&self, state: &ScorerState, candidates: &[usize]) -> Result<Vec<f64>> {
        let history: &Vec<usize> = downcast(state)?;
        let dist = self.model.next_log_probs(history);
        Ok(candidates.iter().map(|&c| dist[c]).collect())
    }

    fn advance(&self, state: &ScorerState, label: usize) -> Result<ScorerState> {
        let mut history: Vec<usize> = downcast::<Vec<usize>>(state)?.clone();
        history.push(label);
        Ok(Arc::new(history))
    }

    fn sequence_score(&self, labels: &[usize]) -> Result<f64> {
        Ok(lm_logprob(self.model, split_eos(labels, self.eos)?))
    }
}

/// Attention decoder, with audio (acoustic model) or without (language model).
pub struct DecoderScorer<'a> {
    model: &'a DecoderModel,
    config: InterfaceConfig,
    audio: Option<EncoderOutput>,
    bos: usize,
    eos: usize,
}

impl<'a> DecoderScorer<'a> {
    /// `audio` must already be adapted to the decoder width.
    pub fn new(
        model: &'a DecoderModel,
        config: InterfaceConfig,
        audio: Option<EncoderOutput>,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if model.weights().hparams.vocab != vocab.len() {
            return Err(Error::Shape("decoder output size differs from the vocabulary".into()));
        }
        config.validate()?;
        Ok(Self { model, config, audio, bos: vocab.bos_id(), eos: vocab.eos_id() })
    }
}

impl LabelScorer for DecoderScorer<'_> {
    fn init(&self) -> Result<ScorerState> {
        let st = self.model.init_state(&self.config, self.audio.as_ref())?;
        Ok(Arc::new(self.model.step(&st, self.bos)?.1))
    }

    fn score(&self, state: &ScorerState, candidates: &[usize]) -> Result<Vec<f64>> {
        let st: &IncrementalState = downcast(state)?;
        let dist = st.last_log_probs().ok_or_else(|| Error::arg("decoder state has no distribution"))?;
        Ok(candidates.iter().map(|&c| dist[c]).collect())
    }

    fn advance(&self, state: &ScorerState, label: usize) -> Result<ScorerState> {
        Ok(Arc::new(self.model.step(downcast(state)?, label)?.1))
    }

    fn sequence_score(&self, labels: &[usize]) -> Result<f64> {
        split_eos(labels, self.eos)?;
        let mut seq = vec![self.bos];
        seq.extend_from_slice(labels);
        Ok(-self.model.seq_cross_entropy(&self.config, self.audio.as_ref(), &seq)?)
    }
}

impl<'a> ScorerHandle<'a> {
    pub fn ctc(name: impl Into<String>, pg: &'a Posteriorgram, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self::new(name, ScorerKind::CtcPrefix, CtcScorer::new(pg, vocab)?))
    }

    /// `kind` is [`ScorerKind::Ngram`] or [`ScorerKind::Table`].
    pub fn lm(
        name: impl Into<String>,
        kind: ScorerKind,
        model: &'a dyn LanguageModel,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if !matches!(kind, ScorerKind::Ngram | ScorerKind::Table) {
            return Err(Error::arg(format!("{} is not a language-model kind", kind.as_str())));
        }
        Ok(Self::new(name, kind, LmScorer::new(model, vocab)?))
    }

    /// Decoder as acoustic model (`audio` given) or as language model
    /// (`audio` absent, i.e. the same decoder without the encoder output).
    pub fn decoder(
        name: impl Into<String>,
        model: &'a DecoderModel,
        config: InterfaceConfig,
        audio: Option<EncoderOutput>,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let kind = if audio.is_some() { ScorerKind::DecoderAm } else { ScorerKind::DecoderLm };
        Ok(Self::new(name, kind, DecoderScorer::new(model, config, audio, vocab)?))
    }
}
