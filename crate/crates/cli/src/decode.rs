//! Model loading and per-utterance decoding shared by `decode` and `bench`.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use asrfuse::attn::{adapter_apply, AdapterConfig, DecoderModel, DecoderWeights, Downsample, InterfaceConfig};
use asrfuse::ctc::greedy_decode;
use asrfuse::eval::{text_alignment, AlignmentCounts, NormalizeMode};
use asrfuse::lm::{LanguageModel, NGramModel, TableLm};
use asrfuse::search::{delayed_fusion_beam, labelsync_beam, timesync_ctc_beam, DecodeStats, Decoded, ScorerHandle, ScorerKind};
use asrfuse::{EncoderOutput, Hypothesis, NBestList, Posteriorgram, ScorerWeights, Vocabulary};
use rayon::prelude::*;

use crate::config::{LmKind, RunConfig, Strategy};
use crate::corpus;

pub fn load_lm(path: &Path, kind: LmKind, vocab: &Vocabulary) -> Result<Box<dyn LanguageModel>> {
    let ctx = || format!("reading LM {}", path.display());
    Ok(match kind {
        LmKind::Ngram => Box::new(NGramModel::read(path, vocab).with_context(ctx)?),
        LmKind::Table => Box::new(TableLm::read(path, vocab).with_context(ctx)?),
    })
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::read(path).with_context(|| format!("reading vocabulary {}", path.display()))
}

struct DecoderSetup {
    model: DecoderModel,
    interface: InterfaceConfig,
    weight: f64,
    audio: bool,
    concat: usize,
}

/// Everything loaded once per run.
pub struct Decoder {
    pub cfg: RunConfig,
    pub vocab: Vocabulary,
    lm: Option<(Box<dyn LanguageModel>, f64)>,
    decoder: Option<DecoderSetup>,
}

impl Decoder {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = read_vocab(&cfg.vocab_path())?;
        let lm = match &cfg.lm {
            Some(l) => {
                let lm_vocab = match &l.vocab {
                    Some(p) => read_vocab(p)?,
                    None => vocab.clone(),
                };
                Some((load_lm(&l.path, l.kind, &lm_vocab)?, l.weight))
            }
            None => None,
        };
        let decoder = match &cfg.decoder {
            Some(d) => {
                let weights = DecoderWeights::read(&d.weights)
                    .with_context(|| format!("reading decoder weights {}", d.weights.display()))?;
                let model = DecoderModel::new(weights, &vocab)?;
                let prompt = d
                    .prompt
                    .iter()
                    .map(|t| vocab.id(t).with_context(|| format!("prompt token {t:?} not in the vocabulary")))
                    .collect::<Result<Vec<_>>>()?;
                Some(DecoderSetup {
                    model,
                    interface: d.interface(prompt)?,
                    weight: d.weight,
                    audio: d.audio,
                    concat: d.concat,
                })
            }
            None => None,
        };
        Ok(Self { cfg, vocab, lm, decoder })
    }

    fn weights(&self) -> Result<ScorerWeights> {
        let mut w = vec![("ctc", self.cfg.ctc_weight)];
        if let Some((_, lw)) = &self.lm {
            w.push(("lm", *lw));
        }
        if let Some(d) = &self.decoder {
            w.push(("decoder", d.weight));
        }
        Ok(ScorerWeights::new(w)?.with_length_norm(self.cfg.length_norm).with_max_len_factor(self.cfg.max_len_factor))
    }

    fn audio(&self, d: &DecoderSetup, pg: &Posteriorgram) -> Result<Option<EncoderOutput>> {
        if !d.audio {
            return Ok(None);
        }
        let enc = EncoderOutput::from_posteriorgram(pg);
        let downsample = match self.cfg.tau {
            Some(tau) => Downsample::CtcCompress(tau),
            None => Downsample::Concat(d.concat),
        };
        let adapter = d.model.weights().adapter.as_ref();
        let cfg = AdapterConfig { downsample, project: adapter.is_some() };
        Ok(Some(adapter_apply(&enc, &cfg, Some(pg), adapter)?))
    }

    /// Decodes one posteriorgram with the configured strategy.
    pub fn decode(&self, pg: &Posteriorgram) -> Result<Decoded> {
        if pg.labels() != self.vocab.len() {
            bail!("posteriorgram has {} labels, vocabulary {}", pg.labels(), self.vocab.len());
        }
        let blank = self.vocab.blank_id();
        let decoded = match self.cfg.strategy {
            Strategy::CtcGreedy => {
                let start = std::time::Instant::now();
                let mut labels = greedy_decode(pg, blank);
                let score = asrfuse::ctc::forward_logprob(pg, &labels, blank)?;
                labels.push(self.vocab.eos_id());
                let hyp = Hypothesis {
                    labels,
                    score_components: [("ctc".to_string(), score)].into(),
                    combined_score: score,
                    finished: true,
                };
                let stats = DecodeStats { wall_time: start.elapsed(), ..Default::default() };
                Decoded { nbest: NBestList::from_unsorted(vec![hyp]), stats }
            }
            Strategy::CtcBeam => {
                let opt = self.cfg.optimizations()?.apply(pg, blank)?;
                let (lm, w) = match &self.lm {
                    Some((lm, w)) => (Some(lm.as_ref()), *w),
                    None => (None, 0.0),
                };
                timesync_ctc_beam(&opt, &self.vocab, lm, w, self.cfg.beam)?
            }
            Strategy::Delayed => {
                let opt = self.cfg.optimizations()?.apply(pg, blank)?;
                let (lm, w) = self.lm.as_ref().context("delayed fusion needs an LM")?;
                delayed_fusion_beam(&opt, &self.vocab, lm.as_ref(), *w, self.cfg.beam)?
            }
            Strategy::Joint => {
                let opt = self.cfg.optimizations()?.apply(pg, blank)?;
                let mut scorers = vec![ScorerHandle::ctc("ctc", &opt, &self.vocab)?];
                if let Some((lm, _)) = &self.lm {
                    let kind = match self.cfg.lm.as_ref().map(|l| l.kind) {
                        Some(LmKind::Table) => ScorerKind::Table,
                        _ => ScorerKind::Ngram,
                    };
                    scorers.push(ScorerHandle::lm("lm", kind, lm.as_ref(), &self.vocab)?);
                }
                if let Some(d) = &self.decoder {
                    let audio = self.audio(d, pg)?;
                    scorers.push(ScorerHandle::decoder("decoder", &d.model, d.interface.clone(), audio, &self.vocab)?);
                }
                let weights = self.weights()?;
                labelsync_beam(&scorers, &weights, &self.vocab, self.cfg.beam, weights.max_len(pg.frames()))?
            }
        };
        let mut decoded = decoded.with_audio_secs(pg.duration_secs());
        decoded.nbest.truncate(self.cfg.nbest);
        Ok(decoded)
    }

    pub fn transcript(&self, nbest: &NBestList) -> String {
        nbest
            .best()
            .map(|h| self.vocab.detokenize(h.transcript_labels(self.vocab.eos_id())))
            .unwrap_or_default()
    }

    /// Decodes every utterance of the corpus on `jobs` threads; results come
    /// back in id order.
    pub fn decode_corpus(&self, ids: &[String]) -> Result<Vec<(String, Decoded)>> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(self.cfg.jobs).build()?;
        pool.install(|| {
            ids.par_iter()
                .map(|id| {
                    let pg = corpus::read_pg(&self.cfg.corpus, id)?;
                    let d = self.decode(&pg).with_context(|| format!("utterance {id}: decoding failed"))?;
                    Ok((id.clone(), d))
                })
                .collect()
        })
    }
}

/// Corpus WER of `hyps` against the references, matched by id.
pub fn score<'a>(
    refs: &std::collections::BTreeMap<String, String>,
    hyps: impl IntoIterator<Item = (&'a str, &'a str)>,
    mode: NormalizeMode,
) -> Result<AlignmentCounts> {
    let mut total = AlignmentCounts::default();
    let mut n = 0;
    for (id, hyp) in hyps {
        let r = refs.get(id).with_context(|| format!("no reference for utterance {id}"))?;
        total += text_alignment(r, hyp, mode);
        n += 1;
    }
    if n == 0 || total.ref_len == 0 {
        bail!("nothing to score");
    }
    Ok(total)
}

pub fn format_counts(c: &AlignmentCounts) -> String {
    let mut s = String::new();
    let wer = c.wer().unwrap_or(0.0) * 100.0;
    let _ = write!(
        s,
        "WER {wer:.2}% (S={} D={} I={} N={})",
        c.substitutions, c.deletions, c.insertions, c.ref_len
    );
    s
}

pub fn format_stats(s: &DecodeStats, utterances: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "utterances\t{utterances}");
    let _ = writeln!(out, "scorer_evals\t{}", s.scorer_evals);
    let _ = writeln!(out, "peak_live_hyps\t{}", s.peak_live_hyps);
    let _ = writeln!(out, "peak_candidates\t{}", s.peak_candidates);
    let _ = writeln!(out, "audio_secs\t{:.3}", s.audio_secs);
    let _ = writeln!(out, "wall_secs\t{:.6}", s.wall_time.as_secs_f64());
    let _ = writeln!(out, "rtf\t{:.6}", s.rtf().unwrap_or(0.0));
    out
}
