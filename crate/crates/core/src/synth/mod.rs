//! Synthetic posteriorgram corpora and adversarial oscillation scenarios.
//!
//! Transcripts come from a small word-bigram Markov language over an
//! in-repo word list. Each token is rendered as a few peaked frames
//! separated by blank frames; a fraction of the tokens is "confused", i.e.
//! rendered as a mix leaning towards a random distractor, which only
//! language knowledge can undo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{retokenize, TableLm};
use crate::posteriorgram::{Posteriorgram, DEFAULT_FRAME_MS};
use crate::vocab::Vocabulary;

const WORDS: &str = include_str!("words.txt");

/// Weight of the distractor in a confused frame; the target keeps the rest.
const DISTRACTOR_MIX: f64 = 0.55;

/// Rounds of the two-word loop before the oscillation LM lets go.
pub const LOOP_REPEATS: usize = 4;

/// The shipped word list.
pub fn default_words() -> Vec<String> {
    WORDS.lines().map(str::trim).filter(|w| !w.is_empty()).map(str::to_owned).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Seed for utterance sampling and rendering.
    pub seed: u64,
    /// Seed of the word-bigram language (shared by corpora and LM text).
    pub language_seed: u64,
    pub words: Vec<String>,
    /// Words per utterance, inclusive.
    pub utt_len: (usize, usize),
    /// Frames per token, inclusive.
    pub frames_per_label: (usize, usize),
    /// Blank frames before each token and after the last, inclusive.
    pub gap_frames: (usize, usize),
    /// Off-target mass per frame, and the probability that a token is confused.
    pub epsilon: f64,
    /// Successors per word in the Markov language.
    pub branching: usize,
    pub frame_duration_ms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            language_seed: 1234,
            words: default_words(),
            utt_len: (4, 10),
            frames_per_label: (2, 3),
            gap_frames: (0, 2),
            epsilon: 0.1,
            branching: 6,
            frame_duration_ms: DEFAULT_FRAME_MS,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (usize, usize)| lo <= hi;
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::arg(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        if !range_ok(self.utt_len) || !range_ok(self.frames_per_label) || !range_ok(self.gap_frames) {
            return Err(Error::arg("synthesis ranges must satisfy lo <= hi"));
        }
        if self.utt_len.0 == 0 || self.frames_per_label.0 == 0 {
            return Err(Error::arg("utterance length and frames per label must be at least 1"));
        }
        if self.words.len() < 2 || self.branching == 0 {
            return Err(Error::arg("need at least two words and a positive branching factor"));
        }
        if self.frame_duration_ms <= 0.0 {
            return Err(Error::arg("frame duration must be positive"));
        }
        Ok(())
    }

    /// Specials followed by the word list.
    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::from_words(&self.words)
    }
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over a mixed key
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_weighted(rng: &mut ChaCha8Rng, choices: &[(usize, f64)]) -> usize {
    let total: f64 = choices.iter().map(|c| c.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(w, p) in choices {
        if u < p {
            return w;
        }
        u -= p;
    }
    choices.last().unwrap().0
}

/// Word-bigram Markov chain: every word (and the sentence start) has a few
/// weighted successors.
#[derive(Debug, Clone, PartialEq)]
pub struct Language {
    start: Vec<(usize, f64)>,
    next: Vec<Vec<(usize, f64)>>,
}

impl Language {
    pub fn new(n_words: usize, branching: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = branching.min(n_words);
        let succ = |rng: &mut ChaCha8Rng| {
            let picks = rand::seq::index::sample(rng, n_words, k);
            picks.into_iter().map(|w| (w, 0.2 + rng.random::<f64>())).collect::<Vec<_>>()
        };
        let start = succ(&mut rng);
        let next = (0..n_words).map(|_| succ(&mut rng)).collect();
        Self { start, next }
    }

    pub fn from_config(cfg: &SynthConfig) -> Self {
        Self::new(cfg.words.len(), cfg.branching, cfg.language_seed)
    }

    /// Word indices of a sentence of `len` words.
    pub fn sample(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let choices = if i == 0 { &self.start } else { &self.next[out[i - 1]] };
            out.push(sample_weighted(rng, choices));
        }
        out
    }
}

/// One synthetic utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub pg: Posteriorgram,
    pub reference: String,
    pub labels: Vec<usize>,
}

/// Frame renderer over a vocabulary: clean rows put `1 - ε` on the target
/// and spread `ε` evenly over the other emittable ids (blank and labels).
struct Renderer {
    emittable: Vec<usize>,
    width: usize,
    epsilon: f64,
}

impl Renderer {
    fn new(vocab: &Vocabulary, epsilon: f64) -> Self {
        let emittable = (0..vocab.len()).filter(|&i| i != vocab.bos_id() && i != vocab.eos_id()).collect();
        Self { emittable, width: vocab.len(), epsilon }
    }

    fn clean(&self, target: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.width];
        let other = self.epsilon / (self.emittable.len() - 1) as f64;
        for &i in &self.emittable {
            row[i] = other;
        }
        row[target] = 1.0 - self.epsilon;
        row
    }

    fn confused(&self, target: usize, distractor: usize) -> Vec<f64> {
        let a = self.clean(distractor);
        let b = self.clean(target);
        a.iter().zip(&b).map(|(x, y)| DISTRACTOR_MIX * x + (1.0 - DISTRACTOR_MIX) * y).collect()
    }
}

struct RenderSpec {
    frames_per_label: (usize, usize),
    gap_frames: (usize, usize),
    confusion: f64,
    frame_duration_ms: f64,
}

fn render(
    rng: &mut ChaCha8Rng,
    vocab: &Vocabulary,
    renderer: &Renderer,
    tokens: &[usize],
    spec: &RenderSpec,
) -> Result<Posteriorgram> {
    let labels: Vec<usize> = vocab.label_ids();
    let blank = vocab.blank_id();
    let mut rows = Vec::new();
    for (i, &tok) in tokens.iter().enumerate() {
        let mut gap = rng.random_range(spec.gap_frames.0..=spec.gap_frames.1);
        if i > 0 && tokens[i - 1] == tok {
            gap = gap.max(1);
        }
        rows.extend((0..gap).map(|_| renderer.clean(blank)));
        let d = rng.random_range(spec.frames_per_label.0..=spec.frames_per_label.1);
        let confused = spec.confusion > 0.0 && rng.random::<f64>() < spec.confusion;
        let row = if confused {
            let mut distractor = tok;
            while distractor == tok {
                distractor = labels[rng.random_range(0..labels.len())];
            }
            renderer.confused(tok, distractor)
        } else {
            renderer.clean(tok)
        };
        rows.extend(std::iter::repeat_n(row, d));
    }
    let tail = rng.random_range(spec.gap_frames.0..=spec.gap_frames.1).max(usize::from(tokens.is_empty()));
    rows.extend((0..tail).map(|_| renderer.clean(blank)));
    let mut pg = Posteriorgram::from_probs(&rows)?;
    pg = Posteriorgram::with_frame_duration(pg.as_slice().to_vec(), pg.frames(), pg.labels(), spec.frame_duration_ms)?;
    Ok(pg)
}

/// Token ids of a transcript; every piece must be in the vocabulary.
fn tokenize(vocab: &Vocabulary, text: &str) -> Result<Vec<usize>> {
    let ids = retokenize(vocab, text)?;
    if ids.iter().any(|&i| Some(i) == vocab.unk_id()) {
        return Err(Error::Unsegmentable(text.to_owned()));
    }
    Ok(ids)
}

/// `n_utts` utterances, deterministic per seed; utterance `i` uses its own
/// derived seed, so generation order does not matter.
pub fn gen_corpus(cfg: &SynthConfig, n_utts: usize) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    if n_utts == 0 {
        return Err(Error::arg("need at least one utterance"));
    }
    let vocab = cfg.vocab()?;
    let lang = Language::from_config(cfg);
    let renderer = Renderer::new(&vocab, cfg.epsilon);
    let spec = RenderSpec {
        frames_per_label: cfg.frames_per_label,
        gap_frames: cfg.gap_frames,
        confusion: cfg.epsilon,
        frame_duration_ms: cfg.frame_duration_ms,
    };
    (0..n_utts)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, i as u64));
            let len = rng.random_range(cfg.utt_len.0..=cfg.utt_len.1);
            let words: Vec<&str> = lang.sample(&mut rng, len).into_iter().map(|w| cfg.words[w].as_str()).collect();
            let reference = words.join(" ");
            let labels = tokenize(&vocab, &reference)?;
            let pg = render(&mut rng, &vocab, &renderer, &labels, &spec)?;
            Ok(Utterance { id: format!("utt{i:05}"), pg, reference, labels })
        })
        .collect()
}

/// LM training sentences from the same language, sampled independently of
/// any corpus.
pub fn gen_lm_text(cfg: &SynthConfig, n_sentences: usize) -> Result<Vec<String>> {
    cfg.validate()?;
    let lang = Language::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, 0));
    Ok((0..n_sentences)
        .map(|_| {
            let len = rng.random_range(cfg.utt_len.0..=cfg.utt_len.1);
            let words: Vec<&str> = lang.sample(&mut rng, len).into_iter().map(|w| cfg.words[w].as_str()).collect();
            words.join(" ")
        })
        .collect())
}

/// A benign utterance paired with an LM that, once the reference is
/// complete, prefers looping over two extra words to ending the sentence.
/// Only after `LOOP_REPEATS` rounds of the loop does EOS become likely.
#[derive(Debug, Clone)]
pub struct OscillationScenario {
    pub vocab: Vocabulary,
    pub pg: Posteriorgram,
    pub lm: TableLm,
    pub reference: Vec<usize>,
    /// The two words of the repeating loop.
    pub loop_words: (usize, usize),
}

/// Builds the oscillation scenario for `seed`: the LM follows the
/// reference with probability 0.9 per word, then puts 0.9 on the first
/// loop word (EOS 0.001), inside the loop 0.95 on the other loop word
/// (EOS 1e-4), and releases EOS (0.9) once the loop has been repeated
/// `LOOP_REPEATS` times. The posteriorgram is clean (noise 0.02, no confusion, at
/// least two frames per token).
pub fn gen_oscillation_scenario(cfg: &SynthConfig, seed: u64) -> Result<OscillationScenario> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let lang = Language::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, 0));
    let len = rng.random_range(cfg.utt_len.0.max(2)..=cfg.utt_len.1.max(2));
    let words = lang.sample(&mut rng, len);
    let reference = tokenize(&vocab, &words.iter().map(|&w| cfg.words[w].as_str()).collect::<Vec<_>>().join(" "))?;

    let free: Vec<usize> = vocab.label_ids().into_iter().filter(|l| !reference.contains(l) && Some(*l) != vocab.unk_id() && *l != vocab.eos_id()).collect();
    if free.len() < 2 {
        return Err(Error::arg("word list too small for a loop outside the reference"));
    }
    let picks = rand::seq::index::sample(&mut rng, free.len(), 2);
    let (x, y) = (free[picks.index(0)], free[picks.index(1)]);

    let eos = vocab.eos_id();
    let bos = vocab.bos_id();
    let mut lm = TableLm::uniform(vocab.clone());
    for i in 0..reference.len() {
        let mut ctx = vec![bos];
        ctx.extend_from_slice(&reference[..i]);
        lm.insert(ctx, TableLm::spread(&vocab, &[(reference[i], 0.9)])?)?;
    }
    let mut trigger = vec![bos];
    trigger.extend_from_slice(&reference);
    lm.insert(trigger.clone(), TableLm::spread(&vocab, &[(x, 0.9), (eos, 1e-3)])?)?;
    lm.insert(vec![x], TableLm::spread(&vocab, &[(y, 0.95), (eos, 1e-4)])?)?;
    lm.insert(vec![y], TableLm::spread(&vocab, &[(x, 0.95), (eos, 1e-4)])?)?;
    let mut release = trigger.clone();
    for _ in 0..LOOP_REPEATS {
        release.extend([x, y]);
    }
    lm.insert(release, TableLm::spread(&vocab, &[(eos, 0.9)])?)?;

    let spec = RenderSpec {
        frames_per_label: (cfg.frames_per_label.0.max(2), cfg.frames_per_label.1.max(2)),
        gap_frames: (1, 2),
        confusion: 0.0,
        frame_duration_ms: cfg.frame_duration_ms,
    };
    let pg = render(&mut rng, &vocab, &Renderer::new(&vocab, 0.02), &reference, &spec)?;
    Ok(OscillationScenario { vocab, pg, lm, reference, loop_words: (x, y) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::greedy_decode;
    use crate::eval::align;
    use crate::hypothesis::ScorerWeights;
    use crate::search::{labelsync_beam, ScorerHandle, ScorerKind};

    fn cfg(epsilon: f64, seed: u64) -> SynthConfig {
        SynthConfig { epsilon, seed, ..Default::default() }
    }

    #[test]
    fn word_list() {
        let w = default_words();
        assert_eq!(w.len(), 100);
        assert!(cfg(0.0, 0).vocab().is_ok());
    }

    #[test]
    fn clean_corpus_decodes_greedily() {
        let c = cfg(0.0, 3);
        let v = c.vocab().unwrap();
        for u in gen_corpus(&c, 30).unwrap() {
            u.pg.validate().unwrap();
            assert_eq!(greedy_decode(&u.pg, v.blank_id()), u.labels);
            assert_eq!(v.detokenize(&u.labels), u.reference);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_corpus(&cfg(0.3, 9), 5).unwrap();
        let b = gen_corpus(&cfg(0.3, 9), 5).unwrap();
        assert_eq!(a, b);
        let c = gen_corpus(&cfg(0.3, 10), 5).unwrap();
        assert_ne!(a, c);
        assert_eq!(gen_lm_text(&cfg(0.3, 1), 4).unwrap(), gen_lm_text(&cfg(0.3, 1), 4).unwrap());
    }

    #[test]
    fn noisy_rows_stay_normalized_and_confuse_greedy() {
        let c = cfg(0.3, 4);
        let v = c.vocab().unwrap();
        let corpus = gen_corpus(&c, 40).unwrap();
        let mut errors = 0;
        for u in &corpus {
            u.pg.validate().unwrap();
            errors += align(&u.labels, &greedy_decode(&u.pg, v.blank_id())).errors();
        }
        assert!(errors > 0);
    }

    #[test]
    fn config_validation() {
        assert!(gen_corpus(&cfg(1.0, 0), 1).is_err());
        assert!(gen_corpus(&cfg(0.1, 0), 0).is_err());
        let bad = SynthConfig { utt_len: (5, 2), ..Default::default() };
        assert!(bad.validate().is_err());
        let unknown = SynthConfig { words: vec!["a".into(), "b c".into()], ..Default::default() };
        assert!(unknown.vocab().is_err());
    }

    #[test]
    fn oscillation_scenario_ordering() {
        let c = SynthConfig::default();
        for seed in 0..5 {
            let sc = gen_oscillation_scenario(&c, seed).unwrap();
            let v = &sc.vocab;
            let max_len = ScorerWeights::new([("lm", 1.0)]).unwrap().max_len(sc.pg.frames());
            let lm_only = [ScorerHandle::lm("lm", ScorerKind::Table, &sc.lm, v).unwrap()];
            let standalone = labelsync_beam(&lm_only, &ScorerWeights::new([("lm", 1.0)]).unwrap(), v, 4, max_len).unwrap();
            let hyp = standalone.nbest.best().unwrap().transcript_labels(v.eos_id()).to_vec();
            let ins_standalone = align(&sc.reference, &hyp).insertions;
            assert_eq!(ins_standalone, 2 * LOOP_REPEATS);
            assert!(hyp.len() <= max_len);

            let joint_h = [
                ScorerHandle::lm("lm", ScorerKind::Table, &sc.lm, v).unwrap(),
                ScorerHandle::ctc("ctc", &sc.pg, v).unwrap(),
            ];
            let w = ScorerWeights::new([("lm", 1.0), ("ctc", 1.0)]).unwrap();
            let joint = labelsync_beam(&joint_h, &w, v, 4, max_len).unwrap();
            assert_eq!(joint.nbest.best().unwrap().transcript_labels(v.eos_id()), sc.reference.as_slice());
            assert_eq!(greedy_decode(&sc.pg, v.blank_id()), sc.reference);
        }
    }
}
