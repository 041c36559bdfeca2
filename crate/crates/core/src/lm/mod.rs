//! Language models over a [`Vocabulary`]: a trained backoff n-gram, a
//! table-driven model for constructing exact or adversarial fixtures,
//! perplexity, and re-tokenization into another vocabulary.

mod ngram;
mod retokenize;
mod table;

pub use ngram::NGramModel;
pub use retokenize::retokenize;
pub use table::TableLm;

use crate::vocab::Vocabulary;

/// Next-token distributions given a left context. BOS is implicit: the
/// context passed in holds only the labels emitted so far.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// Natural-log distribution indexed by vocabulary id; blank and BOS are `-inf`.
    fn next_log_probs(&self, context: &[usize]) -> &[f64];

    fn logprob(&self, context: &[usize], token: usize) -> f64 {
        self.next_log_probs(context)[token]
    }
}

/// `Σ_s ln p(a_s | BOS, a_1..a_{s-1})` over `seq` followed by EOS.
pub fn lm_logprob<M: LanguageModel + ?Sized>(model: &M, seq: &[usize]) -> f64 {
    let eos = model.vocab().eos_id();
    let body: f64 = (0..seq.len())
        .map(|s| model.logprob(&seq[..s], seq[s]))
        .sum();
    body + model.logprob(seq, eos)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerplexityReport {
    pub sentences: usize,
    /// Scored tokens, one EOS per sentence included.
    pub tokens: usize,
    /// Words (groups starting at word-begin tokens), one EOS per sentence included.
    pub words: usize,
    pub total_logprob: f64,
    pub token_ppl: f64,
    pub word_ppl: f64,
}

/// Pooled perplexity: `exp(-total / count)` with EOS counted once per sentence.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, corpus: &[Vec<usize>]) -> PerplexityReport {
    let vocab = model.vocab();
    let mut total = 0.0;
    let mut tokens = 0;
    let mut words = 0;
    for seq in corpus {
        total += lm_logprob(model, seq);
        tokens += seq.len() + 1;
        words += vocab.words(seq).len() + 1;
    }
    PerplexityReport {
        sentences: corpus.len(),
        tokens,
        words,
        total_logprob: total,
        token_ppl: (-total / tokens as f64).exp(),
        word_ppl: (-total / words as f64).exp(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ten_outcomes() -> (Vocabulary, TableLm) {
        // Nine labels plus EOS.
        let words: Vec<String> = (0..8).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::from_words(&words).unwrap();
        let lm = TableLm::uniform(vocab.clone());
        (vocab, lm)
    }

    #[test]
    fn uniform_sequence_logprob() {
        let (_, lm) = ten_outcomes();
        let lp = lm_logprob(&lm, &[4, 5, 6]);
        assert!((lp - 4.0 * (0.1f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_sequence_is_eos_given_bos() {
        let (vocab, lm) = ten_outcomes();
        assert_eq!(lm_logprob(&lm, &[]), lm.logprob(&[], vocab.eos_id()));
    }

    #[test]
    fn uniform_perplexity_is_outcome_count() {
        let (_, lm) = ten_outcomes();
        let rep = perplexity(&lm, &[vec![4, 5], vec![], vec![9, 9, 9, 3]]);
        assert!((rep.token_ppl - 10.0).abs() < 1e-9);
        assert_eq!(rep.tokens, 9);
        assert_eq!(rep.sentences, 3);
    }

    #[test]
    fn deterministic_model_has_unit_perplexity() {
        let vocab = Vocabulary::from_words(&["a"]).unwrap();
        let (a, eos) = (vocab.id("a").unwrap(), vocab.eos_id());
        let one_hot = |id: usize| {
            let mut d = vec![f64::NEG_INFINITY; vocab.len()];
            d[id] = 0.0;
            d
        };
        let mut lm = TableLm::new(vocab.clone(), one_hot(eos)).unwrap();
        lm.insert(vec![vocab.bos_id()], one_hot(a)).unwrap();
        let rep = perplexity(&lm, &[vec![a], vec![a]]);
        assert_eq!(rep.token_ppl, 1.0);
    }
}
