//! CTC prefix scores for label-synchronous search.
//!
//! For a prefix `g` the state keeps, per frame `t`, the log-probability of
//! the frames `1..=t` collapsing to exactly `g` and ending in a non-blank
//! (`r_nonblank`) or a blank (`r_blank`). The prefix score of `g·c` is the
//! probability that the collapsed output of the whole utterance starts with
//! `g·c`; ending the prefix gives the full-sequence probability of `g`.

use crate::error::{Error, Result};
use crate::logmath::log_add;
use crate::posteriorgram::Posteriorgram;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Candidate {
    Label(usize),
    /// End of sequence: the prefix is the complete output.
    End,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    last: Option<usize>,
    len: usize,
    r_nonblank: Vec<f64>,
    r_blank: Vec<f64>,
    prefix_logprob: f64,
}

impl PrefixState {
    /// `ln P(collapsed output starts with this prefix)`.
    pub fn prefix_logprob(&self) -> f64 {
        self.prefix_logprob
    }

    /// `ln P(collapsed output equals this prefix)`.
    pub fn full_logprob(&self) -> f64 {
        let t = self.r_blank.len() - 1;
        log_add(self.r_nonblank[t], self.r_blank[t])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn last_label(&self) -> Option<usize> {
        self.last
    }

    /// Per-frame forward variables `(nonblank, blank)`.
    pub fn forward_variables(&self) -> (&[f64], &[f64]) {
        (&self.r_nonblank, &self.r_blank)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CtcPrefixScorer<'a> {
    pg: &'a Posteriorgram,
    blank: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(pg: &'a Posteriorgram, blank: usize) -> Result<Self> {
        if blank >= pg.labels() {
            return Err(Error::arg(format!("blank id {blank} outside posteriorgram width {}", pg.labels())));
        }
        Ok(Self { pg, blank })
    }

    pub fn posteriorgram(&self) -> &'a Posteriorgram {
        self.pg
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    /// State of the empty prefix.
    pub fn initial_state(&self) -> PrefixState {
        let frames = self.pg.frames();
        let mut r_blank = Vec::with_capacity(frames);
        let mut acc = 0.0;
        for t in 0..frames {
            acc += self.pg.get(t, self.blank);
            r_blank.push(acc);
        }
        PrefixState {
            last: None,
            len: 0,
            r_nonblank: vec![f64::NEG_INFINITY; frames],
            r_blank,
            prefix_logprob: 0.0,
        }
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label == self.blank {
            return Err(Error::arg("blank cannot be a prefix-score candidate"));
        }
        if label >= self.pg.labels() {
            return Err(Error::arg(format!("label {label} outside posteriorgram width {}", self.pg.labels())));
        }
        Ok(())
    }

    /// Probability mass entering label `c` at frame `t` from the prefix state at `t-1`.
    #[inline]
    fn phi(state: &PrefixState, c: usize, t: usize) -> f64 {
        if state.last == Some(c) {
            state.r_blank[t - 1]
        } else {
            log_add(state.r_blank[t - 1], state.r_nonblank[t - 1])
        }
    }

    /// Log prefix probability for each candidate appended to `state`.
    pub fn candidate_scores(&self, state: &PrefixState, candidates: &[Candidate]) -> Result<Vec<f64>> {
        let frames = self.pg.frames();
        // Shared across candidates other than a repeat of the last label.
        let phi_any: Vec<f64> = (1..frames)
            .map(|t| log_add(state.r_blank[t - 1], state.r_nonblank[t - 1]))
            .collect();
        candidates
            .iter()
            .map(|&cand| match cand {
                Candidate::End => Ok(state.full_logprob()),
                Candidate::Label(c) => {
                    self.check_label(c)?;
                    let mut psi = if state.len == 0 {
                        self.pg.get(0, c)
                    } else {
                        f64::NEG_INFINITY
                    };
                    let repeat = state.last == Some(c);
                    for t in 1..frames {
                        let phi = if repeat { state.r_blank[t - 1] } else { phi_any[t - 1] };
                        if phi > f64::NEG_INFINITY {
                            psi = log_add(psi, phi + self.pg.get(t, c));
                        }
                    }
                    Ok(psi)
                }
            })
            .collect()
    }

    /// State for `prefix·label`.
    pub fn extend(&self, state: &PrefixState, label: usize) -> Result<PrefixState> {
        self.check_label(label)?;
        let frames = self.pg.frames();
        let mut r_nonblank = vec![f64::NEG_INFINITY; frames];
        let mut r_blank = vec![f64::NEG_INFINITY; frames];
        let mut psi = if state.len == 0 {
            self.pg.get(0, label)
        } else {
            f64::NEG_INFINITY
        };
        r_nonblank[0] = psi;
        for t in 1..frames {
            let phi = Self::phi(state, label, t);
            let y = self.pg.get(t, label);
            r_nonblank[t] = log_add(r_nonblank[t - 1], phi) + y;
            r_blank[t] = log_add(r_blank[t - 1], r_nonblank[t - 1]) + self.pg.get(t, self.blank);
            if phi > f64::NEG_INFINITY {
                psi = log_add(psi, phi + y);
            }
        }
        Ok(PrefixState {
            last: Some(label),
            len: state.len + 1,
            r_nonblank,
            r_blank,
            prefix_logprob: psi,
        })
    }

    /// State after consuming a whole prefix.
    pub fn state_for(&self, prefix: &[usize]) -> Result<PrefixState> {
        prefix
            .iter()
            .try_fold(self.initial_state(), |s, &l| self.extend(&s, l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::forward_logprob;

    const A: usize = 0;
    const B: usize = 1;
    const BLANK: usize = 2;

    fn uniform2() -> Posteriorgram {
        Posteriorgram::new(vec![-(3f64).ln(); 6], 2, 3).unwrap()
    }

    #[test]
    fn empty_prefix_candidate() {
        let pg = uniform2();
        let sc = CtcPrefixScorer::new(&pg, BLANK).unwrap();
        let s = sc.candidate_scores(&sc.initial_state(), &[Candidate::Label(A)]).unwrap();
        assert!((s[0] - (4.0f64 / 9.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn end_candidate_is_full_probability() {
        let pg = uniform2();
        let sc = CtcPrefixScorer::new(&pg, BLANK).unwrap();
        let st = sc.extend(&sc.initial_state(), A).unwrap();
        assert!((st.prefix_logprob() - (4.0f64 / 9.0).ln()).abs() < 1e-12);
        let s = sc.candidate_scores(&st, &[Candidate::End]).unwrap();
        assert!((s[0] - (3.0f64 / 9.0).ln()).abs() < 1e-12);
        assert!((s[0] - forward_logprob(&pg, &[A], BLANK).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn children_partition_parent() {
        let pg = Posteriorgram::from_probs(&[
            vec![0.6, 0.1, 0.3],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.1, 0.8],
        ])
        .unwrap();
        let sc = CtcPrefixScorer::new(&pg, BLANK).unwrap();
        let st = sc.extend(&sc.initial_state(), A).unwrap();
        let s = sc
            .candidate_scores(&st, &[Candidate::Label(A), Candidate::Label(B), Candidate::End])
            .unwrap();
        let total: f64 = s.iter().map(|v| v.exp()).sum();
        assert!((total - st.prefix_logprob().exp()).abs() < 1e-12);
    }

    #[test]
    fn blank_candidate_rejected() {
        let pg = uniform2();
        let sc = CtcPrefixScorer::new(&pg, BLANK).unwrap();
        assert!(sc.candidate_scores(&sc.initial_state(), &[Candidate::Label(BLANK)]).is_err());
        assert!(sc.extend(&sc.initial_state(), BLANK).is_err());
    }

    #[test]
    fn extend_agrees_with_candidate_scores() {
        let pg = Posteriorgram::from_probs(&[
            vec![0.6, 0.1, 0.3],
            vec![0.2, 0.5, 0.3],
            vec![0.3, 0.3, 0.4],
            vec![0.1, 0.1, 0.8],
        ])
        .unwrap();
        let sc = CtcPrefixScorer::new(&pg, BLANK).unwrap();
        let st = sc.state_for(&[A, B]).unwrap();
        for c in [A, B] {
            let batch = sc.candidate_scores(&st, &[Candidate::Label(c)]).unwrap()[0];
            let ext = sc.extend(&st, c).unwrap();
            assert!((batch - ext.prefix_logprob()).abs() < 1e-12);
            let (nb, b) = ext.forward_variables();
            for t in 0..pg.frames() {
                assert!(nb[t].exp() + b[t].exp() <= 1.0 + 1e-6);
            }
        }
    }
}
