//! CTC scoring: collapsing, the forward algorithm, greedy decoding, prefix
//! scores, and the two output-distribution optimizations (compression and
//! top-k pruning) used to speed up joint decoding.

mod compress;
mod prefix;
mod prune;

pub use compress::{compress_encoder, compress_posteriors, merge_indices, MergeIndexMap};
pub use prefix::{Candidate, CtcPrefixScorer, PrefixState};
pub use prune::topk_prune;

use crate::error::{Error, Result};
use crate::logmath::log_add;
use crate::posteriorgram::Posteriorgram;

/// The collapsing function: merge adjacent repeats, then drop blanks.
pub fn collapse(frame_labels: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &y in frame_labels {
        if Some(y) != prev && y != blank {
            out.push(y);
        }
        prev = Some(y);
    }
    out
}

/// Argmax per frame (lowest id on ties), collapsed.
pub fn greedy_decode(pg: &Posteriorgram, blank: usize) -> Vec<usize> {
    collapse(&pg.argmax_labels(), blank)
}

/// `ln p_CTC(target | h)`: log-sum over every frame alignment collapsing to
/// `target`. Infeasible targets give `-inf`.
pub fn forward_logprob(pg: &Posteriorgram, target: &[usize], blank: usize) -> Result<f64> {
    check_target(pg, target, blank)?;
    let frames = pg.frames();
    // Extended sequence: blank, a1, blank, a2, ..., aS, blank.
    let ext_len = 2 * target.len() + 1;
    let ext = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] };
    let mut alpha = vec![f64::NEG_INFINITY; ext_len];
    let mut next = vec![f64::NEG_INFINITY; ext_len];
    alpha[0] = pg.get(0, blank);
    if ext_len > 1 {
        alpha[1] = pg.get(0, ext(1));
    }
    for t in 1..frames {
        for s in 0..ext_len {
            let mut acc = alpha[s];
            if s >= 1 {
                acc = log_add(acc, alpha[s - 1]);
            }
            if s >= 2 && ext(s) != blank && ext(s) != ext(s - 2) {
                acc = log_add(acc, alpha[s - 2]);
            }
            next[s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + pg.get(t, ext(s))
            };
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    let end = alpha[ext_len - 1];
    Ok(if ext_len > 1 {
        log_add(end, alpha[ext_len - 2])
    } else {
        end
    })
}

/// Negative log-likelihood loss value, evaluation only.
pub fn ctc_loss(pg: &Posteriorgram, target: &[usize], blank: usize) -> Result<f64> {
    Ok(-forward_logprob(pg, target, blank)?)
}

fn check_target(pg: &Posteriorgram, target: &[usize], blank: usize) -> Result<()> {
    if blank >= pg.labels() {
        return Err(Error::arg(format!("blank id {blank} outside posteriorgram width {}", pg.labels())));
    }
    for &a in target {
        if a == blank {
            return Err(Error::arg("CTC target contains the blank label"));
        }
        if a >= pg.labels() {
            return Err(Error::arg(format!("label {a} outside posteriorgram width {}", pg.labels())));
        }
    }
    Ok(())
}

/// Order in which compression and pruning apply when both are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizationOrder {
    #[default]
    CompressThenPrune,
    PruneThenCompress,
}

/// Optional CTC output optimizations applied before joint decoding.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CtcOptimizations {
    /// Merge threshold; `None` disables compression.
    pub compress_tau: Option<f64>,
    /// Number of labels kept; `None` disables pruning.
    pub topk: Option<usize>,
    pub keep_blank: bool,
    pub order: OptimizationOrder,
}

impl CtcOptimizations {
    pub fn none() -> Self {
        Self {
            keep_blank: true,
            ..Default::default()
        }
    }

    pub fn apply(&self, pg: &Posteriorgram, blank: usize) -> Result<Posteriorgram> {
        let compress = |pg: &Posteriorgram| -> Result<Posteriorgram> {
            match self.compress_tau {
                Some(tau) => compress_posteriors(pg, &merge_indices(pg, tau)?),
                None => Ok(pg.clone()),
            }
        };
        let prune = |pg: &Posteriorgram| -> Result<Posteriorgram> {
            match self.topk {
                Some(k) => topk_prune(pg, k, self.keep_blank, blank),
                None => Ok(pg.clone()),
            }
        };
        match self.order {
            OptimizationOrder::CompressThenPrune => prune(&compress(pg)?),
            OptimizationOrder::PruneThenCompress => compress(&prune(pg)?),
        }
    }
}
