//! Merging of consecutive frames that share a confident argmax label.

use crate::error::{Error, Result};
use crate::logmath::{argmax, logsumexp};
use crate::posteriorgram::{EncoderOutput, Posteriorgram};

/// 1-based merged index `i_t` per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeIndexMap {
    indices: Vec<usize>,
    threshold: Option<f64>,
}

impl MergeIndexMap {
    /// No merging: `i_t = t`.
    pub fn identity(frames: usize) -> Self {
        Self {
            indices: (1..=frames).collect(),
            threshold: None,
        }
    }

    pub fn from_indices(indices: Vec<usize>) -> Result<Self> {
        if indices.first() != Some(&1) {
            return Err(Error::arg("merge indices must start at 1"));
        }
        if indices.windows(2).any(|w| w[1] != w[0] && w[1] != w[0] + 1) {
            return Err(Error::arg("merge indices must grow in steps of 0 or 1"));
        }
        Ok(Self {
            indices,
            threshold: None,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Number of merged frames, `i_T`.
    pub fn groups(&self) -> usize {
        self.indices.last().copied().unwrap_or(0)
    }

    /// Frame ranges belonging to each merged index, in order.
    pub fn group_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.groups());
        let mut start = 0;
        for t in 1..=self.indices.len() {
            if t == self.indices.len() || self.indices[t] != self.indices[start] {
                out.push(start..t);
                start = t;
            }
        }
        out
    }
}

/// Frame `t` merges into the previous one iff both share the argmax label and
/// both argmax probabilities reach `tau`.
pub fn merge_indices(pg: &Posteriorgram, tau: f64) -> Result<MergeIndexMap> {
    if !(tau > 0.0) {
        return Err(Error::arg(format!("merge threshold must be positive, got {tau}")));
    }
    let log_tau = tau.ln();
    let mut indices = Vec::with_capacity(pg.frames());
    let mut prev: Option<(usize, bool)> = None;
    for row in pg.rows() {
        let best = argmax(row);
        let confident = row[best] >= log_tau;
        let idx = match (prev, indices.last()) {
            (Some((prev_best, prev_conf)), Some(&i)) => {
                if best == prev_best && confident && prev_conf {
                    i
                } else {
                    i + 1
                }
            }
            _ => 1,
        };
        indices.push(idx);
        prev = Some((best, confident));
    }
    Ok(MergeIndexMap {
        indices,
        threshold: Some(tau),
    })
}

fn check_len(frames: usize, map: &MergeIndexMap) -> Result<()> {
    if map.len() != frames {
        return Err(Error::Shape(format!(
            "merge map covers {} frames, input has {frames}",
            map.len()
        )));
    }
    Ok(())
}

/// Mean-pools encoder frames that share a merged index.
pub fn compress_encoder(enc: &EncoderOutput, map: &MergeIndexMap) -> Result<EncoderOutput> {
    check_len(enc.frames(), map)?;
    let dim = enc.dim();
    let mut data = Vec::with_capacity(map.groups() * dim);
    for range in map.group_ranges() {
        let n = range.len() as f64;
        let mut mean = vec![0.0; dim];
        for t in range {
            for (m, &x) in mean.iter_mut().zip(enc.row(t)) {
                *m += x;
            }
        }
        data.extend(mean.into_iter().map(|m| m / n));
    }
    EncoderOutput::new(data, map.groups(), dim)
}

/// Max-pools posteriors per merged index and renormalizes. Single-frame
/// groups are copied unchanged.
pub fn compress_posteriors(pg: &Posteriorgram, map: &MergeIndexMap) -> Result<Posteriorgram> {
    check_len(pg.frames(), map)?;
    let width = pg.labels();
    let mut out = Vec::with_capacity(map.groups() * width);
    for range in map.group_ranges() {
        if range.len() == 1 {
            out.extend_from_slice(pg.row(range.start));
            continue;
        }
        let mut pooled = vec![f64::NEG_INFINITY; width];
        for t in range {
            for (p, &x) in pooled.iter_mut().zip(pg.row(t)) {
                *p = p.max(x);
            }
        }
        let z = logsumexp(&pooled);
        out.extend(pooled.into_iter().map(|v| v - z));
    }
    Posteriorgram::with_frame_duration(out, map.groups(), width, pg.frame_duration_ms())
}
