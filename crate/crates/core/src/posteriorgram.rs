//! Frame-wise CTC log-posteriors and encoder frames, plus their binary files.
//!
//! Posteriorgram file (`FKPG`), all little-endian:
//! `magic[4] | version u32 = 1 | T u32 | V u32 | frame_duration_us u32 | T*V f32`.
//!
//! Encoder-output file (`FKEO`): `magic[4] | version u32 = 1 | T u32 | D u32 | T*D f32`.

use std::path::Path;

use crate::binio::{dim_u32, put_f32s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::logmath::{argmax, logsumexp};

pub const POSTERIORGRAM_MAGIC: &[u8; 4] = b"FKPG";
pub const ENCODER_MAGIC: &[u8; 4] = b"FKEO";
pub const FORMAT_VERSION: u32 = 1;
/// 10 ms features subsampled by 6.
pub const DEFAULT_FRAME_MS: f64 = 60.0;
pub const NORM_TOLERANCE: f64 = 1e-6;

/// T x V natural-log posteriors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriorgram {
    log_probs: Vec<f64>,
    frames: usize,
    labels: usize,
    frame_duration_ms: f64,
}

impl Posteriorgram {
    /// Builds a posteriorgram, validating that every row normalizes.
    pub fn new(log_probs: Vec<f64>, frames: usize, labels: usize) -> Result<Self> {
        Self::with_frame_duration(log_probs, frames, labels, DEFAULT_FRAME_MS)
    }

    pub fn with_frame_duration(
        log_probs: Vec<f64>,
        frames: usize,
        labels: usize,
        frame_duration_ms: f64,
    ) -> Result<Self> {
        if frames == 0 || labels == 0 {
            return Err(Error::Shape(format!("posteriorgram must be non-empty, got {frames}x{labels}")));
        }
        if log_probs.len() != frames * labels {
            return Err(Error::Shape(format!(
                "{} values for a {frames}x{labels} posteriorgram",
                log_probs.len()
            )));
        }
        if !(frame_duration_ms > 0.0) {
            return Err(Error::arg("frame duration must be positive"));
        }
        let pg = Self {
            log_probs,
            frames,
            labels,
            frame_duration_ms,
        };
        pg.validate()?;
        Ok(pg)
    }

    /// Log-normalizes each row of raw scores (logits or unnormalized log-probs).
    pub fn from_logits(mut logits: Vec<f64>, frames: usize, labels: usize) -> Result<Self> {
        if logits.len() != frames * labels || labels == 0 {
            return Err(Error::Shape("logit matrix does not match dimensions".into()));
        }
        for row in logits.chunks_exact_mut(labels) {
            crate::logmath::log_normalize(row);
        }
        Self::new(logits, frames, labels)
    }

    /// Builds from linear-domain probability rows; each row is renormalized.
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let labels = rows.first().map_or(0, Vec::len);
        let mut lp = Vec::with_capacity(rows.len() * labels);
        for row in rows {
            if row.len() != labels {
                return Err(Error::Shape("ragged probability rows".into()));
            }
            let z: f64 = row.iter().sum();
            lp.extend(row.iter().map(|p| (p / z).ln()));
        }
        Self::new(lp, rows.len(), labels)
    }

    pub fn validate(&self) -> Result<()> {
        for t in 0..self.frames {
            let logsum = logsumexp(self.row(t));
            if !(logsum.abs() <= NORM_TOLERANCE) {
                return Err(Error::NotNormalized { row: t, logsum });
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn frame_duration_ms(&self) -> f64 {
        self.frame_duration_ms
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames as f64 * self.frame_duration_ms / 1000.0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.log_probs[t * self.labels..(t + 1) * self.labels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.log_probs.chunks_exact(self.labels)
    }

    #[inline]
    pub fn get(&self, t: usize, label: usize) -> f64 {
        self.log_probs[t * self.labels + label]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.log_probs
    }

    /// Per-frame argmax label (ties to the lowest id).
    pub fn argmax_labels(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }

    /// Labels with nonzero probability in at least one frame.
    pub fn active_labels(&self) -> Vec<bool> {
        let mut active = vec![false; self.labels];
        for row in self.rows() {
            for (a, &v) in active.iter_mut().zip(row) {
                *a |= v > f64::NEG_INFINITY;
            }
        }
        active
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(20 + 4 * self.log_probs.len());
        out.extend_from_slice(POSTERIORGRAM_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, dim_u32(self.frames, "frame count")?);
        put_u32(&mut out, dim_u32(self.labels, "label count")?);
        let us = (self.frame_duration_ms * 1000.0).round();
        put_u32(&mut out, dim_u32(us as usize, "frame duration")?);
        put_f32s(&mut out, &self.log_probs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(POSTERIORGRAM_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported posteriorgram version {version}")));
        }
        let frames = r.u32()? as usize;
        let labels = r.u32()? as usize;
        let us = r.u32()?;
        let values = r.f32s(frames * labels)?;
        r.finish()?;
        Self::with_frame_duration(values, frames, labels, us as f64 / 1000.0)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// T x D encoder frames, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    data: Vec<f64>,
    frames: usize,
    dim: usize,
}

impl EncoderOutput {
    pub fn new(data: Vec<f64>, frames: usize, dim: usize) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Shape(format!("encoder output must be non-empty, got {frames}x{dim}")));
        }
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "{} values for a {frames}x{dim} encoder output",
                data.len()
            )));
        }
        Ok(Self { data, frames, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged encoder rows".into()));
        }
        Self::new(rows.concat(), rows.len(), dim)
    }

    /// Uses posterior probabilities as features, a stand-in when no encoder ran.
    pub fn from_posteriorgram(pg: &Posteriorgram) -> Self {
        Self {
            data: pg.as_slice().iter().map(|v| v.exp()).collect(),
            frames: pg.frames(),
            dim: pg.labels(),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(ENCODER_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, dim_u32(self.frames, "frame count")?);
        put_u32(&mut out, dim_u32(self.dim, "feature dim")?);
        put_f32s(&mut out, &self.data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(ENCODER_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported encoder-output version {version}")));
        }
        let frames = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let data = r.f32s(frames * dim)?;
        r.finish()?;
        Self::new(data, frames, dim)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}
