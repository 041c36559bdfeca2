//! Toy transformer decoder with the three ways of attaching audio to a
//! text decoder: dedicated cross-attention (AED), a prepended prefix in the
//! decoder's own self-attention, and merged attention where text queries
//! attend over prefix-plus-text keys/values.

mod model;
mod weights;

pub use model::{AttentionExport, DecoderModel, IncrementalState};
pub use weights::{
    Attention, DecoderWeights, HParams, Layer, Matrix, Projection, Tensor, TensorFile, WEIGHTS_MAGIC,
    WEIGHTS_VERSION,
};

use crate::ctc::{compress_encoder, merge_indices};
use crate::error::{Error, Result};
use crate::posteriorgram::{EncoderOutput, Posteriorgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterfaceKind {
    Aed,
    Prefix,
    Merged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PrefixAttention {
    #[default]
    Causal,
    Bidirectional,
}

impl std::str::FromStr for InterfaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aed" => Ok(Self::Aed),
            "prefix" => Ok(Self::Prefix),
            "merged" => Ok(Self::Merged),
            other => Err(Error::arg(format!("unknown interface kind {other:?}"))),
        }
    }
}

impl std::str::FromStr for PrefixAttention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(Self::Causal),
            "bidirectional" => Ok(Self::Bidirectional),
            other => Err(Error::arg(format!("unknown prefix attention {other:?}"))),
        }
    }
}

/// How audio reaches the decoder, plus the prompt tokens placed between the
/// audio and BOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterfaceConfig {
    pub kind: InterfaceKind,
    pub prefix_attention: PrefixAttention,
    pub prompt: Vec<usize>,
}

impl InterfaceConfig {
    pub fn aed() -> Self {
        Self { kind: InterfaceKind::Aed, prefix_attention: PrefixAttention::Causal, prompt: Vec::new() }
    }

    pub fn prefix(attention: PrefixAttention) -> Self {
        Self { kind: InterfaceKind::Prefix, prefix_attention: attention, prompt: Vec::new() }
    }

    pub fn merged() -> Self {
        Self { kind: InterfaceKind::Merged, prefix_attention: PrefixAttention::Causal, prompt: Vec::new() }
    }

    pub fn with_prompt(mut self, prompt: Vec<usize>) -> Self {
        self.prompt = prompt;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.prefix_attention == PrefixAttention::Bidirectional && self.kind != InterfaceKind::Prefix {
            return Err(Error::arg("bidirectional prefix attention needs the prefix interface"));
        }
        Ok(())
    }
}

/// Boolean attention pattern, `rows` queries by `cols` keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    data: Vec<bool>,
}

impl AttentionMask {
    fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        Self { rows, cols, data }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

/// Self-attention pattern over `prefix_len` prefix positions (audio and
/// prompt) followed by `text_len` text positions.
///
/// * prefix: square over prefix+text; text rows see the whole prefix and
///   earlier text; prefix rows are causal or see the whole prefix.
/// * merged: text rows only, keys over prefix+text, causal in the text part.
/// * aed: causal over text only (audio enters through cross-attention, and
///   the prompt is counted as text).
///
/// Causal prefix, two prefix and two text positions (rows are queries):
///
/// ```text
/// 1 0 0 0
/// 1 1 0 0
/// 1 1 1 0
/// 1 1 1 1
/// ```
///
/// Bidirectional differs only in the prefix block: row 0 becomes `1 1 0 0`.
pub fn build_attention_mask(config: &InterfaceConfig, prefix_len: usize, text_len: usize) -> Result<AttentionMask> {
    config.validate()?;
    let (p, s) = (prefix_len, text_len);
    Ok(match config.kind {
        InterfaceKind::Prefix => {
            let bidir = config.prefix_attention == PrefixAttention::Bidirectional;
            AttentionMask::from_fn(p + s, p + s, |r, c| if r < p { c < p && (bidir || c <= r) } else { c <= r })
        }
        InterfaceKind::Merged => AttentionMask::from_fn(s, p + s, |r, c| c <= p + r),
        InterfaceKind::Aed => AttentionMask::from_fn(s, s, |r, c| c <= r),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Downsample {
    /// Concatenate `f` consecutive frames, zero-padding the tail.
    Concat(usize),
    /// Mean-pool runs of confidently identical CTC argmaxes at threshold `τ`.
    CtcCompress(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    pub downsample: Downsample,
    /// Apply the decoder's adapter projection after downsampling.
    pub project: bool,
}

impl AdapterConfig {
    pub fn identity() -> Self {
        Self { downsample: Downsample::Concat(1), project: false }
    }
}

/// Downsamples encoder frames and optionally maps them to the decoder width.
/// `pg` must be frame-aligned with `enc` when compressing.
pub fn adapter_apply(
    enc: &EncoderOutput,
    config: &AdapterConfig,
    pg: Option<&Posteriorgram>,
    projection: Option<&Projection>,
) -> Result<EncoderOutput> {
    let pooled = match config.downsample {
        Downsample::Concat(0) => return Err(Error::arg("concat factor must be at least 1")),
        Downsample::Concat(1) => enc.clone(),
        Downsample::Concat(f) => {
            let (t, d) = (enc.frames(), enc.dim());
            let out_t = t.div_ceil(f);
            let mut data = vec![0.0; out_t * f * d];
            data[..t * d].copy_from_slice(enc.as_slice());
            EncoderOutput::new(data, out_t, f * d)?
        }
        Downsample::CtcCompress(tau) => {
            let pg = pg.ok_or_else(|| Error::arg("CTC compression needs the aligned posteriorgram"))?;
            if pg.frames() != enc.frames() {
                return Err(Error::Shape(format!(
                    "posteriorgram has {} frames, encoder output {}",
                    pg.frames(),
                    enc.frames()
                )));
            }
            compress_encoder(enc, &merge_indices(pg, tau)?)?
        }
    };
    if !config.project {
        return Ok(pooled);
    }
    let proj = projection.ok_or_else(|| Error::arg("adapter projection requested but the weights have none"))?;
    if proj.weight.cols != pooled.dim() {
        return Err(Error::Shape(format!(
            "adapter projection expects width {}, got {}",
            proj.weight.cols,
            pooled.dim()
        )));
    }
    let rows: Vec<Vec<f64>> = pooled.rows().map(|r| proj.apply(r)).collect();
    EncoderOutput::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(m: &AttentionMask) -> Vec<String> {
        (0..m.rows)
            .map(|r| m.row(r).iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }

    #[test]
    fn empty_prefix_is_causal_for_every_kind() {
        for cfg in [
            InterfaceConfig::aed(),
            InterfaceConfig::prefix(PrefixAttention::Causal),
            InterfaceConfig::prefix(PrefixAttention::Bidirectional),
            InterfaceConfig::merged(),
        ] {
            let m = build_attention_mask(&cfg, 0, 3).unwrap();
            assert_eq!(pattern(&m), ["100", "110", "111"], "{cfg:?}");
        }
    }

    #[test]
    fn enumerated_prefix_patterns() {
        let causal = build_attention_mask(&InterfaceConfig::prefix(PrefixAttention::Causal), 2, 2).unwrap();
        assert_eq!(pattern(&causal), ["1000", "1100", "1110", "1111"]);
        let bidir = build_attention_mask(&InterfaceConfig::prefix(PrefixAttention::Bidirectional), 2, 2).unwrap();
        assert_eq!(pattern(&bidir), ["1100", "1100", "1110", "1111"]);
        let merged = build_attention_mask(&InterfaceConfig::merged(), 2, 2).unwrap();
        assert_eq!(pattern(&merged), ["1110", "1111"]);
        let aed = build_attention_mask(&InterfaceConfig::aed(), 2, 2).unwrap();
        assert_eq!(pattern(&aed), ["10", "11"]);
    }

    #[test]
    fn bidirectional_only_touches_prefix_rows() {
        let c = build_attention_mask(&InterfaceConfig::prefix(PrefixAttention::Causal), 4, 3).unwrap();
        let b = build_attention_mask(&InterfaceConfig::prefix(PrefixAttention::Bidirectional), 4, 3).unwrap();
        for r in 4..7 {
            assert_eq!(c.row(r), b.row(r));
        }
        for r in 0..4 {
            assert!(b.row(r)[..4].iter().all(|&x| x));
            assert!(b.row(r)[4..].iter().all(|&x| !x));
        }
    }

    #[test]
    fn invalid_combination() {
        let mut cfg = InterfaceConfig::merged();
        cfg.prefix_attention = PrefixAttention::Bidirectional;
        assert!(build_attention_mask(&cfg, 1, 1).is_err());
    }

    fn enc(t: usize, d: usize) -> EncoderOutput {
        EncoderOutput::new((0..t * d).map(|x| x as f64).collect(), t, d).unwrap()
    }

    #[test]
    fn concat_adapter() {
        let e = enc(5, 3);
        assert_eq!(adapter_apply(&e, &AdapterConfig::identity(), None, None).unwrap(), e);
        let cfg = AdapterConfig { downsample: Downsample::Concat(2), project: false };
        let out = adapter_apply(&e, &cfg, None, None).unwrap();
        assert_eq!((out.frames(), out.dim()), (3, 6));
        assert_eq!(out.row(0), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(out.row(2), &[12.0, 13.0, 14.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn compress_adapter() {
        let pg = Posteriorgram::from_probs(&[
            vec![0.95, 0.05],
            vec![0.96, 0.04],
            vec![0.1, 0.9],
        ])
        .unwrap();
        let e = enc(3, 2);
        let off = AdapterConfig { downsample: Downsample::CtcCompress(1.5), project: false };
        assert_eq!(adapter_apply(&e, &off, Some(&pg), None).unwrap(), e);
        let on = AdapterConfig { downsample: Downsample::CtcCompress(0.9), project: false };
        let out = adapter_apply(&e, &on, Some(&pg), None).unwrap();
        assert_eq!(out.frames(), 2);
        assert_eq!(out.row(0), &[1.0, 2.0]);
        assert!(adapter_apply(&e, &on, None, None).is_err());
    }

    #[test]
    fn projection() {
        let proj = Projection {
            weight: Matrix { rows: 1, cols: 2, data: vec![1.0, -1.0] },
            bias: vec![0.5],
        };
        let cfg = AdapterConfig { downsample: Downsample::Concat(1), project: true };
        let out = adapter_apply(&enc(2, 2), &cfg, None, Some(&proj)).unwrap();
        assert_eq!(out.as_slice(), &[-0.5, -0.5]);
        assert!(adapter_apply(&enc(2, 3), &cfg, None, Some(&proj)).is_err());
        assert!(adapter_apply(&enc(2, 2), &cfg, None, None).is_err());
    }
}
