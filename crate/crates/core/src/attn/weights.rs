//! Named-tensor container and the structured decoder parameters built on it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{dim_u32, put_f32s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"FKWT";
pub const WEIGHTS_VERSION: u32 = 1;
const HPARAMS: &str = "hparams";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self { dims, data: vec![0.0; n] }
    }
}

/// Ordered collection of uniquely named tensors (the `FKWT` file).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Format("tensor name too long".into()));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        put_u32(&mut out, WEIGHTS_VERSION);
        put_u32(&mut out, dim_u32(self.tensors.len(), "tensor count")?);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Format(format!("rank of {name:?} too large")))?;
            out.push(rank);
            for &d in &t.dims {
                put_u32(&mut out, dim_u32(d, "tensor dim")?);
            }
            put_f32s(&mut out, &t.data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(WEIGHTS_MAGIC)?;
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported tensor file version {version}")));
        }
        let count = r.u32()?;
        let mut file = Self::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
            let data = r.f32s(n)?;
            file.push(name, Tensor { dims, data })?;
        }
        r.finish()?;
        Ok(file)
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

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HParams {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub rope_base: f64,
}

impl HParams {
    /// Toy defaults: 2 layers, width 32, 2 heads.
    pub fn toy(vocab: usize) -> Self {
        Self { layers: 2, d_model: 32, heads: 2, ffn_dim: 64, vocab, rope_base: 10000.0 }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.layers >= 1
            && self.d_model >= 2
            && self.heads >= 1
            && self.d_model % self.heads == 0
            && self.head_dim() % 2 == 0
            && self.ffn_dim >= 1
            && self.vocab >= 1
            && self.rope_base > 1.0;
        if !ok {
            return Err(Error::Shape(format!("inconsistent hyperparameters {self:?}")));
        }
        Ok(())
    }

    fn to_tensor(self) -> Tensor {
        let v = [self.layers, self.d_model, self.heads, self.ffn_dim, self.vocab];
        let mut data: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        data.push(self.rope_base);
        Tensor { dims: vec![6], data }
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.dims != [6] {
            return Err(Error::Shape(format!("hparams tensor has dims {:?}, expected [6]", t.dims)));
        }
        let int = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::Format(format!("non-integer hyperparameter {x}")))
            }
        };
        let hp = Self {
            layers: int(t.data[0])?,
            d_model: int(t.data[1])?,
            heads: int(t.data[2])?,
            ffn_dim: int(t.data[3])?,
            vocab: int(t.data[4])?,
            rope_base: t.data[5],
        };
        hp.validate()?;
        Ok(hp)
    }
}

/// Row-major `rows x cols` matrix applied as `y = W x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn tensor(&self) -> Tensor {
        Tensor { dims: vec![self.rows, self.cols], data: self.data.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn_norm: Vec<f64>,
    pub self_attn: Attention,
    pub cross_norm: Vec<f64>,
    pub cross_attn: Attention,
    pub ffn_norm: Vec<f64>,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Affine map applied by the adapter after downsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Projection {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        for (a, b) in y.iter_mut().zip(&self.bias) {
            *a += b;
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub hparams: HParams,
    pub tok_emb: Matrix,
    pub layers: Vec<Layer>,
    pub final_norm: Vec<f64>,
    pub out_proj: Matrix,
    pub adapter: Option<Projection>,
}

fn take_vec(file: &TensorFile, name: &str, len: usize) -> Result<Vec<f64>> {
    let t = file.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))?;
    if t.dims != [len] {
        return Err(Error::Shape(format!("tensor {name:?} has dims {:?}, expected [{len}]", t.dims)));
    }
    Ok(t.data.clone())
}

fn take_mat(file: &TensorFile, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let t = file.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))?;
    if t.dims != [rows, cols] {
        return Err(Error::Shape(format!(
            "tensor {name:?} has dims {:?}, expected [{rows}, {cols}]",
            t.dims
        )));
    }
    Ok(Matrix { rows, cols, data: t.data.clone() })
}

/// Gaussian init with std `1/sqrt(fan_in)`, rounded through f32 so that a
/// save/load round trip is exact.
struct Init(ChaCha8Rng);

impl Init {
    fn mat(&mut self, rows: usize, cols: usize) -> Matrix {
        let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).unwrap();
        let data = (0..rows * cols).map(|_| normal.sample(&mut self.0) as f32 as f64).collect();
        Matrix { rows, cols, data }
    }

    fn attention(&mut self, d: usize) -> Attention {
        Attention { wq: self.mat(d, d), wk: self.mat(d, d), wv: self.mat(d, d), wo: self.mat(d, d) }
    }
}

impl DecoderWeights {
    /// Seeded random weights; `audio_dim` adds an adapter projection from
    /// that width to `d_model`.
    pub fn random(hparams: HParams, audio_dim: Option<usize>, seed: u64) -> Result<Self> {
        hparams.validate()?;
        let d = hparams.d_model;
        let mut init = Init(ChaCha8Rng::seed_from_u64(seed));
        let tok_emb = {
            let mut m = init.mat(hparams.vocab, d);
            // Unit-scale embeddings rather than 1/sqrt(fan_in).
            let s = (d as f64).sqrt();
            m.data.iter_mut().for_each(|x| *x = (*x * s) as f32 as f64);
            m
        };
        let layers = (0..hparams.layers)
            .map(|_| Layer {
                attn_norm: vec![1.0; d],
                self_attn: init.attention(d),
                cross_norm: vec![1.0; d],
                cross_attn: init.attention(d),
                ffn_norm: vec![1.0; d],
                w1: init.mat(hparams.ffn_dim, d),
                w2: init.mat(d, hparams.ffn_dim),
            })
            .collect();
        let out_proj = init.mat(hparams.vocab, d);
        let adapter = audio_dim.map(|a| Projection { weight: init.mat(d, a), bias: vec![0.0; d] });
        Ok(Self { hparams, tok_emb, layers, final_norm: vec![1.0; d], out_proj, adapter })
    }

    /// Hand-set weights whose output after label `cur` is the given
    /// next-label distribution `log_table[cur]`: one-hot embeddings, attention
    /// and FFN outputs zeroed, and the output projection holding the table
    /// (floored at -30). Needs `d_model >= vocab`.
    pub fn bigram(hparams: HParams, log_table: &[Vec<f64>], audio_dim: Option<usize>) -> Result<Self> {
        hparams.validate()?;
        let (d, v) = (hparams.d_model, hparams.vocab);
        if d < v {
            return Err(Error::Shape(format!("bigram decoder needs d_model >= vocab ({d} < {v})")));
        }
        if log_table.len() != v || log_table.iter().any(|r| r.len() != v) {
            return Err(Error::Shape(format!("bigram table must be {v} x {v}")));
        }
        let mut tok_emb = Matrix::zeros(v, d);
        for i in 0..v {
            tok_emb.data[i * d + i] = 1.0;
        }
        let mut out_proj = Matrix::zeros(v, d);
        for (cur, row) in log_table.iter().enumerate() {
            for (next, &lp) in row.iter().enumerate() {
                out_proj.data[next * d + cur] = lp.max(-30.0) as f32 as f64;
            }
        }
        let zero_attn = || Attention {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
        };
        let layers = (0..hparams.layers)
            .map(|_| Layer {
                attn_norm: vec![1.0; d],
                self_attn: zero_attn(),
                cross_norm: vec![1.0; d],
                cross_attn: zero_attn(),
                ffn_norm: vec![1.0; d],
                w1: Matrix::zeros(hparams.ffn_dim, d),
                w2: Matrix::zeros(d, hparams.ffn_dim),
            })
            .collect();
        // RMS of a one-hot row is sqrt(1/d); this gain undoes the normalization.
        let gain = ((1.0 / d as f64) + 1e-6).sqrt() as f32 as f64;
        let adapter = audio_dim.map(|a| Projection { weight: Matrix::zeros(d, a), bias: vec![0.0; d] });
        Ok(Self { hparams, tok_emb, layers, final_norm: vec![gain; d], out_proj, adapter })
    }

    /// [`DecoderWeights::bigram`] with the table read off `lm`: row `cur`
    /// is the LM's distribution after the single label `cur` (after nothing
    /// for BOS and the other specials).
    pub fn distill_bigram(hparams: HParams, lm: &dyn LanguageModel, audio_dim: Option<usize>) -> Result<Self> {
        let vocab = lm.vocab();
        if vocab.len() != hparams.vocab {
            return Err(Error::Shape(format!("LM has {} tokens, decoder {}", vocab.len(), hparams.vocab)));
        }
        let table: Vec<Vec<f64>> = (0..vocab.len())
            .map(|cur| {
                let ctx: &[usize] = if vocab.is_special(cur) { &[] } else { std::slice::from_ref(&cur) };
                lm.next_log_probs(ctx).to_vec()
            })
            .collect();
        Self::bigram(hparams, &table, audio_dim)
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        let d = self.hparams.d_model;
        f.push(HPARAMS, self.hparams.to_tensor())?;
        f.push("tok_emb", self.tok_emb.tensor())?;
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            f.push(p("attn_norm"), Tensor { dims: vec![d], data: l.attn_norm.clone() })?;
            f.push(p("wq"), l.self_attn.wq.tensor())?;
            f.push(p("wk"), l.self_attn.wk.tensor())?;
            f.push(p("wv"), l.self_attn.wv.tensor())?;
            f.push(p("wo"), l.self_attn.wo.tensor())?;
            f.push(p("cross_norm"), Tensor { dims: vec![d], data: l.cross_norm.clone() })?;
            f.push(p("cross_wq"), l.cross_attn.wq.tensor())?;
            f.push(p("cross_wk"), l.cross_attn.wk.tensor())?;
            f.push(p("cross_wv"), l.cross_attn.wv.tensor())?;
            f.push(p("cross_wo"), l.cross_attn.wo.tensor())?;
            f.push(p("ffn_norm"), Tensor { dims: vec![d], data: l.ffn_norm.clone() })?;
            f.push(p("w1"), l.w1.tensor())?;
            f.push(p("w2"), l.w2.tensor())?;
        }
        f.push("final_norm", Tensor { dims: vec![d], data: self.final_norm.clone() })?;
        f.push("out_proj", self.out_proj.tensor())?;
        if let Some(a) = &self.adapter {
            f.push("adapter.weight", a.weight.tensor())?;
            f.push("adapter.bias", Tensor { dims: vec![d], data: a.bias.clone() })?;
        }
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let first = f.iter().next().map(|(n, _)| n);
        if first != Some(HPARAMS) {
            return Err(Error::Format("weights must start with the hparams tensor".into()));
        }
        let hp = HParams::from_tensor(f.get(HPARAMS).unwrap())?;
        let (d, v, ffn) = (hp.d_model, hp.vocab, hp.ffn_dim);
        let attn = |i: usize, prefix: &str| -> Result<Attention> {
            let m = |s: &str| take_mat(f, &format!("layers.{i}.{prefix}{s}"), d, d);
            Ok(Attention { wq: m("wq")?, wk: m("wk")?, wv: m("wv")?, wo: m("wo")? })
        };
        let layers = (0..hp.layers)
            .map(|i| {
                Ok(Layer {
                    attn_norm: take_vec(f, &format!("layers.{i}.attn_norm"), d)?,
                    self_attn: attn(i, "")?,
                    cross_norm: take_vec(f, &format!("layers.{i}.cross_norm"), d)?,
                    cross_attn: attn(i, "cross_")?,
                    ffn_norm: take_vec(f, &format!("layers.{i}.ffn_norm"), d)?,
                    w1: take_mat(f, &format!("layers.{i}.w1"), ffn, d)?,
                    w2: take_mat(f, &format!("layers.{i}.w2"), d, ffn)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let adapter = match f.get("adapter.weight") {
            Some(t) if t.dims.len() == 2 => Some(Projection {
                weight: take_mat(f, "adapter.weight", d, t.dims[1])?,
                bias: take_vec(f, "adapter.bias", d)?,
            }),
            Some(t) => return Err(Error::Shape(format!("adapter.weight has dims {:?}", t.dims))),
            None => None,
        };
        let expected = 4 + 13 * hp.layers + if adapter.is_some() { 2 } else { 0 };
        if f.len() != expected {
            return Err(Error::Format(format!("expected {expected} tensors, found {}", f.len())));
        }
        Ok(Self {
            hparams: hp,
            tok_emb: take_mat(f, "tok_emb", v, d)?,
            layers,
            final_norm: take_vec(f, "final_norm", d)?,
            out_proj: take_mat(f, "out_proj", v, d)?,
            adapter,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file()?.write(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_file_round_trip() {
        let w = DecoderWeights::random(HParams::toy(7), Some(5), 3).unwrap();
        let bytes = w.to_tensor_file().unwrap().to_bytes().unwrap();
        let back = DecoderWeights::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_tensor_file().unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_files() {
        let w = DecoderWeights::random(HParams::toy(7), None, 3).unwrap();
        let mut bytes = w.to_tensor_file().unwrap().to_bytes().unwrap();
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(TensorFile::from_bytes(&bytes).is_err());

        let mut f = TensorFile::new();
        f.push("a", Tensor::zeros(vec![2])).unwrap();
        assert!(f.push("a", Tensor::zeros(vec![1])).is_err());
        assert!(DecoderWeights::from_tensor_file(&f).is_err());
    }

    #[test]
    fn bigram_weights_shape() {
        let mut hp = HParams::toy(3);
        hp.d_model = 4;
        hp.heads = 1;
        let table = vec![vec![-1.0, -2.0, -3.0]; 3];
        let w = DecoderWeights::bigram(hp, &table, Some(2)).unwrap();
        assert_eq!(w.out_proj.row(1), &[-2.0, -2.0, -2.0, 0.0]);
        assert!(DecoderWeights::bigram(HParams { d_model: 2, heads: 1, ..hp }, &table, None).is_err());
    }

    #[test]
    fn hparams_validation() {
        let mut hp = HParams::toy(5);
        hp.heads = 3;
        assert!(hp.validate().is_err());
        assert!(DecoderWeights::random(hp, None, 0).is_err());
    }
}
