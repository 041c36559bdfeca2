use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::weights::{Attention, DecoderWeights, Layer, Matrix, Tensor, TensorFile};
use super::{build_attention_mask, AttentionMask, InterfaceConfig, InterfaceKind};
use crate::error::{Error, Result};
use crate::logmath::log_normalize;
use crate::posteriorgram::EncoderOutput;
use crate::vocab::Vocabulary;

const RMS_EPS: f64 = 1e-6;

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * s * g).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn add_into(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

/// Keys and values visible to a layer, one entry per key position.
#[derive(Debug, Clone, Default)]
struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Per-layer keys/values of one decoded text position; chained so that
/// cloning a state is a pointer copy.
#[derive(Debug)]
struct StepNode {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    parent: Option<Arc<StepNode>>,
}

#[derive(Debug)]
struct PrefixCache {
    /// Self-attention keys/values of the prefix, per layer.
    layers: Vec<KvCache>,
    /// Cross-attention keys/values of the audio, per layer (AED only).
    cross: Option<Vec<KvCache>>,
}

/// Decoder state after consuming the prefix and some text labels.
#[derive(Debug, Clone)]
pub struct IncrementalState {
    model_id: u64,
    kind: InterfaceKind,
    prefix: Arc<PrefixCache>,
    text: Option<Arc<StepNode>>,
    position: usize,
    steps: usize,
    last: Option<Arc<Vec<f64>>>,
}

impl IncrementalState {
    /// Text labels consumed (prompt tokens of the AED interface included).
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Position the next label will occupy.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Distribution produced by the most recent step.
    pub fn last_log_probs(&self) -> Option<&[f64]> {
        self.last.as_deref().map(Vec::as_slice)
    }
}

/// Self-attention probabilities: `[layer][head]`, queries by keys, masked
/// positions exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub layers: Vec<Vec<Matrix>>,
}

impl AttentionExport {
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        for (i, heads) in self.layers.iter().enumerate() {
            for (j, m) in heads.iter().enumerate() {
                f.push(format!("layer{i}.head{j}"), Tensor::new(vec![m.rows, m.cols], m.data.clone())?)?;
            }
        }
        Ok(f)
    }
}

struct Pass {
    outputs: Vec<Vec<f64>>,
    kv: Vec<KvCache>,
    attention: Vec<Vec<Matrix>>,
}

/// A decoder bound to its vocabulary.
#[derive(Debug, Clone)]
pub struct DecoderModel {
    weights: Arc<DecoderWeights>,
    bos: usize,
    eos: usize,
    inv_freq: Vec<f64>,
    id: u64,
}

impl DecoderModel {
    pub fn new(weights: impl Into<Arc<DecoderWeights>>, vocab: &Vocabulary) -> Result<Self> {
        let weights = weights.into();
        let hp = weights.hparams;
        hp.validate()?;
        if hp.vocab != vocab.len() {
            return Err(Error::Shape(format!(
                "decoder has {} outputs, vocabulary {} tokens",
                hp.vocab,
                vocab.len()
            )));
        }
        let hd = hp.head_dim();
        let inv_freq = (0..hd / 2).map(|i| hp.rope_base.powf(-((2 * i) as f64) / hd as f64)).collect();
        Ok(Self {
            weights,
            bos: vocab.bos_id(),
            eos: vocab.eos_id(),
            inv_freq,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    pub fn weights(&self) -> &DecoderWeights {
        &self.weights
    }

    fn d(&self) -> usize {
        self.weights.hparams.d_model
    }

    fn embed(&self, label: usize) -> Result<Vec<f64>> {
        if label >= self.weights.hparams.vocab {
            return Err(Error::arg(format!("label {label} outside decoder vocabulary")));
        }
        Ok(self.weights.tok_emb.row(label).to_vec())
    }

    fn rope(&self, v: &mut [f64], pos: usize) {
        let hd = self.weights.hparams.head_dim();
        for head in v.chunks_exact_mut(hd) {
            for (i, f) in self.inv_freq.iter().enumerate() {
                let (s, c) = (pos as f64 * f).sin_cos();
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }

    fn key_value(&self, attn: &Attention, xn: &[f64], pos: Option<usize>) -> (Vec<f64>, Vec<f64>) {
        let mut k = attn.wk.matvec(xn);
        if let Some(p) = pos {
            self.rope(&mut k, p);
        }
        (k, attn.wv.matvec(xn))
    }

    fn query(&self, attn: &Attention, xn: &[f64], pos: Option<usize>) -> Vec<f64> {
        let mut q = attn.wq.matvec(xn);
        if let Some(p) = pos {
            self.rope(&mut q, p);
        }
        q
    }

    /// Multi-head scaled dot-product attention over the given keys. Returns
    /// the concatenated head outputs and per-head probabilities.
    fn attend<'a>(
        &self,
        q: &[f64],
        keys: impl Iterator<Item = (&'a [f64], &'a [f64])> + Clone,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let hd = self.weights.hparams.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; q.len()];
        let mut probs = Vec::with_capacity(self.weights.hparams.heads);
        for (h, qh) in q.chunks_exact(hd).enumerate() {
            let r = h * hd..(h + 1) * hd;
            let mut p: Vec<f64> = keys
                .clone()
                .map(|(k, _)| qh.iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            if p.is_empty() {
                probs.push(p);
                continue;
            }
            let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            p.iter_mut().for_each(|x| *x = (*x - m).exp());
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= z);
            for (w, (_, v)) in p.iter().zip(keys.clone()) {
                for (o, vv) in out[r.clone()].iter_mut().zip(&v[r.clone()]) {
                    *o += w * vv;
                }
            }
            probs.push(p);
        }
        (out, probs)
    }

    fn cross_block(&self, layer: &Layer, cache: &KvCache, x: &mut [f64]) {
        let xn = rmsnorm(x, &layer.cross_norm);
        let q = self.query(&layer.cross_attn, &xn, None);
        let (o, _) = self.attend(&q, cache.keys.iter().map(Vec::as_slice).zip(cache.values.iter().map(Vec::as_slice)));
        add_into(x, &layer.cross_attn.wo.matvec(&o));
    }

    fn ffn_block(&self, layer: &Layer, x: &mut [f64]) {
        let xn = rmsnorm(x, &layer.ffn_norm);
        let h: Vec<f64> = layer.w1.matvec(&xn).into_iter().map(silu).collect();
        add_into(x, &layer.w2.matvec(&h));
    }

    fn log_probs(&self, x: &[f64]) -> Vec<f64> {
        let xn = rmsnorm(x, &self.weights.final_norm);
        let mut logits = self.weights.out_proj.matvec(&xn);
        log_normalize(&mut logits);
        logits
    }

    fn audio_rows(&self, audio: Option<&EncoderOutput>) -> Result<Vec<Vec<f64>>> {
        match audio {
            None => Ok(Vec::new()),
            Some(a) if a.dim() == self.d() => Ok(a.rows().map(<[f64]>::to_vec).collect()),
            Some(a) => Err(Error::Shape(format!(
                "audio width {} does not match decoder width {}; apply the adapter first",
                a.dim(),
                self.d()
            ))),
        }
    }

    fn cross_caches(&self, audio: &[Vec<f64>]) -> Vec<KvCache> {
        self.weights
            .layers
            .iter()
            .map(|l| {
                let (keys, values) = audio.iter().map(|a| self.key_value(&l.cross_attn, a, None)).unzip();
                KvCache { keys, values }
            })
            .collect()
    }

    /// Full-sequence pass. `fixed` rows only contribute keys/values
    /// (positions `0..F`), `x` rows are queries at positions `F..F+N` and
    /// attend according to `mask` (`N` rows, `F+N` columns).
    fn pass(
        &self,
        fixed: &[Vec<f64>],
        mut x: Vec<Vec<f64>>,
        mask: &AttentionMask,
        cross: Option<&[KvCache]>,
        record: bool,
    ) -> Pass {
        let f = fixed.len();
        let mut kv_all = Vec::with_capacity(self.weights.layers.len());
        let mut attention = Vec::new();
        for (li, layer) in self.weights.layers.iter().enumerate() {
            let a = &layer.self_attn;
            let mut kv = KvCache::default();
            for (j, e) in fixed.iter().enumerate() {
                let (k, v) = self.key_value(a, &rmsnorm(e, &layer.attn_norm), Some(j));
                kv.keys.push(k);
                kv.values.push(v);
            }
            let mut queries = Vec::with_capacity(x.len());
            for (i, row) in x.iter().enumerate() {
                let xn = rmsnorm(row, &layer.attn_norm);
                queries.push(self.query(a, &xn, Some(f + i)));
                let (k, v) = self.key_value(a, &xn, Some(f + i));
                kv.keys.push(k);
                kv.values.push(v);
            }
            let heads = self.weights.hparams.heads;
            let mut mats = vec![Matrix::zeros(x.len(), mask.cols); if record { heads } else { 0 }];
            for (i, row) in x.iter_mut().enumerate() {
                let cols: Vec<usize> = (0..mask.cols).filter(|&c| mask.get(i, c)).collect();
                let keys = cols.iter().map(|&c| (kv.keys[c].as_slice(), kv.values[c].as_slice()));
                let (o, probs) = self.attend(&queries[i], keys);
                add_into(row, &a.wo.matvec(&o));
                for (m, p) in mats.iter_mut().zip(&probs) {
                    for (&c, &w) in cols.iter().zip(p) {
                        m.data[i * mask.cols + c] = w;
                    }
                }
                if let Some(c) = cross {
                    self.cross_block(layer, &c[li], row);
                }
                self.ffn_block(layer, row);
            }
            kv_all.push(kv);
            attention.push(mats);
        }
        Pass { outputs: x, kv: kv_all, attention }
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.first() != Some(&self.bos) {
            return Err(Error::arg("decoder input must start with BOS"));
        }
        Ok(())
    }

    fn run(
        &self,
        config: &InterfaceConfig,
        audio: Option<&EncoderOutput>,
        labels: &[usize],
        record: bool,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<Matrix>>)> {
        config.validate()?;
        self.check_labels(labels)?;
        let audio = self.audio_rows(audio)?;
        let embed_all = |ids: &[usize]| ids.iter().map(|&l| self.embed(l)).collect::<Result<Vec<_>>>();
        let s = labels.len();
        let pass = match config.kind {
            InterfaceKind::Prefix | InterfaceKind::Merged => {
                let mut prefix = audio;
                prefix.extend(embed_all(&config.prompt)?);
                let p = prefix.len();
                let mask = build_attention_mask(config, p, s)?;
                let text = embed_all(labels)?;
                if config.kind == InterfaceKind::Prefix {
                    prefix.extend(text);
                    self.pass(&[], prefix, &mask, None, record)
                } else {
                    self.pass(&prefix, text, &mask, None, record)
                }
            }
            InterfaceKind::Aed => {
                if audio.is_empty() {
                    return Err(Error::arg("the AED interface needs audio"));
                }
                let cross = self.cross_caches(&audio);
                let mut ids = config.prompt.clone();
                ids.extend_from_slice(labels);
                let mask = build_attention_mask(config, 0, ids.len())?;
                self.pass(&[], embed_all(&ids)?, &mask, Some(&cross), record)
            }
        };
        let n = pass.outputs.len();
        let rows = pass.outputs[n - s..].iter().map(|x| self.log_probs(x)).collect();
        Ok((rows, pass.attention))
    }

    /// Next-label log-distributions for every input position: row `s` is
    /// `log p(· | labels[..=s], audio)`. `audio` must already have the
    /// decoder width; `None` runs the decoder as a pure language model.
    pub fn forward(
        &self,
        config: &InterfaceConfig,
        audio: Option<&EncoderOutput>,
        labels: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(config, audio, labels, false)?.0)
    }

    /// `-Σ log p(a_s | a_0..a_{s-1})` for `labels` = BOS … EOS.
    pub fn seq_cross_entropy(
        &self,
        config: &InterfaceConfig,
        audio: Option<&EncoderOutput>,
        labels: &[usize],
    ) -> Result<f64> {
        if labels.len() < 2 || labels.last() != Some(&self.eos) {
            return Err(Error::arg("scored sequence must be BOS … EOS"));
        }
        let rows = self.forward(config, audio, &labels[..labels.len() - 1])?;
        Ok(-rows.iter().zip(&labels[1..]).map(|(r, &l)| r[l]).sum::<f64>())
    }

    pub fn export_attention(
        &self,
        config: &InterfaceConfig,
        audio: Option<&EncoderOutput>,
        labels: &[usize],
    ) -> Result<AttentionExport> {
        Ok(AttentionExport { layers: self.run(config, audio, labels, true)?.1 })
    }

    /// State holding the audio prefix and prompt; feed BOS next.
    pub fn init_state(&self, config: &InterfaceConfig, audio: Option<&EncoderOutput>) -> Result<IncrementalState> {
        config.validate()?;
        let audio = self.audio_rows(audio)?;
        let mut state = IncrementalState {
            model_id: self.id,
            kind: config.kind,
            prefix: Arc::new(PrefixCache { layers: Vec::new(), cross: None }),
            text: None,
            position: 0,
            steps: 0,
            last: None,
        };
        match config.kind {
            InterfaceKind::Prefix | InterfaceKind::Merged => {
                let mut prefix = audio;
                for &l in &config.prompt {
                    prefix.push(self.embed(l)?);
                }
                let p = prefix.len();
                let layers = if config.kind == InterfaceKind::Prefix {
                    let mask = build_attention_mask(config, p, 0)?;
                    self.pass(&[], prefix, &mask, None, false).kv
                } else {
                    let mask = build_attention_mask(config, p, 0)?;
                    self.pass(&prefix, Vec::new(), &mask, None, false).kv
                };
                state.prefix = Arc::new(PrefixCache { layers, cross: None });
                state.position = p;
            }
            InterfaceKind::Aed => {
                if audio.is_empty() {
                    return Err(Error::arg("the AED interface needs audio"));
                }
                let empty = vec![KvCache::default(); self.weights.layers.len()];
                state.prefix = Arc::new(PrefixCache { layers: empty, cross: Some(self.cross_caches(&audio)) });
                for &l in &config.prompt {
                    state = self.step(&state, l)?.1;
                }
                state.last = None;
            }
        }
        Ok(state)
    }

    /// Consumes `label` and returns `log p(· | consumed labels)`.
    pub fn step(&self, state: &IncrementalState, label: usize) -> Result<(Vec<f64>, IncrementalState)> {
        if state.model_id != self.id {
            return Err(Error::arg("incremental state belongs to a different decoder"));
        }
        let mut x = self.embed(label)?;
        let pos = state.position;
        let mut chain = Vec::with_capacity(state.steps);
        let mut node = state.text.as_deref();
        while let Some(n) = node {
            chain.push(n);
            node = n.parent.as_deref();
        }
        chain.reverse();
        let mut new_keys = Vec::with_capacity(self.weights.layers.len());
        let mut new_values = Vec::with_capacity(self.weights.layers.len());
        for (li, layer) in self.weights.layers.iter().enumerate() {
            let a = &layer.self_attn;
            let xn = rmsnorm(&x, &layer.attn_norm);
            let q = self.query(a, &xn, Some(pos));
            let (k, v) = self.key_value(a, &xn, Some(pos));
            let pre = &state.prefix.layers[li];
            let keys = pre
                .keys
                .iter()
                .zip(&pre.values)
                .chain(chain.iter().map(|n| (&n.keys[li], &n.values[li])))
                .chain(std::iter::once((&k, &v)))
                .map(|(k, v)| (k.as_slice(), v.as_slice()));
            let (o, _) = self.attend(&q, keys);
            add_into(&mut x, &a.wo.matvec(&o));
            if let Some(cross) = &state.prefix.cross {
                self.cross_block(layer, &cross[li], &mut x);
            }
            self.ffn_block(layer, &mut x);
            new_keys.push(k);
            new_values.push(v);
        }
        let out = self.log_probs(&x);
        let next = IncrementalState {
            model_id: state.model_id,
            kind: state.kind,
            prefix: Arc::clone(&state.prefix),
            text: Some(Arc::new(StepNode { keys: new_keys, values: new_values, parent: state.text.clone() })),
            position: pos + 1,
            steps: state.steps + 1,
            last: Some(Arc::new(out.clone())),
        };
        Ok((out, next))
    }
}
