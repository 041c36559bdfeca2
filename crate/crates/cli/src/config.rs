//! Run configuration: a TOML file plus `--set key=value` overrides whose keys
//! are exactly the config keys (dotted for nested tables).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asrfuse::attn::{InterfaceConfig, InterfaceKind, PrefixAttention};
use asrfuse::ctc::{CtcOptimizations, OptimizationOrder};
use asrfuse::eval::NormalizeMode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Best path, no search.
    CtcGreedy,
    /// Frame-synchronous CTC prefix beam, optional same-vocabulary LM.
    CtcBeam,
    /// Frame-synchronous CTC beam with an LM on its own vocabulary.
    Delayed,
    /// Label-synchronous beam over CTC prefix scores, LM and decoder.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmKind {
    Ngram,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub path: PathBuf,
    #[serde(default = "LmConfig::default_kind")]
    pub kind: LmKind,
    /// LM vocabulary when it differs from the acoustic one (delayed fusion).
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default = "one")]
    pub weight: f64,
}

impl LmConfig {
    fn default_kind() -> LmKind {
        LmKind::Ngram
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub weights: PathBuf,
    #[serde(default = "DecoderConfig::default_interface")]
    pub interface: String,
    #[serde(default = "DecoderConfig::default_prefix_attention")]
    pub prefix_attention: String,
    /// Prompt tokens placed between the audio and BOS.
    #[serde(default)]
    pub prompt: Vec<String>,
    #[serde(default = "one")]
    pub weight: f64,
    /// Feed the posteriorgram as audio; without it the decoder acts as an LM.
    #[serde(default = "yes")]
    pub audio: bool,
    /// Frames concatenated by the adapter (ignored when `tau` compresses).
    #[serde(default = "one_usize")]
    pub concat: usize,
}

impl DecoderConfig {
    fn default_interface() -> String {
        "prefix".into()
    }

    fn default_prefix_attention() -> String {
        "causal".into()
    }

    pub fn interface(&self, prompt: Vec<usize>) -> Result<InterfaceConfig> {
        let kind: InterfaceKind = self.interface.parse()?;
        let cfg = match kind {
            InterfaceKind::Aed => InterfaceConfig::aed(),
            InterfaceKind::Merged => InterfaceConfig::merged(),
            InterfaceKind::Prefix => InterfaceConfig::prefix(self.prefix_attention.parse::<PrefixAttention>()?),
        };
        let cfg = cfg.with_prompt(prompt);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    /// Corpus directory as written by `synth` (vocab.txt, pg/, refs.txt).
    pub corpus: PathBuf,
    /// Overrides `<corpus>/vocab.txt`.
    pub vocab: Option<PathBuf>,
    pub out: PathBuf,
    pub beam: usize,
    /// Hypotheses written per utterance.
    pub nbest: usize,
    pub length_norm: bool,
    pub max_len_factor: f64,
    pub topk: Option<usize>,
    pub tau: Option<f64>,
    /// "compress-then-prune" or "prune-then-compress".
    pub opt_order: String,
    pub normalize: String,
    pub jobs: usize,
    pub seed: u64,
    pub ctc_weight: f64,
    pub lm: Option<LmConfig>,
    pub decoder: Option<DecoderConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::CtcBeam,
            corpus: PathBuf::from("corpus"),
            vocab: None,
            out: PathBuf::from("decode"),
            beam: 8,
            nbest: 5,
            length_norm: false,
            max_len_factor: 1.0,
            topk: None,
            tau: None,
            opt_order: "compress-then-prune".into(),
            normalize: "none".into(),
            jobs: 1,
            seed: 0,
            ctc_weight: 1.0,
            lm: None,
            decoder: None,
        }
    }
}

impl RunConfig {
    /// Checks everything that can be checked without reading model files.
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            bail!("beam must be at least 1");
        }
        if self.nbest == 0 {
            bail!("nbest must be at least 1");
        }
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        if !(self.max_len_factor > 0.0) {
            bail!("max_len_factor must be positive");
        }
        if self.topk == Some(0) {
            bail!("topk must be at least 1");
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0) {
                bail!("tau must be positive");
            }
        }
        self.order()?;
        self.normalize_mode()?;
        match self.strategy {
            Strategy::Delayed if self.lm.is_none() => bail!("strategy delayed needs an [lm] section"),
            Strategy::CtcGreedy | Strategy::CtcBeam | Strategy::Delayed if self.decoder.is_some() => {
                bail!("a decoder is only used by strategy joint")
            }
            _ => {}
        }
        if let Some(lm) = &self.lm {
            if lm.vocab.is_some() && self.strategy != Strategy::Delayed {
                bail!("a separate LM vocabulary needs strategy delayed");
            }
        }
        if let Some(d) = &self.decoder {
            d.interface(vec![])?;
            if d.concat == 0 {
                bail!("decoder.concat must be at least 1");
            }
        }
        Ok(())
    }

    pub fn order(&self) -> Result<OptimizationOrder> {
        Ok(match self.opt_order.as_str() {
            "compress-then-prune" => OptimizationOrder::CompressThenPrune,
            "prune-then-compress" => OptimizationOrder::PruneThenCompress,
            other => bail!("unknown opt_order {other:?}"),
        })
    }

    pub fn optimizations(&self) -> Result<CtcOptimizations> {
        Ok(CtcOptimizations { compress_tau: self.tau, topk: self.topk, keep_blank: true, order: self.order()? })
    }

    pub fn normalize_mode(&self) -> Result<NormalizeMode> {
        Ok(self.normalize.parse()?)
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| self.corpus.join("vocab.txt"))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Reads `path` (or starts from defaults), applies the overrides, and
/// deserializes into `T`.
pub fn load<T: DeserializeOwned + Serialize + Default>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::try_from(T::default())?,
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    T::deserialize(toml::Value::Table(value)).context("invalid configuration")
}

/// `a.b=value`; the value is read as a TOML literal, falling back to a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').with_context(|| format!("override {spec:?} is not key=value"))?;
    let value = parse_literal(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad override key {key:?}");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry.as_table_mut().with_context(|| format!("{p} is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
