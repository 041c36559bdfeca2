use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use asrfuse::attn::{adapter_apply, AdapterConfig, DecoderModel, DecoderWeights, HParams};
use asrfuse::eval::{corpus_wer, normalize_text, split_words, NormalizeMode};
use asrfuse::lm::{perplexity, retokenize, NGramModel};
use asrfuse::search::DecodeStats;
use asrfuse::synth::{gen_corpus, gen_lm_text, SynthConfig};
use asrfuse::{EncoderOutput, Posteriorgram};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod config;
mod corpus;
mod decode;

use config::{LmKind, RunConfig};
use decode::Decoder;

#[derive(Parser)]
#[command(name = "asrfuse", version, about = "CTC / LM / attention-decoder score fusion for ASR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode a corpus directory; writes n-best lists, hyps.txt and stats.txt.
    Decode(RunArgs),
    /// Corpus WER between two `id<TAB>text` files.
    Wer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value = "none")]
        normalize: NormalizeMode,
    },
    /// Perplexity of an LM on a text file (one sentence per line).
    Ppl {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long, value_enum, default_value = "ngram")]
        kind: KindArg,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long, value_enum, default_value = "token")]
        unit: Unit,
    },
    /// Train a stupid-backoff n-gram LM.
    LmTrain {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = 0.4)]
        backoff: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic posteriorgram corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        utts: usize,
        /// Also write this many LM training sentences to lm_text.txt.
        #[arg(long, default_value_t = 0)]
        lm_sentences: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config override, `key=value`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sweep beam / top-k / τ and print WER, RTF and candidate counters.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Beam sizes.
        #[arg(long, value_delimiter = ',', default_value = "8")]
        beams: Vec<usize>,
        /// `none`, `all` (k = V) or a number.
        #[arg(long, value_delimiter = ',', default_value = "none,all")]
        topks: Vec<String>,
        /// `none` or a threshold.
        #[arg(long, value_delimiter = ',', default_value = "none")]
        taus: Vec<String>,
    },
    /// Dump per-layer, per-head attention weights for one transcript.
    ExportAttn {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Transcript; BOS is prepended.
        #[arg(long)]
        text: String,
        /// Posteriorgram used as audio (required for aed).
        #[arg(long)]
        pg: Option<PathBuf>,
        #[arg(long, default_value = "prefix")]
        interface: String,
        #[arg(long, default_value = "causal")]
        prefix_attention: String,
        /// Prompt tokens, whitespace separated.
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write decoder weights: seeded random, or a bigram decoder distilled from an LM.
    InitWeights {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        /// Defaults to 32, or the vocabulary size when distilling.
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        ffn_dim: usize,
        /// LM to distill; its bigram distributions become the decoder output.
        #[arg(long)]
        distill: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ngram")]
        distill_kind: KindArg,
        /// Width of the audio features fed through the adapter (default: vocabulary size).
        #[arg(long)]
        audio_dim: Option<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, `key=value` with dotted keys (e.g. `lm.weight=0.5`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let cfg: RunConfig = config::load(self.config.as_deref(), &self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Ngram,
    Table,
}

impl From<KindArg> for LmKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Ngram => LmKind::Ngram,
            KindArg::Table => LmKind::Table,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Unit {
    Token,
    Word,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decode(args) => cmd_decode(args.load()?),
        Command::Wer { reference, hyp, normalize } => cmd_wer(&reference, &hyp, normalize),
        Command::Ppl { lm, kind, vocab, text, unit } => cmd_ppl(&lm, kind.into(), &vocab, &text, unit),
        Command::LmTrain { text, vocab, order, backoff, out } => cmd_lm_train(&text, &vocab, order, backoff, &out),
        Command::Synth { out, utts, lm_sentences, config, overrides } => {
            let cfg: SynthConfig = config::load(config.as_deref(), &overrides)?;
            cmd_synth(&cfg, &out, utts, lm_sentences)
        }
        Command::Bench { run, beams, topks, taus } => cmd_bench(run.load()?, &beams, &topks, &taus),
        Command::ExportAttn { weights, vocab, text, pg, interface, prefix_attention, prompt, out } => {
            let d = config::DecoderConfig {
                weights,
                interface,
                prefix_attention,
                prompt: prompt.split_whitespace().map(str::to_owned).collect(),
                weight: 1.0,
                audio: pg.is_some(),
                concat: 1,
            };
            cmd_export_attn(&d, &vocab, &text, pg.as_deref(), &out)
        }
        Command::InitWeights { vocab, out, seed, layers, d_model, heads, ffn_dim, distill, distill_kind, audio_dim } => {
            let vocab = decode::read_vocab(&vocab)?;
            let audio_dim = Some(audio_dim.unwrap_or(vocab.len()));
            let mut hp = HParams { layers, heads, ffn_dim, ..HParams::toy(vocab.len()) };
            let weights = match distill {
                Some(path) => {
                    hp.d_model = d_model.unwrap_or(vocab.len().next_multiple_of(heads));
                    let lm = decode::load_lm(&path, distill_kind.into(), &vocab)?;
                    DecoderWeights::distill_bigram(hp, lm.as_ref(), audio_dim)?
                }
                None => {
                    hp.d_model = d_model.unwrap_or(32);
                    DecoderWeights::random(hp, audio_dim, seed)?
                }
            };
            weights.write(&out).with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
    }
}

fn cmd_decode(cfg: RunConfig) -> Result<()> {
    let dec = Decoder::new(cfg)?;
    let cfg = &dec.cfg;
    let ids = corpus::utterance_ids(&cfg.corpus)?;
    // fail on missing inputs before any decoding starts
    for id in &ids {
        let p = corpus::pg_path(&cfg.corpus, id);
        if !p.is_file() {
            bail!("utterance {id}: missing posteriorgram {}", p.display());
        }
    }
    let results = dec.decode_corpus(&ids)?;

    let nbest_dir = cfg.out.join("nbest");
    fs::create_dir_all(&nbest_dir).with_context(|| format!("creating {}", nbest_dir.display()))?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml()?)?;
    let mut stats = DecodeStats::default();
    let mut hyps = Vec::with_capacity(results.len());
    for (id, d) in &results {
        fs::write(nbest_dir.join(format!("{id}.txt")), d.nbest.to_text(&dec.vocab))?;
        stats.merge(&d.stats);
        hyps.push((id.as_str(), dec.transcript(&d.nbest)));
    }
    corpus::write_keyed(&cfg.out.join("hyps.txt"), hyps.iter().map(|(i, h)| (*i, h.as_str())))?;
    fs::write(cfg.out.join("stats.txt"), decode::format_stats(&stats, results.len()))?;

    if let Some(refs) = corpus::refs(&cfg.corpus)? {
        let counts = decode::score(&refs, hyps.iter().map(|(i, h)| (*i, h.as_str())), cfg.normalize_mode()?)?;
        let line = decode::format_counts(&counts);
        fs::write(cfg.out.join("wer.txt"), format!("{line}\n"))?;
        println!("{line}");
    }
    println!("decoded {} utterances into {}", results.len(), cfg.out.display());
    Ok(())
}

fn cmd_wer(reference: &Path, hyp: &Path, mode: NormalizeMode) -> Result<()> {
    let refs = corpus::read_keyed(reference)?;
    let hyps = corpus::read_keyed(hyp)?;
    if let Some(extra) = hyps.keys().find(|k| !refs.contains_key(*k)) {
        bail!("hypothesis id {extra:?} has no reference");
    }
    let normalized: Vec<(Vec<String>, Vec<String>)> = refs
        .iter()
        .map(|(id, r)| {
            let h = hyps.get(id).map(String::as_str).unwrap_or("");
            let words = |s: &str| split_words(&normalize_text(s, mode)).into_iter().map(str::to_owned).collect();
            (words(r), words(h))
        })
        .collect();
    let counts = corpus_wer(normalized.iter().map(|(r, h)| (r.as_slice(), h.as_slice())))?;
    if counts.ref_len == 0 {
        bail!("references are empty");
    }
    println!("{}", decode::format_counts(&counts));
    Ok(())
}

fn read_sentences(text: &Path) -> Result<Vec<String>> {
    let raw = fs::read_to_string(text).with_context(|| format!("reading {}", text.display()))?;
    // refs-style files carry an id column
    Ok(raw
        .lines()
        .map(|l| l.split_once('\t').map_or(l, |(_, t)| t).trim().to_owned())
        .filter(|l| !l.is_empty())
        .collect())
}

fn tokenize_all(vocab: &asrfuse::Vocabulary, sentences: &[String], path: &Path) -> Result<Vec<Vec<usize>>> {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| retokenize(vocab, s).with_context(|| format!("{}: sentence {}", path.display(), i + 1)))
        .collect()
}

fn cmd_ppl(lm: &Path, kind: LmKind, vocab: &Path, text: &Path, unit: Unit) -> Result<()> {
    let vocab = decode::read_vocab(vocab)?;
    let model = decode::load_lm(lm, kind, &vocab)?;
    let sentences = read_sentences(text)?;
    if sentences.is_empty() {
        bail!("{} has no sentences", text.display());
    }
    let report = perplexity(model.as_ref(), &tokenize_all(&vocab, &sentences, text)?);
    let ppl = match unit {
        Unit::Token => report.token_ppl,
        Unit::Word => report.word_ppl,
    };
    // 9 decimals hide the last-ulp noise of exp(ln V)
    println!("{:?}", (ppl * 1e9).round() / 1e9);
    Ok(())
}

fn cmd_lm_train(text: &Path, vocab: &Path, order: usize, backoff: f64, out: &Path) -> Result<()> {
    let vocab = decode::read_vocab(vocab)?;
    let sentences = read_sentences(text)?;
    let corpus = tokenize_all(&vocab, &sentences, text)?;
    let lm = NGramModel::train(&vocab, &corpus, order, backoff)?;
    lm.write(out).with_context(|| format!("writing {}", out.display()))?;
    println!("trained {order}-gram on {} sentences ({} contexts)", corpus.len(), lm.num_contexts());
    Ok(())
}

fn cmd_synth(cfg: &SynthConfig, out: &Path, utts: usize, lm_sentences: usize) -> Result<()> {
    let corpus_utts = gen_corpus(cfg, utts)?;
    fs::create_dir_all(out.join(corpus::PG_DIR)).with_context(|| format!("creating {}", out.display()))?;
    cfg.vocab()?.write(out.join("vocab.txt"))?;
    for u in &corpus_utts {
        u.pg.write(corpus::pg_path(out, &u.id))?;
    }
    corpus::write_keyed(&out.join(corpus::REFS), corpus_utts.iter().map(|u| (u.id.as_str(), u.reference.as_str())))?;
    if lm_sentences > 0 {
        let mut text = gen_lm_text(cfg, lm_sentences)?.join("\n");
        text.push('\n');
        fs::write(out.join("lm_text.txt"), text)?;
    }
    fs::write(out.join("config.toml"), toml::to_string(cfg)?)?;
    println!("wrote {} utterances to {}", corpus_utts.len(), out.display());
    Ok(())
}

fn parse_opt<T: std::str::FromStr>(s: &str, all: Option<T>) -> Result<Option<T>> {
    match s.trim() {
        "none" => Ok(None),
        "all" => all.map(Some).context("`all` is only valid for top-k"),
        v => v.parse().map(Some).map_err(|_| anyhow::anyhow!("bad grid value {v:?}")),
    }
}

fn cmd_bench(base: RunConfig, beams: &[usize], topks: &[String], taus: &[String]) -> Result<()> {
    let refs = corpus::refs(&base.corpus)?.context("bench needs refs.txt in the corpus")?;
    let ids: Vec<String> = refs.keys().cloned().collect();
    let v = decode::read_vocab(&base.vocab_path())?.len();
    let topks = topks.iter().map(|s| parse_opt(s, Some(v))).collect::<Result<Vec<_>>>()?;
    let taus = taus.iter().map(|s| parse_opt::<f64>(s, None)).collect::<Result<Vec<_>>>()?;
    let show = |o: Option<String>| o.unwrap_or_else(|| "none".into());
    println!("beam\ttopk\ttau\twer\trtf\tpeak_candidates\tscorer_evals");
    for &beam in beams {
        for &topk in &topks {
            for &tau in &taus {
                let cfg = RunConfig { beam, topk, tau, ..base.clone() };
                let dec = Decoder::new(cfg)?;
                let results = dec.decode_corpus(&ids)?;
                let mut stats = DecodeStats::default();
                let hyps: Vec<(String, String)> = results
                    .iter()
                    .map(|(id, d)| {
                        stats.merge(&d.stats);
                        (id.clone(), dec.transcript(&d.nbest))
                    })
                    .collect();
                let counts = decode::score(&refs, hyps.iter().map(|(i, h)| (i.as_str(), h.as_str())), dec.cfg.normalize_mode()?)?;
                println!(
                    "{beam}\t{}\t{}\t{:.2}\t{:.4}\t{}\t{}",
                    show(topk.map(|k| k.to_string())),
                    show(tau.map(|t| t.to_string())),
                    counts.wer().unwrap_or(0.0) * 100.0,
                    stats.rtf().unwrap_or(0.0),
                    stats.peak_candidates,
                    stats.scorer_evals
                );
            }
        }
    }
    Ok(())
}

fn cmd_export_attn(d: &config::DecoderConfig, vocab: &Path, text: &str, pg: Option<&Path>, out: &Path) -> Result<()> {
    let vocab = decode::read_vocab(vocab)?;
    let weights = DecoderWeights::read(&d.weights).with_context(|| format!("reading {}", d.weights.display()))?;
    let model = DecoderModel::new(weights, &vocab)?;
    let prompt = d
        .prompt
        .iter()
        .map(|t| vocab.id(t).with_context(|| format!("prompt token {t:?} not in the vocabulary")))
        .collect::<Result<Vec<_>>>()?;
    let interface = d.interface(prompt)?;
    let audio = match pg {
        Some(p) => {
            let pg = Posteriorgram::read(p).with_context(|| format!("reading {}", p.display()))?;
            let enc = EncoderOutput::from_posteriorgram(&pg);
            let proj = model.weights().adapter.as_ref();
            Some(adapter_apply(&enc, &AdapterConfig { project: proj.is_some(), ..AdapterConfig::identity() }, None, proj)?)
        }
        None => None,
    };
    let mut labels = vec![vocab.bos_id()];
    labels.extend(retokenize(&vocab, text)?);
    let export = model.export_attention(&interface, audio.as_ref(), &labels)?;
    export.to_tensor_file()?.write(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} layers of attention to {}", export.layers.len(), out.display());
    Ok(())
}
