//! The `entroscope` command line.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 checksum or integrity failure.

mod config;
mod manifest;
mod plot;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

pub use config::Config;
pub use manifest::{file_checksum, RunManifest};
pub use plot::{line_chart, Series};

use crate::audit::{audit_ledger, run_markov_audit, AuditReport, AuditRow, AuditSetup};
use crate::codec::{Codec, HEADER_BYTES};
use crate::corpus::read_corpus;
use crate::entropy::{
    causal_entropies, occlusion_scores, second_order_entropies, single_model_entropy, two_model_entropy, EntropyRecord, MarkovSource, Method, OcclusionMetric,
};
use crate::error::{Error, ErrorKind, Result};
use crate::model::{Family, Model, ModelConfig, QuantFormat};
use crate::tokenizer::{corpus_stats, CorpusStats, Tokenizer};
use crate::train::{Objective, RunLedger, TrainConfig, Trainer, Windows};

pub const SEED_ENV: &str = "ENTROSCOPE_SEED";

#[derive(Parser, Debug)]
#[command(name = "entroscope", version, about = "Neural entropy estimation and model-driven compression")]
pub struct Cli {
    /// Seed; falls back to $ENTROSCOPE_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for document-parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a byte-level BPE tokenizer and print corpus statistics.
    Tokenize(TokenizeArgs),
    /// Train a model; writes model.bin, state.bin, ledger.csv.
    Train(TrainArgs),
    /// Per-token entropy estimates as TSV.
    Entropy(EntropyArgs),
    /// Compress a text file with a causal or entropy estimation model.
    Compress(CompressArgs),
    /// Restore a compressed file.
    Decompress(DecompressArgs),
    /// Plot and tabulate run ledgers.
    Report(ReportArgs),
    /// Audit train and held-out loss against a known source entropy.
    Audit(AuditArgs),
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Bytes plus merges; 256 gives a plain byte tokenizer.
    #[arg(long, default_value_t = 8192)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key = value config with [data], [model] and [train] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Tokenizer file, or `bytes`.
    #[arg(long)]
    pub tokenizer: Option<String>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Entropy TSV; switches token-predicting models to the entropy-scaled
    /// objective and supplies second-order targets.
    #[arg(long)]
    pub entropy_targets: Option<PathBuf>,
    /// Continue from `<out>/state.bin` when present.
    #[arg(long)]
    pub resume: bool,
    /// Save and exit once this many steps are done.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// `section.key=value` overrides; `--section.key value` works too.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EntropyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// The n+1 context model for `two_model`.
    #[arg(long)]
    pub model2: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: String,
    #[arg(long)]
    pub corpus: PathBuf,
    /// causal, two_model, single_model, occlusion_l1, occlusion_cos, second_order
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub out: PathBuf,
    /// HTML rendering of the text coloured by entropy.
    #[arg(long)]
    pub annotate: Option<PathBuf>,
    /// Leading tokens of each document flagged low-confidence.
    #[arg(long, default_value_t = 100)]
    pub low_confidence: usize,
    /// Second-order models trained on shifted targets.
    #[arg(long)]
    pub shifted: bool,
    /// Only the first N documents.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tokenizer: String,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Embedding format: fp16, e4m3, e5m2, int8_absmax.
    #[arg(long)]
    pub quant: Option<String>,
    /// Shell command compressing stdin to stdout, reported for comparison.
    #[arg(long)]
    pub baseline: Option<String>,
}

#[derive(Args, Debug)]
pub struct DecompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tokenizer: String,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub quant: Option<String>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Ledger CSV, optionally `label=path`. Repeatable.
    #[arg(long = "ledger", required = true)]
    pub ledgers: Vec<String>,
    /// Output directory for loss.svg and loss.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "loss")]
    pub title: String,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// Transition matrix, one row per line.
    #[arg(long)]
    pub markov: Option<PathBuf>,
    /// Config with [model], [train] and [audit] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Audit an existing ledger instead of training.
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    /// Source entropy (nats/token) for `--ledger`.
    #[arg(long)]
    pub entropy: Option<f64>,
    /// Standard error allowed for `--ledger`.
    #[arg(long, default_value_t = 0.0)]
    pub se: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Exit code of an error.
pub fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 1,
        ErrorKind::Runtime => 2,
        ErrorKind::Integrity => 3,
    }
}

/// Rewrites `--section.key=value` and `--section.key value` into `--set`.
pub fn expand_dotted_flags<I: IntoIterator<Item = String>>(args: I) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let name = a.strip_prefix("--").map(|r| r.split('=').next().unwrap_or(r));
        match name {
            Some(n) if n.contains('.') && config::SECTIONS.iter().any(|s| n.starts_with(&format!("{s}."))) => {
                let kv = if a.contains('=') {
                    a[2..].to_string()
                } else {
                    format!("{n}={}", it.next().unwrap_or_default())
                };
                out.push("--set".into());
                out.push(kv);
            }
            _ => out.push(a),
        }
    }
    out
}

pub fn main() -> ExitCode {
    let args = expand_dotted_flags(std::env::args());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer"))),
        Err(_) => Ok(0),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = resolve_seed(cli.seed)?;
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Tokenize(a) => cmd_tokenize(&a, seed),
        Command::Train(a) => cmd_train(&a, seed),
        Command::Entropy(a) => cmd_entropy(&a, seed, threads),
        Command::Compress(a) => cmd_compress(&a, seed),
        Command::Decompress(a) => cmd_decompress(&a, seed),
        Command::Report(a) => cmd_report(&a, seed),
        Command::Audit(a) => cmd_audit(&a, seed),
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_tokenizer(spec: &str, manifest: &mut RunManifest) -> Result<Tokenizer> {
    if spec == "bytes" {
        return Ok(Tokenizer::bytes());
    }
    let p = Path::new(spec);
    manifest.input(p)?;
    Tokenizer::load(p)
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> Result<Model<f32>> {
    manifest.input(path)?;
    Model::load(path)
}

/// Maps `f` over `items` on `threads` workers; results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn cmd_tokenize(a: &TokenizeArgs, seed: u64) -> Result<()> {
    let t0 = Instant::now();
    let mut m = RunManifest::new("tokenize", seed);
    m.input(&a.corpus)?;
    m.config.insert("vocab_size".into(), a.vocab_size.to_string());
    let docs = read_corpus(&a.corpus)?;
    let tok = if a.vocab_size == 256 { Tokenizer::bytes() } else { Tokenizer::train(&docs, a.vocab_size)? };
    tok.save(&a.out)?;
    let stats = corpus_stats(&tok, &docs)?;
    println!("documents {}", docs.len());
    println!("vocab_size {}", tok.vocab_size());
    println!("tokens {}", stats.tokens);
    println!("bytes {}", stats.bytes);
    println!("bytes_per_token {:.4}", stats.bytes_per_token());
    println!("tokenizer_checksum {:016x}", tok.checksum());
    m.output(&a.out)?;
    m.wall_time_s = t0.elapsed().as_secs_f64();
    m.write(&parent_dir(&a.out))
}

/// Effective configuration of a training command.
fn train_config(a: &TrainArgs, seed: u64) -> Result<Config> {
    let mut cfg = match &a.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut set = |k: &str, v: Option<String>| -> Result<()> {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
        Ok(())
    };
    set("data.corpus", a.corpus.as_ref().map(|p| p.display().to_string()))?;
    set("data.tokenizer", a.tokenizer.clone())?;
    set("data.entropy_targets", a.entropy_targets.as_ref().map(|p| p.display().to_string()))?;
    set("model.family", a.family.clone())?;
    set("model.backbone", a.backbone.clone())?;
    set("train.total_steps", a.steps.map(|s| s.to_string()))?;
    cfg.apply_overrides(&a.overrides)?;
    if a.config.is_none() || cfg.get("train.seed").is_none() || std::env::var(SEED_ENV).is_ok() {
        cfg.set("train.seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn parse_key<T: std::str::FromStr>(cfg: &Config, key: &str, default: T) -> Result<T> {
    match cfg.get(key) {
        Some(v) => v.parse().map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}"))),
        None => Ok(default),
    }
}

fn cmd_train(a: &TrainArgs, seed: u64) -> Result<()> {
    let t0 = Instant::now();
    let cfg = train_config(a, seed)?;
    let seed: u64 = parse_key(&cfg, "train.seed", seed)?;
    let mut manifest = RunManifest::new("train", seed);
    let corpus = PathBuf::from(cfg.get("data.corpus").ok_or_else(|| Error::Config("data.corpus is required".into()))?);
    manifest.input(&corpus)?;
    let tok = load_tokenizer(cfg.get("data.tokenizer").unwrap_or("bytes"), &mut manifest)?;
    let texts = read_corpus(&corpus)?;
    let mut docs: Vec<Vec<u32>> = texts.iter().map(|t| tok.encode(t)).collect();

    let mut model_cfg = ModelConfig {
        vocab: tok.len(),
        ..ModelConfig::default()
    };
    model_cfg.apply_kv(cfg.section("model"))?;
    if model_cfg.vocab != tok.len() {
        return Err(Error::Config(format!("model.vocab = {} but the tokenizer has {} ids", model_cfg.vocab, tok.len())));
    }
    model_cfg.validate()?;
    let total = parse_key(&cfg, "train.total_steps", 1000usize)?;
    let batch = parse_key(&cfg, "train.batch_size", 16usize)?;
    let mut train_cfg = TrainConfig::new(model_cfg.backbone, total, batch);
    train_cfg.apply_kv(cfg.section("train"))?;

    let targets = match cfg.get("data.entropy_targets") {
        Some(p) => {
            let p = PathBuf::from(p);
            manifest.input(&p)?;
            let records = EntropyRecord::from_tsv(&std::fs::read_to_string(&p)?)?;
            let lens: Vec<usize> = docs.iter().map(Vec::len).collect();
            let all = EntropyRecord::to_targets(&records, &lens)?;
            // Documents without any estimate carry no signal for either objective.
            let (kept, t): (Vec<Vec<u32>>, Vec<Vec<f64>>) = docs.drain(..).zip(all).filter(|(_, t)| t.iter().any(|x| x.is_finite())).unzip();
            if kept.is_empty() {
                return Err(Error::Empty("documents with entropy targets"));
            }
            if kept.len() < lens.len() {
                eprintln!("training on the {} of {} documents that have entropy targets", kept.len(), lens.len());
            }
            docs = kept;
            Some(t)
        }
        None => None,
    };
    match (&targets, model_cfg.family) {
        (None, Family::SecondOrder) => return Err(Error::Config("second-order training needs --entropy-targets".into())),
        (Some(_), f) if f != Family::SecondOrder && cfg.get("train.objective").is_none() => train_cfg.objective = Objective::EntropyScaled,
        _ => {}
    }

    let frac: f64 = parse_key(&cfg, "data.eval_fraction", 0.1)?;
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::Config("data.eval_fraction must be in [0, 1)".into()));
    }
    let n_eval = if frac > 0.0 && docs.len() >= 2 { ((docs.len() as f64 * frac).round() as usize).clamp(1, docs.len() - 1) } else { 0 };
    let split = docs.len() - n_eval;
    let build = |range: std::ops::Range<usize>| match &targets {
        Some(t) => Windows::with_entropy(&docs[range.clone()], &t[range], model_cfg.n_ctx),
        None => Windows::from_documents(&docs[range], model_cfg.n_ctx),
    };
    let train = build(0..split)?;
    let eval = if n_eval > 0 { Some(build(split..docs.len())?) } else { None };

    std::fs::create_dir_all(&a.out)?;
    let state_path = a.out.join("state.bin");
    let mut trainer = if a.resume && state_path.exists() {
        let t = Trainer::load(&state_path)?;
        if t.config() != &train_cfg || t.model().config() != &model_cfg {
            return Err(Error::Config(format!("--resume needs the model and train settings of the run saved in {}", a.out.display())));
        }
        eprintln!("resuming at step {}", t.step_count());
        t
    } else {
        Trainer::new(Model::new(model_cfg.clone(), seed)?, train_cfg)?
    };
    eprintln!(
        "{} {} with {} parameters; {} train / {} eval windows",
        trainer.model().config().family,
        trainer.model().config().backbone,
        trainer.model().parameter_count(),
        train.len(),
        eval.as_ref().map_or(0, Windows::len)
    );
    while !trainer.is_done() {
        let row = trainer.step(&train, eval.as_ref())?;
        if let Some(e) = row.eval_loss {
            eprintln!("step {:>6}  tokens {:>10}  train {:.4}  eval {:.4}", row.step, row.tokens, row.train_loss, e);
            trainer.save(&state_path)?;
        }
        if a.stop_after.is_some_and(|s| trainer.step_count() >= s) {
            break;
        }
    }
    trainer.save(&state_path)?;
    let ledger_path = a.out.join("ledger.csv");
    trainer.ledger().save(&ledger_path)?;
    let model_path = a.out.join("model.bin");
    trainer.best_model().save(&model_path)?;
    let cfg_path = a.out.join("config.conf");
    std::fs::write(&cfg_path, cfg.to_text())?;
    if let Some(l) = trainer.ledger().last() {
        println!("steps {}", l.step);
        println!("final_train_loss {}", l.train_loss);
    }
    if let Some((s, b)) = trainer.ledger().best() {
        println!("best_eval_loss {b} at step {s}");
    }
    manifest.config = cfg.flatten();
    for p in [&state_path, &ledger_path, &model_path, &cfg_path] {
        manifest.output(p)?;
    }
    manifest.wall_time_s = t0.elapsed().as_secs_f64();
    manifest.write(&a.out)
}

fn cmd_entropy(a: &EntropyArgs, seed: u64, threads: usize) -> Result<()> {
    let t0 = Instant::now();
    let mut manifest = RunManifest::new("entropy", seed);
    let method: Method = a.method.parse()?;
    let tok = load_tokenizer(&a.tokenizer, &mut manifest)?;
    let model = load_model(&a.model, &mut manifest)?;
    let model2 = match &a.model2 {
        Some(p) => Some(load_model(p, &mut manifest)?),
        None => None,
    };
    manifest.input(&a.corpus)?;
    let mut texts = read_corpus(&a.corpus)?;
    if let Some(n) = a.limit {
        texts.truncate(n);
    }
    let docs: Vec<(usize, Vec<u32>)> = texts.iter().map(|t| tok.encode(t)).enumerate().collect();
    if model.config().vocab != tok.len() {
        return Err(Error::Config(format!("model vocabulary {} does not match tokenizer ({} ids)", model.config().vocab, tok.len())));
    }
    let need = |f: Family| -> Result<()> {
        if model.config().family != f {
            return Err(Error::Family(format!("method {method} needs a {f} model, got {}", model.config().family)));
        }
        Ok(())
    };
    match method {
        Method::Causal => need(Family::Causal)?,
        Method::OcclusionL1 | Method::OcclusionCos => need(Family::Eem)?,
        Method::SecondOrder => need(Family::SecondOrder)?,
        Method::TwoModel if model2.is_none() => return Err(Error::Config("two_model needs --model2 (context n+1)".into())),
        _ => {}
    }
    let per_doc = par_map(&docs, threads, |(_, d)| match method {
        Method::Causal => causal_entropies(&model, d),
        Method::TwoModel => two_model_entropy(&model, model2.as_ref().expect("checked"), d),
        Method::SingleModel => single_model_entropy(&model, d),
        Method::OcclusionL1 => occlusion_scores(&model, d, OcclusionMetric::L1),
        Method::OcclusionCos => occlusion_scores(&model, d, OcclusionMetric::Cosine),
        Method::SecondOrder => second_order_entropies(&model, d, a.shifted),
    })?;
    let mut records = Vec::new();
    for ((i, d), e) in docs.iter().zip(&per_doc) {
        let texts: Vec<String> = d.iter().map(|&t| tok.token_text(t)).collect();
        records.extend(EntropyRecord::for_document(*i, &texts, e, method, a.low_confidence));
    }
    std::fs::write(&a.out, EntropyRecord::to_tsv(&records))?;
    manifest.output(&a.out)?;
    let (neg, worst) = EntropyRecord::negative_summary(&records);
    println!("records {}", records.len());
    println!("negative_estimates {neg} (largest magnitude {worst:.4} nats)");
    if let Some(html) = &a.annotate {
        std::fs::write(html, annotate_html(&records))?;
        manifest.output(html)?;
    }
    manifest.config.insert("method".into(), method.to_string());
    manifest.config.insert("low_confidence".into(), a.low_confidence.to_string());
    manifest.wall_time_s = t0.elapsed().as_secs_f64();
    manifest.write(&parent_dir(&a.out))
}

/// Tokens coloured from green (low) to red (high entropy).
fn annotate_html(records: &[EntropyRecord]) -> String {
    let finite = || records.iter().map(|r| r.entropy).filter(|e| e.is_finite());
    let lo = finite().fold(f64::INFINITY, f64::min);
    let hi = finite().fold(f64::NEG_INFINITY, f64::max);
    let mut s = String::from("<!doctype html>\n<meta charset=\"utf-8\">\n<body style=\"font-family:monospace;white-space:pre-wrap\">\n");
    let mut doc = None;
    for r in records {
        if doc != Some(r.document) {
            if doc.is_some() {
                s.push_str("\n<hr>\n");
            }
            doc = Some(r.document);
        }
        let f = if r.entropy.is_finite() && hi > lo { (r.entropy - lo) / (hi - lo) } else { 0.0 };
        let (red, green) = ((255.0 * f) as u8, (255.0 * (1.0 - f)) as u8);
        let text = r.token_text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        write!(s, "<span title=\"{:.3}\" style=\"background:rgba({red},{green},0,0.35)\">{text}</span>", r.entropy).unwrap();
    }
    s.push_str("\n</body>\n");
    s
}

fn codec_for<'m>(model: &'m Model<f32>, tok: &Tokenizer, quant: Option<&str>) -> Result<Codec<'m>> {
    if model.config().vocab != tok.len() {
        return Err(Error::Config(format!("model vocabulary {} does not match tokenizer ({} ids)", model.config().vocab, tok.len())));
    }
    let codec = Codec::new(model, tok.checksum())?;
    Ok(match quant {
        Some(q) => codec.with_quant(q.parse::<QuantFormat>()?),
        None => codec,
    })
}

fn cmd_compress(a: &CompressArgs, seed: u64) -> Result<()> {
    let t0 = Instant::now();
    let mut manifest = RunManifest::new("compress", seed);
    let tok = load_tokenizer(&a.tokenizer, &mut manifest)?;
    let model = load_model(&a.model, &mut manifest)?;
    manifest.input(&a.input)?;
    let text = std::fs::read(&a.input)?;
    let text = String::from_utf8(text).map_err(|e| Error::Config(format!("input is not UTF-8: {e}")))?;
    let codec = codec_for(&model, &tok, a.quant.as_deref())?;
    let tokens = tok.encode(&text);
    let enc = codec.encode(&tokens)?;
    std::fs::write(&a.out, &enc.bytes)?;
    manifest.output(&a.out)?;
    let bytes = text.len() as u64;
    let s = &enc.stats;
    println!("tokens {}", s.tokens);
    println!("bytes {bytes}");
    println!("header_bits {}", HEADER_BYTES * 8);
    println!("payload_bits {}", s.payload_bits);
    println!("body_bits {}", s.body_bits);
    if bytes > 0 && s.tokens > 0 {
        let stats = CorpusStats::new(s.tokens, bytes)?;
        let cfg = model.config();
        let (n_p, b_p, w) = if cfg.family == Family::Eem { (cfg.d_e, codec.quant().bits(), s.windows as usize) } else { (0, 0, 0) };
        let analytic = crate::entropy::CompressionReport::new(s.model_nats / s.tokens as f64, n_p, b_p, cfg.n_ctx, w, &stats)?;
        let achieved = (s.payload_bits + s.body_bits) as f64 / bytes as f64;
        println!("achieved_bpb {achieved:.5}");
        println!("analytic_bpb {:.5}", analytic.bpb);
        println!("relative_gap {:.5}", (achieved - analytic.bpb).abs() / analytic.bpb);
        println!("file_bpb {:.5}", enc.bytes.len() as f64 * 8.0 / bytes as f64);
        if let Some(cmd) = &a.baseline {
            let out = std::process::Command::new("sh")
                .arg("-c")
                .arg(cmd)
                .stdin(std::fs::File::open(&a.input)?)
                .output()?;
            if !out.status.success() {
                eprintln!("warning: baseline command failed: {}", String::from_utf8_lossy(&out.stderr).trim());
            } else {
                println!("baseline_bpb {:.5}", out.stdout.len() as f64 * 8.0 / bytes as f64);
            }
        }
    }
    manifest.config.insert("quant".into(), codec.quant().to_string());
    manifest.wall_time_s = t0.elapsed().as_secs_f64();
    manifest.write(&parent_dir(&a.out))
}

fn cmd_decompress(a: &DecompressArgs, seed: u64) -> Result<()> {
    let t0 = Instant::now();
    let mut manifest = RunManifest::new("decompress", seed);
    let tok = load_tokenizer(&a.tokenizer, &mut manifest)?;
    let model = load_model(&a.model, &mut manifest)?;
    manifest.input(&a.input)?;
    let bytes = std::fs::read(&a.input)?;
    let quant = crate::codec::Header::parse(&bytes)?.quant.map(|q| q.to_string());
    let codec = codec_for(&model, &tok, a.quant.as_deref().or(quant.as_deref()))?;
    let tokens = codec.decode(&bytes)?;
    std::fs::write(&a.out, tok.decode_bytes(&tokens)?)?;
    manifest.output(&a.out)?;
    println!("tokens {}", tokens.len());
    manifest.wall_time_s = t0.elapsed().as_secs_f64();
    manifest.write(&parent_dir(&a.out))
}

fn cmd_report(a: &ReportArgs, seed: u64) -> Result<()> {
    let t0 = Instant::now();
    let mut manifest = RunManifest::new("report", seed);
    let mut series = Vec::new();
    let mut csv = String::from("run,step,lr,train_loss,scaled_loss,eval_loss,tokens\n");
    for (i, spec) in a.ledgers.iter().enumerate() {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let label = p.parent().and_then(|d| d.file_name()).map_or_else(|| spec.clone(), |d| d.to_string_lossy().into_owned());
                (label, p)
            }
        };
        manifest.input(&path)?;
        let ledger = RunLedger::load(&path)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in ledger.rows() {
            writeln!(csv, "{label},{},{},{},{},{},{}", r.step, r.lr, r.train_loss, opt(r.scaled_loss), opt(r.eval_loss), r.tokens).unwrap();
        }
        series.push(Series {
            label: format!("{label} train"),
            points: ledger.rows().iter().map(|r| (r.tokens as f64, r.train_loss)).collect(),
            dashed: false,
            color: i,
        });
        let evals: Vec<(f64, f64)> = ledger.rows().iter().filter_map(|r| r.eval_loss.map(|e| (r.tokens as f64, e))).collect();
        if evals.is_empty() {
            eprintln!("warning: {} has no eval_loss values; eval curve omitted", path.display());
        } else {
            series.push(Series {
                label: format!("{label} eval"),
                points: evals,
                dashed: true,
                color: i,
            });
        }
    }
    std::fs::create_dir_all(&a.out)?;
    let svg_path = a.out.join("loss.svg");
    let csv_path = a.out.join("loss.csv");
    std::fs::write(&svg_path, line_chart(&a.title, "tokens", "loss (nats/token)", &series))?;
    std::fs::write(&csv_path, csv)?;
    manifest.output(&svg_path)?;
    manifest.output(&csv_path)?;
    println!("wrote {} and {}", svg_path.display(), csv_path.display());
    manifest.wall_time_s = t0.elapsed().as_secs_f64();
    manifest.write(&a.out)
}

fn print_audit_row(r: &AuditRow) {
    println!(
        "{:>7} {:>10} {:>9.4} {:>9.4} {:>9.4} {:>6}",
        r.step,
        r.tokens,
        r.train_ce,
        r.test_ce,
        r.verdict.slack,
        if r.verdict.pass { "ok" } else { "FAIL" }
    );
}

fn cmd_audit(a: &AuditArgs, seed: u64) -> Result<()> {
    let t0 = Instant::now();
    let mut manifest = RunManifest::new("audit", seed);
    std::fs::create_dir_all(&a.out)?;
    let report = match (&a.ledger, &a.markov) {
        (Some(path), None) => {
            let h = a.entropy.ok_or_else(|| Error::Config("--ledger needs --entropy".into()))?;
            manifest.input(path)?;
            let ledger = RunLedger::load(path)?;
            let rows: Vec<AuditRow> = audit_ledger(&ledger, h, a.se)
                .into_iter()
                .map(|(r, v)| AuditRow {
                    step: r.step,
                    tokens: r.tokens,
                    train_ce: r.train_loss,
                    test_ce: r.eval_loss.expect("evaluated rows"),
                    verdict: v,
                })
                .collect();
            if rows.is_empty() {
                return Err(Error::Empty("ledger rows with eval_loss"));
            }
            AuditReport {
                entropy_rate: h,
                plug_in_train: f64::NAN,
                plug_in_test: f64::NAN,
                std_err: a.se,
                rows,
            }
        }
        (None, Some(spec)) => {
            manifest.input(spec)?;
            let source = MarkovSource::from_text(&std::fs::read_to_string(spec)?)?;
            let mut cfg = match &a.config {
                Some(p) => {
                    manifest.input(p)?;
                    Config::load(p)?
                }
                None => Config::default(),
            };
            cfg.apply_overrides(&a.overrides)?;
            let mut setup = AuditSetup::memorization(source.states());
            setup.seed = seed;
            setup.model.apply_kv(cfg.section("model"))?;
            setup.model.validate()?;
            setup.train.apply_kv(cfg.section("train"))?;
            setup.train_tokens = parse_key(&cfg, "audit.train_tokens", setup.train_tokens)?;
            setup.test_tokens = parse_key(&cfg, "audit.test_tokens", setup.test_tokens)?;
            manifest.config = cfg.flatten();
            println!("entropy rate {:.5} nats/token", source.rate());
            println!("{:>7} {:>10} {:>9} {:>9} {:>9} {:>6}", "step", "tokens", "train", "test", "slack", "");
            run_markov_audit(&source, &setup, print_audit_row)?
        }
        _ => return Err(Error::Config("give exactly one of --markov or --ledger".into())),
    };
    if a.ledger.is_some() {
        println!("{:>7} {:>10} {:>9} {:>9} {:>9} {:>6}", "step", "tokens", "train", "test", "slack", "");
        report.rows.iter().for_each(print_audit_row);
    }
    let below = report.rows.iter().any(|r| r.train_ce < report.entropy_rate);
    println!("train below entropy: {below}; train below and test above in one evaluation: {}", report.memorized());
    println!("verdict: {}", if report.all_pass() { "pass" } else { "violation" });
    let csv_path = a.out.join("audit.csv");
    let json_path = a.out.join("audit.json");
    std::fs::write(&csv_path, report.to_csv())?;
    std::fs::write(&json_path, report.to_json())?;
    manifest.output(&csv_path)?;
    manifest.output(&json_path)?;
    manifest.wall_time_s = t0.elapsed().as_secs_f64();
    manifest.write(&a.out)?;
    std::io::stdout().flush()?;
    Ok(())
}

/// Flattened `section.key` view used by manifests.
pub fn snapshot(cfg: &Config) -> BTreeMap<String, String> {
    cfg.flatten()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_flags_become_overrides() {
        let a = expand_dotted_flags(["x", "train", "--model.d_model=64", "--train.max_lr", "0.001", "--out", "d"].map(String::from));
        assert_eq!(a, ["x", "train", "--set", "model.d_model=64", "--set", "train.max_lr=0.001", "--out", "d"]);
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 2);
        assert_eq!(exit_code(&Error::Checksum("x".into())), 3);
    }

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<usize> = (0..37).collect();
        let ys = par_map(&xs, 4, |x| Ok(x * 2)).unwrap();
        assert_eq!(ys, xs.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(par_map(&xs, 3, |&x| if x == 20 { Err(Error::Empty("x")) } else { Ok(x) }).is_err());
    }
}
