//! Command-line entry point.
//!
//! Settings resolve as defaults < `--config` file (flat `key=value`) <
//! explicit flags. Config keys are the flag names with `-` replaced by `_`.
//! Every run writes a manifest holding the resolved settings, content hashes
//! of its inputs and its metrics.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{
    filter_unchanged, load_checkpoint, read_lines_aligned, read_parallel, read_sentences, save_checkpoint, write_parallel, write_sentences, Checkpoint, SentencePair, TokenPair, Vocabulary,
};
use crate::decode::{alignments, correct_corpus, measure_alpha, DecodeConfig};
use crate::error::{Error, Result};
use crate::evaluate::score_corpus;
use crate::model::{parse_key_values, BalanceWeighting, CopyGecModel, ModelConfig};
use crate::noising::{make_pretrain_corpus, NoiseConfig};
use crate::objectives::TaskWeights;
use crate::train::{fit, init_model, Init, LogRecord, Objective, OptimizerConfig, OptimizerState, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "copygec", version, about = "Copy-augmented Transformer for grammatical error correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corrupt clean sentences into (corrupted, clean) training pairs.
    Noise(NoiseArgs),
    /// Pretrain on a denoising corpus or as a decoder language model.
    Pretrain(PretrainArgs),
    /// Train on labeled correction pairs.
    Finetune(FinetuneArgs),
    /// Correct sentences with beam search.
    Correct(CorrectArgs),
    /// Score corrections with precision, recall and F0.5.
    Evaluate(EvaluateArgs),
    /// Model statistics and balance-factor measurements.
    Stats(StatsArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value file overriding defaults (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Worker threads for noising and decoding.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 512)]
    d_model: usize,
    #[arg(long, default_value_t = 6)]
    n_layers: usize,
    #[arg(long, default_value_t = 8)]
    n_heads: usize,
    #[arg(long, default_value_t = 4096)]
    d_ffn: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 1024)]
    max_positions: usize,
    /// Vocabulary cap (regular tokens) when building from the training data.
    #[arg(long, default_value_t = 50000)]
    vocab_size: usize,
    #[arg(long, default_value_t = true, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    tie_embeddings: bool,
    #[arg(long, default_value_t = true, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    copy_enabled: bool,
    /// normalized or raw
    #[arg(long, default_value = "normalized")]
    balance_weighting: String,
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 0.99)]
    momentum: f64,
    /// Learning-rate multiplier when the dev loss fails to improve.
    #[arg(long, default_value_t = 0.5)]
    lr_shrink: f64,
    #[arg(long, default_value_t = 1e-4)]
    min_lr: f64,
    #[arg(long, default_value_t = 0)]
    patience: usize,
    #[arg(long, default_value_t = 0.0)]
    l2_decay: f64,
    #[arg(long, default_value_t = 5.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Stop after this many updates (0 = no limit).
    #[arg(long, default_value_t = 0)]
    max_steps: u64,
    /// Evaluate every this many updates (0 = once per pass).
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
    /// Padded-token budget per batch.
    #[arg(long, default_value_t = 4096)]
    batch_tokens: usize,
    #[arg(long, default_value_t = 1.0)]
    task_weight_label: f64,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct NoiseArgs {
    #[command(flatten)]
    common: Common,
    /// Clean sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    /// Parallel corpus of corrupted<TAB>clean lines.
    #[arg(long)]
    output: PathBuf,
    /// Vocabulary file for inserted and replacing tokens (default: built from the input).
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 50000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    p_delete: f64,
    #[arg(long, default_value_t = 0.1)]
    p_insert: f64,
    #[arg(long, default_value_t = 0.1)]
    p_replace: f64,
    #[arg(long, default_value_t = 0.5)]
    shuffle_sigma: f64,
}

#[derive(Args, Debug, Clone)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Parallel corpus (corrupted<TAB>clean); the lm objective reads the clean side.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// dae or lm
    #[arg(long, default_value = "dae")]
    objective: String,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long = "lambda", default_value_t = 3.0)]
    lambda_pretrain: f64,
    #[arg(long)]
    save_dir: PathBuf,
    /// Continue from a checkpoint with its optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Parallel corpus of source<TAB>correction lines.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// random, decoder-only or full-dae
    #[arg(long, default_value = "random")]
    init: String,
    /// Checkpoint supplying pretrained parameters, configuration and vocabulary.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long = "lambda", default_value_t = 1.8)]
    lambda_finetune: f64,
    #[arg(long, default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    enable_copy_task: bool,
    /// Correct sentences for the copying task, one per line.
    #[arg(long)]
    copy_task_pool_path: Option<PathBuf>,
    /// Keep pairs whose target equals the source.
    #[arg(long, default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    keep_unchanged: bool,
    /// Decode the dev set at each evaluation and log F0.5.
    #[arg(long, default_value_t = true, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    eval_f05: bool,
    #[arg(long)]
    save_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct CorrectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 12)]
    beam: usize,
    #[arg(long, default_value_t = 1.5)]
    max_len_factor: f64,
    #[arg(long, default_value_t = 5)]
    max_len_offset: usize,
    /// Write per-step copy and attention alignments here.
    #[arg(long)]
    dump_alignments: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    src: PathBuf,
    /// Reference corrections, one file per annotator.
    #[arg(long = "ref", required = true)]
    refs: Vec<PathBuf>,
    /// Vocabulary file (or checkpoint) for --exclude-unk.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    exclude_unk: bool,
    /// Also write the report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct StatsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    /// Measure the mean balance factor on --correct-set and --error-set.
    #[arg(long, default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    alpha: bool,
    #[arg(long)]
    correct_set: Option<PathBuf>,
    #[arg(long)]
    error_set: Option<PathBuf>,
    /// Decode these sentences greedily and write per-step balance factors and alignments to --dump-alignments.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    dump_alignments: Option<PathBuf>,
    /// Sentences sampled from each set.
    #[arg(long, default_value_t = 500)]
    set_size: usize,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long, default_value_t = 1.5)]
    max_len_factor: f64,
    #[arg(long, default_value_t = 5)]
    max_len_offset: usize,
}

/// Everything a run records about itself.
#[derive(Debug, Default)]
struct Manifest {
    command: String,
    config: BTreeMap<String, String>,
    inputs: Vec<(String, String)>,
    metrics: Vec<(String, String)>,
}

impl Manifest {
    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push((path.display().to_string(), content_hash(&bytes)));
        Ok(())
    }

    fn metric(&mut self, key: &str, value: impl ToString) {
        self.metrics.push((key.to_string(), value.to_string()));
    }

    fn render(&self) -> String {
        let mut s = format!("command={}\nversion={}\n\n[config]\n", self.command, env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k}={v}");
        }
        s.push_str("\n[inputs]\n");
        for (p, h) in &self.inputs {
            let _ = writeln!(s, "{p}={h}");
        }
        s.push_str("\n[metrics]\n");
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Git-style blob hash (SHA-256 of `blob <len>\0<content>`), hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Subcommand name, resolved settings and an argument vector encoding them.
type Resolved = (String, BTreeMap<String, Vec<String>>, Vec<OsString>);

/// Merges defaults, the config file and explicit flags for one subcommand,
/// returning the resolved settings and an argument vector that encodes them.
fn resolve(argv: &[OsString]) -> Result<Resolved> {
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(argv).map_err(ClapExit)?;
    let (name, sub) = matches.subcommand().ok_or_else(|| Error::Config("missing subcommand".into()))?;
    let sub_cmd = cmd.find_subcommand(name).expect("matched subcommand exists");
    let file: BTreeMap<String, String> = match sub.get_one::<PathBuf>("config") {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_key_values(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => BTreeMap::new(),
    };
    let known: Vec<&str> = sub_cmd.get_arguments().map(|a| a.get_id().as_str()).collect();
    if let Some(bad) = file.keys().find(|k| !known.contains(&k.as_str()) || matches!(k.as_str(), "config" | "manifest")) {
        return Err(Error::Config(format!("unknown config key {bad:?} for {name}")));
    }
    let mut resolved = BTreeMap::new();
    let mut out: Vec<OsString> = vec![argv[0].clone(), name.into()];
    for arg in sub_cmd.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if matches!(arg.get_action(), ArgAction::Help | ArgAction::Version) {
            continue;
        }
        let values: Vec<String> = match (sub.value_source(id), file.get(id)) {
            (Some(ValueSource::CommandLine), _) | (_, None) => sub.get_raw(id).map(|v| v.map(|s| s.to_string_lossy().into_owned()).collect()).unwrap_or_default(),
            (_, Some(v)) => {
                if arg.get_action().takes_values() && matches!(arg.get_action(), ArgAction::Append) {
                    v.split(',').map(str::to_string).collect()
                } else {
                    vec![v.clone()]
                }
            }
        };
        for v in &values {
            out.push(format!("--{long}={v}").into());
        }
        if !values.is_empty() {
            resolved.insert(id.to_string(), values);
        }
    }
    Ok((name.to_string(), resolved, out))
}

struct ClapExit(clap::Error);

impl From<ClapExit> for Error {
    fn from(e: ClapExit) -> Self {
        Error::Usage(e.0.to_string())
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if let Err(e) = Cli::command().try_get_matches_from(&argv) {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
            let _ = e.print();
            return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
        }
        return report(&Error::Usage(e.to_string()));
    }
    match execute(&argv) {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> i32 {
    let msg = e.to_string();
    let line = msg.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information")).collect::<Vec<_>>().join(" ");
    eprintln!("error[{}]: {}", e.category(), line);
    if matches!(e, Error::Usage(_)) {
        2
    } else {
        1
    }
}

fn execute(argv: &[OsString]) -> Result<()> {
    let (name, resolved, argv2) = resolve(argv)?;
    let cli = Cli::from_arg_matches(&Cli::command().try_get_matches_from(&argv2).map_err(ClapExit)?).map_err(|e| Error::Usage(e.to_string()))?;
    let mut manifest = Manifest {
        command: name,
        config: resolved.into_iter().map(|(k, v)| (k, v.join(","))).collect(),
        ..Manifest::default()
    };
    let manifest_path = match &cli.command {
        Command::Noise(a) => run_noise(a, &mut manifest)?,
        Command::Pretrain(a) => run_pretrain(a, &mut manifest)?,
        Command::Finetune(a) => run_finetune(a, &mut manifest)?,
        Command::Correct(a) => run_correct(a, &mut manifest)?,
        Command::Evaluate(a) => run_evaluate(a, &mut manifest)?,
        Command::Stats(a) => run_stats(a, &mut manifest)?,
    };
    fs::write(&manifest_path, manifest.render()).map_err(|e| Error::io(&manifest_path, e))
}

fn manifest_path(common: &Common, fallback: PathBuf) -> PathBuf {
    common.manifest.clone().unwrap_or(fallback)
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_noise(a: &NoiseArgs, m: &mut Manifest) -> Result<PathBuf> {
    m.input(&a.input)?;
    let clean = read_sentences(&a.input)?;
    let vocab = match &a.vocab {
        Some(p) => {
            m.input(p)?;
            load_vocab(p)?
        }
        None => Vocabulary::build(&clean, a.vocab_size)?,
    };
    let cfg = NoiseConfig {
        p_delete: a.p_delete,
        p_insert: a.p_insert,
        p_replace: a.p_replace,
        shuffle_sigma: a.shuffle_sigma,
        seed: a.seed,
    };
    let (pairs, trace) = make_pretrain_corpus(&clean, &cfg, &vocab, a.common.threads)?;
    write_parallel(&a.output, &pairs)?;
    let (d, i, r) = trace.rates();
    m.metric("sentences", pairs.len());
    m.metric("delete_rate", format!("{d:.6}"));
    m.metric("insert_rate", format!("{i:.6}"));
    m.metric("replace_rate", format!("{r:.6}"));
    m.metric("output_hash", content_hash(&fs::read(&a.output).map_err(|e| Error::io(&a.output, e))?));
    Ok(manifest_path(&a.common, with_suffix(&a.output, ".manifest")))
}

/// Reads a vocabulary file, or the vocabulary embedded in a checkpoint.
fn load_vocab(p: &Path) -> Result<Vocabulary> {
    let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
    if bytes.starts_with(b"CPGECKPT") {
        return Ok(crate::corpus::decode_checkpoint(&bytes)?.vocab);
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Vocab(format!("{} is not UTF-8", p.display())))?;
    Vocabulary::from_text(&text)
}

fn model_config(a: &ModelArgs, vocab_len: usize) -> Result<ModelConfig> {
    let c = ModelConfig {
        d_model: a.d_model,
        n_layers: a.n_layers,
        n_heads: a.n_heads,
        d_ffn: a.d_ffn,
        dropout: a.dropout,
        vocab_size: vocab_len,
        max_positions: a.max_positions,
        tie_embeddings: a.tie_embeddings,
        copy_enabled: a.copy_enabled,
        balance_weighting: a.balance_weighting.parse::<BalanceWeighting>()?,
    };
    c.validate()?;
    Ok(c)
}

fn train_config(o: &OptimArgs, lambda: f64, save_dir: &Path, threads: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig {
            lr: o.lr,
            momentum: o.momentum,
            shrink: o.lr_shrink,
            min_lr: o.min_lr,
            patience: o.patience,
            l2_decay: o.l2_decay,
            clip_norm: o.clip_norm,
        },
        lambda,
        task_weights: TaskWeights { seq: 1.0, label: o.task_weight_label },
        max_tokens: o.batch_tokens,
        epochs: o.epochs,
        max_steps: (o.max_steps > 0).then_some(o.max_steps),
        eval_every: o.eval_every,
        seed: o.seed,
        save_dir: Some(save_dir.to_path_buf()),
        threads,
        ..TrainConfig::default()
    }
}

fn to_pairs(raw: &[TokenPair], vocab: &Vocabulary) -> Vec<SentencePair> {
    raw.iter().map(|(s, t)| SentencePair::new(s.clone(), t.clone(), vocab)).collect()
}

fn log_sink(save_dir: &Path) -> Result<impl FnMut(&LogRecord)> {
    let path = save_dir.join("train.log");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok(move |r: &LogRecord| {
        let _ = writeln!(f, "{r}");
        eprintln!("{r}");
    })
}

fn record_training(m: &mut Manifest, log: &crate::train::TrainLog, state: &OptimizerState) {
    m.metric("steps", state.step);
    m.metric("final_lr", format!("{:e}", state.lr));
    if let Some(r) = log.records.last() {
        m.metric("train_loss", format!("{:.6}", r.train_loss));
        if let Some(d) = r.dev_loss {
            m.metric("dev_loss", format!("{d:.6}"));
        }
        if let Some(f) = r.dev_f05 {
            m.metric("dev_f05", format!("{f:.4}"));
        }
    }
    m.metric("clamped_targets", log.clamped);
    m.metric("skipped_pairs", log.skipped);
}

fn run_pretrain(a: &PretrainArgs, m: &mut Manifest) -> Result<PathBuf> {
    let objective = match a.objective.as_str() {
        "dae" => Objective::Seq2Seq,
        "lm" => Objective::DecoderLm,
        o => return Err(Error::Config(format!("unknown objective {o:?} (expected dae or lm)"))),
    };
    fs::create_dir_all(&a.save_dir).map_err(|e| Error::io(&a.save_dir, e))?;
    m.input(&a.train)?;
    let raw = read_parallel(&a.train)?;
    let dev_raw = match &a.dev {
        Some(p) => {
            m.input(p)?;
            read_parallel(p)?
        }
        None => Vec::new(),
    };
    let (mut model, vocab, state) = match &a.resume {
        Some(p) => {
            m.input(p)?;
            let (model, vocab, state) = load_checkpoint(p)?.into_model()?;
            adopt_model_config(m, &model.config)?;
            let state = state.unwrap_or_else(|| OptimizerState::new(&model.params, a.optim.lr));
            (model, vocab, state)
        }
        None => {
            let vocab = match &a.vocab {
                Some(p) => {
                    m.input(p)?;
                    load_vocab(p)?
                }
                None => Vocabulary::build(raw.iter().flat_map(|(s, t)| [s, t]), a.model.vocab_size)?,
            };
            let model = CopyGecModel::new(model_config(&a.model, vocab.len())?, a.optim.seed)?;
            let state = OptimizerState::new(&model.params, a.optim.lr);
            (model, vocab, state)
        }
    };
    let mut state = state;
    vocab.save(&a.save_dir.join("vocab.txt"))?;
    let (train, dev) = match objective {
        Objective::Seq2Seq => (to_pairs(&raw, &vocab), to_pairs(&dev_raw, &vocab)),
        Objective::DecoderLm => (
            raw.iter().map(|(_, t)| SentencePair::identity(t.clone(), &vocab)).collect(),
            dev_raw.iter().map(|(_, t)| SentencePair::identity(t.clone(), &vocab)).collect(),
        ),
    };
    let cfg = train_config(&a.optim, a.lambda_pretrain, &a.save_dir, a.common.threads);
    let log = fit(&mut model, &vocab, &mut state, &train, &dev, &[], &cfg, objective, log_sink(&a.save_dir)?)?;
    let out = a.save_dir.join("model.ckpt");
    save_checkpoint(&out, &model, &vocab, Some(&state))?;
    record_training(m, &log, &state);
    Ok(manifest_path(&a.common, a.save_dir.join("manifest.txt")))
}

fn run_finetune(a: &FinetuneArgs, m: &mut Manifest) -> Result<PathBuf> {
    let init: Init = a.init.parse()?;
    match (init, &a.pretrained) {
        (Init::Random, Some(_)) => return Err(Error::Config("--pretrained conflicts with --init random".into())),
        (Init::DecoderOnly | Init::FullDae, None) => return Err(Error::Config(format!("--init {init} requires --pretrained"))),
        _ => {}
    }
    if a.enable_copy_task != a.copy_task_pool_path.is_some() {
        return Err(Error::Config("--enable-copy-task and --copy-task-pool-path must be given together".into()));
    }
    fs::create_dir_all(&a.save_dir).map_err(|e| Error::io(&a.save_dir, e))?;
    m.input(&a.train)?;
    let raw = read_parallel(&a.train)?;
    let (raw, dropped) = if a.keep_unchanged { (raw, 0) } else { filter_unchanged(raw) };
    let dev_raw = match &a.dev {
        Some(p) => {
            m.input(p)?;
            read_parallel(p)?
        }
        None => Vec::new(),
    };
    let pretrained: Option<Checkpoint> = match &a.pretrained {
        Some(p) => {
            m.input(p)?;
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let (config, vocab) = match &pretrained {
        Some(ck) => {
            let explicit = model_flags_set(&m.config);
            if !explicit.is_empty() {
                let from_flags = model_config(&a.model, ck.vocab.len())?;
                if from_flags.to_text() != ck.config.to_text() {
                    return Err(Error::Config(format!("model settings {explicit:?} conflict with the pretrained checkpoint's configuration")));
                }
            }
            if a.vocab.is_some() {
                return Err(Error::Config("--vocab conflicts with --pretrained (the checkpoint carries its vocabulary)".into()));
            }
            (ck.config.clone(), ck.vocab.clone())
        }
        None => {
            let vocab = match &a.vocab {
                Some(p) => {
                    m.input(p)?;
                    load_vocab(p)?
                }
                None => Vocabulary::build(raw.iter().flat_map(|(s, t)| [s, t]), a.model.vocab_size)?,
            };
            (model_config(&a.model, vocab.len())?, vocab)
        }
    };
    adopt_model_config(m, &config)?;
    let mut model = init_model(config, init, pretrained.as_ref().map(|c| &c.params), a.optim.seed)?;
    vocab.save(&a.save_dir.join("vocab.txt"))?;
    let pool = match &a.copy_task_pool_path {
        Some(p) => {
            m.input(p)?;
            read_sentences(p)?
        }
        None => Vec::new(),
    };
    let train = to_pairs(&raw, &vocab);
    let dev = to_pairs(&dev_raw, &vocab);
    let mut cfg = train_config(&a.optim, a.lambda_finetune, &a.save_dir, a.common.threads);
    cfg.copy_task = a.enable_copy_task;
    cfg.eval_f05 = a.eval_f05;
    let mut state = OptimizerState::new(&model.params, a.optim.lr);
    let log = fit(&mut model, &vocab, &mut state, &train, &dev, &pool, &cfg, Objective::Seq2Seq, log_sink(&a.save_dir)?)?;
    save_checkpoint(&a.save_dir.join("model.ckpt"), &model, &vocab, Some(&state))?;
    m.metric("dropped_unchanged", dropped);
    record_training(m, &log, &state);
    Ok(manifest_path(&a.common, a.save_dir.join("manifest.txt")))
}

const MODEL_KEYS: [&str; 9] = ["d_model", "n_layers", "n_heads", "d_ffn", "dropout", "max_positions", "tie_embeddings", "copy_enabled", "balance_weighting"];

/// Records the model configuration actually in use (which may come from a
/// checkpoint) in place of the flag values.
fn adopt_model_config(m: &mut Manifest, config: &ModelConfig) -> Result<()> {
    for (k, v) in parse_key_values(&config.to_text())? {
        if MODEL_KEYS.contains(&k.as_str()) {
            m.config.insert(k, v);
        }
    }
    Ok(())
}

/// Model settings that came from flags or the config file rather than
/// defaults.
fn model_flags_set(config: &BTreeMap<String, String>) -> Vec<String> {
    let defaults = Cli::command();
    let sub = defaults.find_subcommand("finetune").expect("finetune exists");
    MODEL_KEYS
        .iter()
        .filter(|k| {
            let def = sub.get_arguments().find(|a| a.get_id().as_str() == **k).and_then(|a| a.get_default_values().first().map(|d| d.to_string_lossy().into_owned()));
            config.get(**k).map(String::as_str) != def.as_deref()
        })
        .map(|k| k.to_string())
        .collect()
}

fn run_correct(a: &CorrectArgs, m: &mut Manifest) -> Result<PathBuf> {
    m.input(&a.model)?;
    let (model, vocab, _) = load_checkpoint(&a.model)?.into_model()?;
    m.input(&a.input)?;
    let sources = read_lines_aligned(&a.input)?;
    let cfg = DecodeConfig {
        beam: a.beam,
        max_len_factor: a.max_len_factor,
        max_len_offset: a.max_len_offset,
    };
    let nonempty: Vec<usize> = (0..sources.len()).filter(|&i| !sources[i].is_empty()).collect();
    let batch: Vec<Vec<String>> = nonempty.iter().map(|&i| sources[i].clone()).collect();
    let results = correct_corpus(&model, &vocab, &batch, &cfg, a.common.threads)?;
    let mut out = vec![Vec::new(); sources.len()];
    let mut dump = String::new();
    let mut truncated = 0;
    for (&i, (surface, hyp)) in nonempty.iter().zip(&results) {
        out[i] = surface.clone();
        truncated += usize::from(hyp.truncated);
        for r in alignments(i, hyp) {
            let _ = writeln!(dump, "{r}");
        }
    }
    write_sentences(&a.output, &out)?;
    if let Some(p) = &a.dump_alignments {
        fs::write(p, dump).map_err(|e| Error::io(p, e))?;
    }
    m.metric("sentences", sources.len());
    m.metric("truncated", truncated);
    m.metric("output_hash", content_hash(&fs::read(&a.output).map_err(|e| Error::io(&a.output, e))?));
    Ok(manifest_path(&a.common, with_suffix(&a.output, ".manifest")))
}

fn run_evaluate(a: &EvaluateArgs, m: &mut Manifest) -> Result<PathBuf> {
    for p in [&a.hyp, &a.src].into_iter().chain(&a.refs) {
        m.input(p)?;
    }
    let src = read_lines_aligned(&a.src)?;
    let hyp = read_lines_aligned(&a.hyp)?;
    let refs = a.refs.iter().map(|p| read_lines_aligned(p)).collect::<Result<Vec<_>>>()?;
    let vocab = match (&a.vocab, a.exclude_unk) {
        (Some(p), true) => {
            m.input(p)?;
            Some(load_vocab(p)?)
        }
        (None, true) => return Err(Error::Config("--exclude-unk requires --vocab".into())),
        (_, false) => None,
    };
    let report = score_corpus(&src, &hyp, &refs, vocab.as_ref())?;
    let text = report.to_string();
    println!("{text}");
    if let Some(p) = &a.output {
        fs::write(p, format!("{text}\n")).map_err(|e| Error::io(p, e))?;
    }
    m.metric("precision", format!("{:.4}", report.scores.precision));
    m.metric("recall", format!("{:.4}", report.scores.recall));
    m.metric("f0.5", format!("{:.4}", report.scores.f05));
    m.metric("tp", report.counts.tp);
    m.metric("fp", report.counts.fp);
    m.metric("fn", report.counts.fn_);
    if report.no_edits {
        m.metric("status", "no edits");
    }
    Ok(manifest_path(&a.common, with_suffix(a.output.as_ref().unwrap_or(&a.hyp), ".eval.manifest")))
}

fn sample_set(path: &Path, n: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let all = read_sentences(path)?;
    if all.len() <= n {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, all.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| all[i].clone()).collect())
}

fn run_stats(a: &StatsArgs, m: &mut Manifest) -> Result<PathBuf> {
    m.input(&a.model)?;
    let (model, vocab, state) = load_checkpoint(&a.model)?.into_model()?;
    let mut lines = vec![
        format!("parameters={}", model.params.num_scalars()),
        format!("vocab_size={}", vocab.len()),
        format!("copy_enabled={}", model.config.copy_enabled),
    ];
    if let Some(s) = &state {
        lines.push(format!("step={}", s.step));
    }
    if a.alpha {
        let (Some(cp), Some(ep)) = (&a.correct_set, &a.error_set) else {
            return Err(Error::Config("--alpha requires --correct-set and --error-set".into()));
        };
        m.input(cp)?;
        m.input(ep)?;
        let cfg = DecodeConfig {
            beam: 1,
            max_len_factor: a.max_len_factor,
            max_len_offset: a.max_len_offset,
        };
        let correct = sample_set(cp, a.set_size, a.seed)?;
        let error = sample_set(ep, a.set_size, a.seed.wrapping_add(1))?;
        let ac = measure_alpha(&model, &vocab, &correct, &cfg)?;
        let ae = measure_alpha(&model, &vocab, &error, &cfg)?;
        lines.push(format!("alpha_correct={ac:.4}"));
        lines.push(format!("alpha_error={ae:.4}"));
        lines.push(format!("correct_sentences={}", correct.len()));
        lines.push(format!("error_sentences={}", error.len()));
    }
    match (&a.input, &a.dump_alignments) {
        (Some(inp), Some(out)) => {
            m.input(inp)?;
            let cfg = DecodeConfig {
                beam: 1,
                max_len_factor: a.max_len_factor,
                max_len_offset: a.max_len_offset,
            };
            let sentences = read_sentences(inp)?;
            let mut dump = String::new();
            for (i, s) in sentences.iter().enumerate() {
                let (_, hyp) = crate::decode::correct_sentence(&model, &vocab, s, &cfg)?;
                for r in alignments(i, &hyp) {
                    let _ = writeln!(dump, "{r}");
                }
            }
            fs::write(out, dump).map_err(|e| Error::io(out, e))?;
            lines.push(format!("dumped_sentences={}", sentences.len()));
        }
        (None, None) => {}
        _ => return Err(Error::Config("--input and --dump-alignments must be given together".into())),
    }
    for l in &lines {
        println!("{l}");
        let (k, v) = l.split_once('=').expect("key=value line");
        m.metric(k, v);
    }
    Ok(manifest_path(&a.common, with_suffix(&a.model, ".stats.manifest")))
}
