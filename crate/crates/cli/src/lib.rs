//! The `emd` command line: corpus generation, training, early detection and
//! the horizon sweep.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 incompatible artifacts.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use emd_core::artifact::REPORT_FORMAT;
use emd_core::checkpoint::write_file;
use emd_core::corpus::{
    generate_synthetic, ingest, prefix_ids, split, write_traces, ApiTrace, SynthConfig, TraceFormat, Vocabulary,
};
use emd_core::detector::{
    batch_detect, config_hash, examples, train_detector, DetectorModel, DetectorTrainConfig, EarlyDetectConfig,
};
use emd_core::encoder::{mlm_pretrain, ContextualEncoder, EncoderConfig, MlmConfig};
use emd_core::eval::{emit_report, evaluate_full, evaluate_prefix, run_sweep, ReportFormat};
use emd_core::genlm::{
    generate_suffix, lm_rows, lm_train, perplexity, GenRequest, GenerativeLm, LmConfig, LmTrainConfig, Strategy,
};
use emd_core::head::{HeadConfig, HeadVariant};
use emd_core::numerics::AdamConfig;

/// Seed used when neither `--seed` nor `EMD_SEED` is given.
pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "EMD_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] emd_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_compatibility() => 3,
            CliError::Core(emd_core::Error::InvalidArgument(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "emd", version, about = "Early malware detection from API-call prefixes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus as train and test files.
    GenCorpus(GenCorpusArgs),
    /// Build a vocabulary from a training corpus.
    BuildVocab(BuildVocabArgs),
    /// Train the generative next-call model.
    TrainLm(TrainLmArgs),
    /// Pretrain the contextual encoder with masked-call prediction.
    TrainEncoder(TrainEncoderArgs),
    /// Fine-tune the encoder with a classifier head.
    TrainDetector(TrainDetectorArgs),
    /// Print the calls the model expects after a prefix.
    PredictSuffix(PredictSuffixArgs),
    /// Early verdicts for every trace of a corpus, as JSON lines.
    Detect(DetectArgs),
    /// Early-detection metrics over a list of horizons.
    Sweep(SweepArgs),
    /// Classifier metrics on whole traces or bare prefixes.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    fn trace_format(self) -> TraceFormat {
        match self {
            CorpusFormat::Jsonl => TraceFormat::Jsonl,
            CorpusFormat::Csv => TraceFormat::Csv,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            CorpusFormat::Jsonl => "jsonl",
            CorpusFormat::Csv => "csv",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LmPreset {
    /// 128 positions.
    Desk,
    /// 500 positions.
    LongContext,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    Prefix,
}

#[derive(Debug, Args, Serialize)]
pub struct GenCorpusArgs {
    /// Directory receiving train.<ext>, test.<ext> and corpus.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 2000)]
    pub traces: usize,
    #[arg(long, default_value_t = 0.5)]
    pub malware_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, value_enum, default_value_t = CorpusFormat::Jsonl)]
    pub format: CorpusFormat,
    /// Defaults to $EMD_SEED, then 42.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Largest vocabulary, reserved ids included.
    #[arg(long, default_value_t = 30522)]
    pub max_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out traces for the dev loss and perplexity.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LmPreset::Desk)]
    pub preset: LmPreset,
    /// Overrides the preset's capacity.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f32,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON run report with the loss curve.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainEncoderArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.15)]
    pub mask_rate: f32,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainDetectorArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pretrained encoder; a fresh one is initialised when absent.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long, default_value_t = HeadVariant::BigruAttention)]
    pub variant: HeadVariant,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long)]
    pub freeze_encoder: bool,
    /// Capacity of a fresh encoder.
    #[arg(long, default_value_t = 128)]
    pub max_len: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerationArgs {
    #[arg(long, default_value_t = Strategy::Greedy)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f32,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictSuffixArgs {
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Observed calls, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub prefix: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    #[command(flatten)]
    pub generation: GenerationArgs,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub detector: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON-lines output; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub prefix_len: usize,
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    #[command(flatten)]
    pub generation: GenerationArgs,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub detector: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ReportFormat::Json, value_parser = parse_report_format)]
    pub format: ReportFormat,
    #[arg(long, default_value_t = 20)]
    pub prefix_len: usize,
    /// Comma-separated horizons.
    #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 30])]
    pub horizons: Vec<usize>,
    #[command(flatten)]
    pub generation: GenerationArgs,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub detector: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    pub mode: Mode,
    /// Calls kept in `prefix` mode.
    #[arg(long, default_value_t = 20)]
    pub prefix_len: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
}

fn parse_report_format(s: &str) -> Result<ReportFormat, String> {
    s.parse().map_err(|e: emd_core::Error| e.to_string())
}

/// `--seed`, else `EMD_SEED`, else [`DEFAULT_SEED`].
pub fn resolve_seed(flag: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// A training command's report: the resolved configuration and what it produced.
#[derive(Debug, Serialize)]
struct RunReport<'a, T: Serialize> {
    format: &'static str,
    command: &'a str,
    config: serde_json::Value,
    config_hash: String,
    result: T,
}

/// Resolved configuration and its hash.
fn resolved<T: Serialize>(args: &T) -> CliResult<(serde_json::Value, String)> {
    let value = serde_json::to_value(args).map_err(emd_core::Error::from)?;
    let hash = config_hash(&value)?;
    Ok((value, hash))
}

fn write_run_report<T: Serialize>(path: &Path, command: &str, args: &impl Serialize, result: T) -> CliResult<()> {
    let (config, hash) = resolved(args)?;
    let report = RunReport {
        format: REPORT_FORMAT,
        command,
        config,
        config_hash: hash,
        result,
    };
    let mut bytes = serde_json::to_vec(&report).map_err(emd_core::Error::from)?;
    bytes.push(b'\n');
    write_file(path, &bytes)?;
    Ok(())
}

fn load_traces(path: &Path) -> CliResult<Vec<ApiTrace>> {
    Ok(ingest(path, TraceFormat::from_path(path))?)
}

fn adam(lr: f32) -> AdamConfig {
    AdamConfig {
        lr,
        ..Default::default()
    }
}

fn gen_corpus(mut a: GenCorpusArgs, err: &mut dyn Write) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    a.seed = Some(seed);
    let mut cfg = SynthConfig::with_vocab(a.vocab_size, a.traces, seed);
    cfg.malware_fraction = a.malware_fraction;
    let traces = generate_synthetic(&cfg)?;
    let (train, test) = split(&traces, a.test_fraction, seed)?;
    std::fs::create_dir_all(&a.out_dir).map_err(emd_core::Error::from)?;
    let ext = a.format.extension();
    write_traces(&a.out_dir.join(format!("train.{ext}")), &train, a.format.trace_format())?;
    write_traces(&a.out_dir.join(format!("test.{ext}")), &test, a.format.trace_format())?;
    #[derive(Serialize)]
    struct Manifest<'a> {
        synth: &'a SynthConfig,
        train: usize,
        test: usize,
    }
    write_run_report(
        &a.out_dir.join("corpus.json"),
        "gen-corpus",
        &a,
        Manifest {
            synth: &cfg,
            train: train.len(),
            test: test.len(),
        },
    )?;
    writeln!(err, "wrote {} train and {} test traces to {}", train.len(), test.len(), a.out_dir.display()).ok();
    Ok(())
}

fn build_vocab(a: BuildVocabArgs, err: &mut dyn Write) -> CliResult<()> {
    let traces = load_traces(&a.corpus)?;
    let vocab = Vocabulary::build(&traces, a.max_size)?;
    vocab.save(&a.out)?;
    writeln!(err, "vocabulary of {} ids, hash {}", vocab.size(), vocab.hash()).ok();
    Ok(())
}

fn train_lm(mut a: TrainLmArgs, err: &mut dyn Write) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    a.seed = Some(seed);
    let vocab = Vocabulary::load(&a.vocab)?;
    let mut cfg = match a.preset {
        LmPreset::Desk => LmConfig::desk(vocab.size()),
        LmPreset::LongContext => LmConfig::long_context(vocab.size()),
    };
    if let Some(m) = a.max_len {
        cfg.max_len = m;
    }
    cfg.seed = seed;
    let mut lm = GenerativeLm::for_vocab(cfg, &vocab)?;
    let max_len = lm.config().max_len;
    let train = lm_rows(&load_traces(&a.corpus)?, &vocab, max_len);
    let dev = match &a.dev {
        Some(p) => lm_rows(&load_traces(p)?, &vocab, max_len),
        None => Vec::new(),
    };
    let before = if dev.is_empty() { None } else { Some(perplexity(&lm, &dev)?) };
    let opts = LmTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        adam: adam(a.lr),
    };
    let curve = lm_train(&mut lm, &train, &dev, &opts)?;
    let after = if dev.is_empty() { None } else { Some(perplexity(&lm, &dev)?) };
    lm.save(&a.out)?;
    writeln!(err, "train loss {:?}", curve.train).ok();
    if let (Some(b), Some(f)) = (before, after) {
        writeln!(err, "dev perplexity {b:.3} -> {f:.3}").ok();
    }
    if let Some(path) = &a.report {
        #[derive(Serialize)]
        struct LmResult {
            train_loss: Vec<f64>,
            dev_loss: Vec<f64>,
            dev_perplexity_untrained: Option<f64>,
            dev_perplexity: Option<f64>,
        }
        let result = LmResult {
            train_loss: curve.train,
            dev_loss: curve.dev,
            dev_perplexity_untrained: before,
            dev_perplexity: after,
        };
        write_run_report(path, "train-lm", &a, result)?;
    }
    Ok(())
}

fn train_encoder(mut a: TrainEncoderArgs, err: &mut dyn Write) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    a.seed = Some(seed);
    let vocab = Vocabulary::load(&a.vocab)?;
    let mut cfg = EncoderConfig::desk(vocab.size());
    cfg.max_len = a.max_len;
    cfg.seed = seed;
    let mut enc = ContextualEncoder::for_vocab(cfg, &vocab)?;
    let rows = lm_rows(&load_traces(&a.corpus)?, &vocab, a.max_len);
    let mlm = MlmConfig {
        mask_rate: a.mask_rate,
        epochs: a.epochs,
        batch_size: a.batch_size,
        adam: adam(a.lr),
    };
    let curve = mlm_pretrain(&mut enc, &rows, &mlm)?;
    enc.save(&a.out)?;
    writeln!(err, "masked-call loss {curve:?}").ok();
    if let Some(path) = &a.report {
        write_run_report(path, "train-encoder", &a, serde_json::json!({ "mlm_loss": curve }))?;
    }
    Ok(())
}

fn train_detector_cmd(mut a: TrainDetectorArgs, err: &mut dyn Write) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    a.seed = Some(seed);
    let vocab = Vocabulary::load(&a.vocab)?;
    let encoder = match &a.encoder {
        Some(p) => {
            let enc = ContextualEncoder::load(p)?;
            if enc.vocab_hash() != vocab.hash() {
                return Err(emd_core::Error::VocabMismatch {
                    expected: vocab.hash(),
                    found: enc.vocab_hash().to_string(),
                }
                .into());
            }
            enc
        }
        None => {
            let mut cfg = EncoderConfig::desk(vocab.size());
            cfg.max_len = a.max_len;
            cfg.seed = seed;
            ContextualEncoder::for_vocab(cfg, &vocab)?
        }
    };
    let max_len = encoder.config().max_len;
    let train = examples(&load_traces(&a.corpus)?, &vocab, max_len);
    let dev = match &a.dev {
        Some(p) => examples(&load_traces(p)?, &vocab, max_len),
        None => Vec::new(),
    };
    let head = HeadConfig {
        seed,
        ..HeadConfig::new(a.variant)
    };
    let cfg = DetectorTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        adam: adam(a.lr),
        freeze_encoder: a.freeze_encoder,
        seed,
    };
    let (model, curves) = train_detector(encoder, head, &train, &dev, &cfg)?;
    model.save(&a.out)?;
    writeln!(err, "train loss {:?}", curves.train_loss).ok();
    if !curves.dev_accuracy.is_empty() {
        writeln!(err, "dev accuracy {:?}", curves.dev_accuracy).ok();
    }
    if let Some(path) = &a.report {
        write_run_report(path, "train-detector", &a, &curves)?;
    }
    Ok(())
}

fn load_lm(path: &Path, vocab: &Vocabulary) -> CliResult<GenerativeLm> {
    let lm = GenerativeLm::load(path)?;
    if lm.vocab_hash() != vocab.hash() {
        return Err(emd_core::Error::VocabMismatch {
            expected: vocab.hash(),
            found: lm.vocab_hash().to_string(),
        }
        .into());
    }
    Ok(lm)
}

fn predict_suffix(mut a: PredictSuffixArgs, out: &mut dyn Write) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    a.seed = Some(seed);
    let vocab = Vocabulary::load(&a.vocab)?;
    let lm = load_lm(&a.lm, &vocab)?;
    let req = GenRequest {
        prefix: prefix_ids(&a.prefix, &vocab),
        horizon: a.horizon,
        strategy: a.generation.strategy,
        k: a.generation.k,
        temperature: a.generation.temperature,
        seed,
    };
    let ids = generate_suffix(&lm, &req)?;
    for &id in &ids {
        let name = vocab.name_of(id).unwrap_or("<unk>");
        writeln!(out, "{name}").map_err(emd_core::Error::from)?;
    }
    Ok(())
}

fn detect_config(prefix_len: usize, horizon: usize, g: &GenerationArgs, threshold: f32, seed: u64) -> EarlyDetectConfig {
    EarlyDetectConfig {
        prefix_len,
        horizon,
        strategy: g.strategy,
        k: g.k,
        temperature: g.temperature,
        seed,
        threshold,
    }
}

fn detect(mut a: DetectArgs, out: &mut dyn Write) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    a.seed = Some(seed);
    let vocab = Vocabulary::load(&a.vocab)?;
    let lm = GenerativeLm::load(&a.lm)?;
    let model = DetectorModel::load(&a.detector)?;
    let traces = load_traces(&a.corpus)?;
    let cfg = detect_config(a.prefix_len, a.horizon, &a.generation, a.threshold, seed);
    let result = batch_detect(&lm, &model, &vocab, &traces, &cfg)?;
    let mut lines = Vec::new();
    for (t, v) in traces.iter().zip(&result.verdicts) {
        let line = match v {
            Ok(v) => serde_json::json!({ "id": t.id, "verdict": v }),
            Err(f) => serde_json::json!({ "id": f.id, "error": f.error.to_string() }),
        };
        serde_json::to_writer(&mut lines, &line).map_err(emd_core::Error::from)?;
        lines.push(b'\n');
    }
    match &a.out {
        Some(p) => write_file(p, &lines)?,
        None => out.write_all(&lines).map_err(emd_core::Error::from)?,
    }
    Ok(())
}

fn sweep(mut a: SweepArgs, err: &mut dyn Write) -> CliResult<()> {
    let seed = resolve_seed(a.seed)?;
    a.seed = Some(seed);
    if a.horizons.is_empty() {
        return Err(CliError::Usage("--horizons needs at least one value".into()));
    }
    let vocab = Vocabulary::load(&a.vocab)?;
    let lm = GenerativeLm::load(&a.lm)?;
    let model = DetectorModel::load(&a.detector)?;
    let traces = load_traces(&a.corpus)?;
    let cfg = detect_config(a.prefix_len, a.horizons[0], &a.generation, a.threshold, seed);
    let mut result = run_sweep(&lm, &model, &vocab, &traces, a.prefix_len, &a.horizons, &cfg)?;
    let (config, hash) = resolved(&a)?;
    result.meta.config = config;
    result.meta.config_hashes.insert("run".into(), hash);
    emit_report(&result, &a.out, a.format)?;
    for r in &result.rows {
        writeln!(
            err,
            "prefix {} + horizon {} = {}: accuracy {:.4} auc {:.4}",
            r.prefix_len, r.horizon, r.total_len, r.metrics.accuracy, r.metrics.auc_roc
        )
        .ok();
    }
    writeln!(err, "average: accuracy {:.4} auc {:.4}", result.average.accuracy, result.average.auc).ok();
    Ok(())
}

fn evaluate(a: EvaluateArgs, err: &mut dyn Write) -> CliResult<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let model = DetectorModel::load(&a.detector)?;
    let traces = load_traces(&a.corpus)?;
    let mut report = match a.mode {
        Mode::Full => evaluate_full(&model, &vocab, &traces, a.threshold)?,
        Mode::Prefix => evaluate_prefix(&model, &vocab, &traces, a.prefix_len, a.threshold)?,
    };
    let (config, hash) = resolved(&a)?;
    report.meta.config = config;
    report.meta.config_hashes.insert("run".into(), hash);
    write_file(&a.out, &report.to_json()?)?;
    writeln!(err, "accuracy {:.4} auc {:.4}", report.metrics.accuracy, report.metrics.auc_roc).ok();
    Ok(())
}

/// Executes one parsed command. Primary output goes to `out`, progress to `err`.
pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a, err),
        Command::BuildVocab(a) => build_vocab(a, err),
        Command::TrainLm(a) => train_lm(a, err),
        Command::TrainEncoder(a) => train_encoder(a, err),
        Command::TrainDetector(a) => train_detector_cmd(a, err),
        Command::PredictSuffix(a) => predict_suffix(a, out),
        Command::Detect(a) => detect(a, out),
        Command::Sweep(a) => sweep(a, err),
        Command::Evaluate(a) => evaluate(a, err),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    write!(out, "{text}").ok();
                    0
                }
                _ => {
                    write!(err, "{text}").ok();
                    1
                }
            };
        }
    };
    match execute(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            writeln!(err, "error: {e}").ok();
            e.exit_code()
        }
    }
}
