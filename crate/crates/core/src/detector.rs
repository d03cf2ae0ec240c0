//! End-to-end classifier training and the early-detection path:
//! observed prefix, generated suffix, verdict on the extended trace.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{sha256_hex, DETECTOR_FORMAT};
use crate::checkpoint::{decode_checkpoint, encode_checkpoint, write_file};
use crate::corpus::{decode, token_ids, ApiTrace, EncodedBatch, Label, Vocabulary, BOS, EOS};
use crate::encoder::ContextualEncoder;
use crate::error::{Error, Result};
use crate::genlm::{generate_batch, GenRequest, GenerativeLm, Strategy};
use crate::head::{ClassifierHead, HeadConfig};
use crate::layers::Mode;
use crate::numerics::{adam_step, AdamConfig, AdamState, Tape};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Malware iff `probability >= threshold`.
pub fn label_for(probability: f32, threshold: f32) -> Label {
    if probability >= threshold {
        Label::Malware
    } else {
        Label::Benign
    }
}

/// Encoded classifier input and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub label: Label,
}

/// `BOS + calls + EOS` rows for every trace, capped at `max_len`.
pub fn examples(traces: &[ApiTrace], vocab: &Vocabulary, max_len: usize) -> Vec<Example> {
    traces
        .iter()
        .map(|t| Example {
            ids: token_ids(&t.calls, vocab, max_len),
            label: t.label,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            epochs: 5,
            batch_size: 32,
            adam: AdamConfig::default(),
            freeze_encoder: false,
            seed: 42,
        }
    }
}

/// Provenance stored with a trained detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze_encoder: bool,
    pub train_benign: usize,
    pub train_malware: usize,
    pub encoder_config_hash: String,
    pub head_config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorCurves {
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    pub dev_accuracy: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub encoder: ContextualEncoder,
    pub head: ClassifierHead,
    pub meta: TrainMeta,
}

#[derive(Serialize, Deserialize)]
struct DetectorMeta {
    encoder: serde_json::Value,
    head: HeadConfig,
    input_dim: usize,
    train: TrainMeta,
}

pub fn config_hash(value: &impl Serialize) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?)[..16].to_string())
}

impl DetectorModel {
    pub fn vocab_hash(&self) -> &str {
        self.encoder.vocab_hash()
    }

    pub fn max_len(&self) -> usize {
        self.encoder.config().max_len
    }

    fn batch_probs(&self, tape: &mut Tape, batch: &EncodedBatch, enc_mode: &mut Mode, head_mode: &mut Mode) -> Result<crate::numerics::Var> {
        let states = self
            .encoder
            .forward(tape, &batch.ids, &batch.mask, batch.batch, batch.len, enc_mode)?;
        self.head.forward(tape, states, &batch.mask, head_mode)
    }

    /// Inference-mode probabilities for unpadded id rows, in input order.
    pub fn score_rows(&self, rows: &[Vec<u32>]) -> Result<Vec<f32>> {
        if let Some(r) = rows.iter().find(|r| r.len() > self.max_len()) {
            return Err(Error::CapacityExceeded {
                len: r.len(),
                max: self.max_len(),
            });
        }
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(SCORE_CHUNK) {
            let batch = EncodedBatch::from_rows(chunk, vec![0.0; chunk.len()], None)?;
            let mut tape = Tape::no_grad();
            let p = self.batch_probs(&mut tape, &batch, &mut Mode::Eval, &mut Mode::Eval)?;
            out.extend_from_slice(tape.value(p).data());
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = DetectorMeta {
            encoder: self.encoder.meta_json()?,
            head: self.head.config().clone(),
            input_dim: self.head.input_dim(),
            train: self.meta.clone(),
        };
        encode_checkpoint(
            DETECTOR_FORMAT,
            &meta,
            &[("encoder", self.encoder.store()), ("head", self.head.store())],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt = decode_checkpoint(bytes, DETECTOR_FORMAT)?;
        let meta: DetectorMeta = ckpt.meta_as()?;
        let mut encoder = ContextualEncoder::from_parts(meta.encoder, &ckpt, "encoder")?;
        encoder.store_mut().set_trainable(!meta.train.freeze_encoder);
        let mut head = ClassifierHead::new(meta.head, meta.input_dim)?;
        head.store_mut().load_named(ckpt.group("head")?)?;
        Ok(DetectorModel {
            encoder,
            head,
            meta: meta.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const SCORE_CHUNK: usize = 64;

fn labels_of(rows: &[&Example]) -> Vec<f32> {
    rows.iter().map(|e| e.label.as_f32()).collect()
}

fn evaluate(model: &DetectorModel, dev: &[Example]) -> Result<(f64, f64)> {
    let rows: Vec<Vec<u32>> = dev.iter().map(|e| e.ids.clone()).collect();
    let probs = model.score_rows(&rows)?;
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for (p, e) in probs.iter().zip(dev) {
        let y = e.label.as_f32() as f64;
        let pc = p.clamp(crate::numerics::BCE_CLAMP, 1.0 - crate::numerics::BCE_CLAMP) as f64;
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        correct += usize::from(label_for(*p, DEFAULT_THRESHOLD) == e.label);
    }
    let n = dev.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Fine-tunes `encoder` with a fresh head on binary cross-entropy. With
/// `freeze_encoder` the encoder runs in inference mode and its weights stay
/// bit-identical.
pub fn train_detector(
    mut encoder: ContextualEncoder,
    head_config: HeadConfig,
    train: &[Example],
    dev: &[Example],
    cfg: &DetectorTrainConfig,
) -> Result<(DetectorModel, DetectorCurves)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let malware = train.iter().filter(|e| e.label == Label::Malware).count();
    if malware == 0 || malware == train.len() {
        return Err(Error::SingleClass);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    encoder.store_mut().set_trainable(!cfg.freeze_encoder);
    let head = ClassifierHead::new(head_config, encoder.config().embed_dim)?;
    let meta = TrainMeta {
        seed: cfg.seed,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        freeze_encoder: cfg.freeze_encoder,
        train_benign: train.len() - malware,
        train_malware: malware,
        encoder_config_hash: config_hash(encoder.config())?,
        head_config_hash: config_hash(head.config())?,
    };
    let mut model = DetectorModel { encoder, head, meta };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut curves = DetectorCurves::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let ids: Vec<Vec<u32>> = rows.iter().map(|e| e.ids.clone()).collect();
            let labels = labels_of(&rows);
            let batch = EncodedBatch::from_rows(&ids, labels.clone(), None)?;
            let mut tape = Tape::new();
            let p = if cfg.freeze_encoder {
                model.batch_probs(&mut tape, &batch, &mut Mode::Eval, &mut Mode::Train(&mut rng))?
            } else {
                let mut enc_rng = ChaCha8Rng::seed_from_u64(rand::Rng::gen(&mut rng));
                model.batch_probs(&mut tape, &batch, &mut Mode::Train(&mut enc_rng), &mut Mode::Train(&mut rng))?
            };
            let loss = tape.bce(p, &labels)?;
            let grads = tape.backward(loss)?;
            if cfg.freeze_encoder {
                adam_step(&mut [model.head.store_mut()], &grads, &mut adam)?;
            } else {
                let DetectorModel { encoder, head, .. } = &mut model;
                adam_step(&mut [encoder.store_mut(), head.store_mut()], &grads, &mut adam)?;
            }
            total += tape.value(loss).item() as f64 * rows.len() as f64;
        }
        curves.train_loss.push(total / train.len() as f64);
        if !dev.is_empty() {
            let (loss, acc) = evaluate(&model, dev)?;
            curves.dev_loss.push(loss);
            curves.dev_accuracy.push(acc);
        }
    }
    Ok((model, curves))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub probability: f32,
    pub label: Label,
    pub prefix_used: usize,
    pub suffix: Vec<String>,
    pub extended_len: usize,
}

/// Full-input verdict for `BOS + calls + EOS` ids.
pub fn classify_trace(model: &DetectorModel, ids: &[u32], threshold: f32) -> Result<Verdict> {
    let calls = ids.iter().filter(|&&i| !Vocabulary::is_reserved(i) || i == crate::corpus::UNK).count();
    if calls == 0 {
        return Err(Error::EmptyInput("trace"));
    }
    let probability = model.score_rows(&[ids.to_vec()])?[0];
    Ok(Verdict {
        probability,
        label: label_for(probability, threshold),
        prefix_used: calls,
        suffix: Vec::new(),
        extended_len: calls,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyDetectConfig {
    pub prefix_len: usize,
    pub horizon: usize,
    pub strategy: Strategy,
    pub k: usize,
    pub temperature: f32,
    pub seed: u64,
    pub threshold: f32,
}

impl Default for EarlyDetectConfig {
    fn default() -> Self {
        EarlyDetectConfig {
            prefix_len: 20,
            horizon: 10,
            strategy: Strategy::Greedy,
            k: 5,
            temperature: 1.0,
            seed: 42,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl EarlyDetectConfig {
    fn validate(&self) -> Result<()> {
        if self.prefix_len == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument("prefix_len and horizon must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    fn request(&self, prefix: Vec<u32>, horizon: usize) -> GenRequest {
        GenRequest {
            prefix,
            horizon,
            strategy: self.strategy,
            k: self.k,
            temperature: self.temperature,
            seed: self.seed,
        }
    }
}

/// Rejects model pairs built over different vocabularies.
pub fn check_compatible(lm: &GenerativeLm, model: &DetectorModel, vocab: &Vocabulary) -> Result<()> {
    let expected = vocab.hash();
    for found in [lm.vocab_hash(), model.vocab_hash()] {
        if found != expected {
            return Err(Error::VocabMismatch {
                expected: expected.clone(),
                found: found.to_string(),
            });
        }
    }
    Ok(())
}

/// A per-trace failure inside a batch.
#[derive(Debug)]
pub struct TraceFailure {
    pub id: String,
    pub error: Error,
}

#[derive(Debug)]
pub struct BatchDetection {
    pub verdicts: Vec<std::result::Result<Verdict, TraceFailure>>,
}

impl BatchDetection {
    /// Probabilities in input order; `None` where the trace failed.
    pub fn scores(&self) -> Vec<Option<f32>> {
        self.verdicts
            .iter()
            .map(|v| v.as_ref().ok().map(|v| v.probability))
            .collect()
    }
}

/// Why a single trace in a batch could not be scored.
#[derive(Clone, Copy, Debug)]
enum Skip {
    Empty,
    Capacity { len: usize, max: usize },
}

impl Skip {
    fn failure(self, trace: &ApiTrace) -> TraceFailure {
        let error = match self {
            Skip::Empty => Error::EmptyTrace(trace.id.clone()),
            Skip::Capacity { len, max } => Error::CapacityExceeded { len, max },
        };
        TraceFailure {
            id: trace.id.clone(),
            error,
        }
    }
}

/// Observed prefix ids `BOS + calls[..min(prefix_len, |calls|)]`.
fn observed(trace: &ApiTrace, vocab: &Vocabulary, prefix_len: usize) -> std::result::Result<Vec<u32>, Skip> {
    if trace.calls.is_empty() {
        return Err(Skip::Empty);
    }
    let n = prefix_len.min(trace.calls.len());
    Ok(std::iter::once(BOS)
        .chain(trace.calls[..n].iter().map(|c| vocab.id_of(c)))
        .collect())
}

/// Scores `BOS + prefix + suffix + EOS` for every trace that has an input.
fn score_outcomes(
    model: &DetectorModel,
    vocab: &Vocabulary,
    traces: &[ApiTrace],
    inputs: &[std::result::Result<(&[u32], &[u32]), Skip>],
    threshold: f32,
) -> Result<BatchDetection> {
    let mut rows = Vec::new();
    let mut status = Vec::with_capacity(inputs.len());
    for input in inputs {
        let st = input.and_then(|(prefix, suffix)| {
            let len = prefix.len() + suffix.len() + 1;
            if len > model.max_len() {
                return Err(Skip::Capacity {
                    len,
                    max: model.max_len(),
                });
            }
            let mut row = Vec::with_capacity(len);
            row.extend_from_slice(prefix);
            row.extend_from_slice(suffix);
            row.push(EOS);
            rows.push(row);
            Ok(())
        });
        status.push(st);
    }
    let mut probs = model.score_rows(&rows)?.into_iter();
    let mut verdicts = Vec::with_capacity(inputs.len());
    for ((input, st), trace) in inputs.iter().zip(status).zip(traces) {
        match (input, st) {
            (Ok((prefix, suffix)), Ok(())) => {
                let p = probs.next().expect("one score per scored row");
                let used = prefix.len() - 1;
                verdicts.push(Ok(Verdict {
                    probability: p,
                    label: label_for(p, threshold),
                    prefix_used: used,
                    suffix: decode(suffix, vocab)?,
                    extended_len: used + suffix.len(),
                }));
            }
            (_, Err(skip)) => verdicts.push(Err(skip.failure(trace))),
            (Err(skip), _) => verdicts.push(Err(skip.failure(trace))),
        }
    }
    Ok(BatchDetection { verdicts })
}

/// Early detection for several horizons at once. Suffixes are generated once
/// to the longest horizon; shorter horizons use their leading ids, which is
/// what a separate run would generate.
pub fn batch_detect_horizons(
    lm: &GenerativeLm,
    model: &DetectorModel,
    vocab: &Vocabulary,
    traces: &[ApiTrace],
    cfg: &EarlyDetectConfig,
    horizons: &[usize],
) -> Result<Vec<BatchDetection>> {
    cfg.validate()?;
    check_compatible(lm, model, vocab)?;
    let longest = *horizons.iter().max().ok_or(Error::EmptyInput("horizons"))?;
    if horizons.contains(&0) {
        return Err(Error::InvalidArgument("horizons must be at least 1".into()));
    }
    let cap = lm.config().max_len;
    let prefixes: Vec<std::result::Result<Vec<u32>, Skip>> = traces
        .iter()
        .map(|t| {
            let p = observed(t, vocab, cfg.prefix_len)?;
            if p.len() + longest > cap {
                return Err(Skip::Capacity {
                    len: p.len() + longest,
                    max: cap,
                });
            }
            Ok(p)
        })
        .collect();
    let reqs: Vec<GenRequest> = prefixes
        .iter()
        .flatten()
        .map(|p| cfg.request(p.clone(), longest))
        .collect();
    let mut generated = generate_batch(lm, &reqs)?.into_iter();
    let suffixes: Vec<Vec<u32>> = prefixes
        .iter()
        .map(|p| if p.is_ok() { generated.next().unwrap() } else { Vec::new() })
        .collect();
    let mut out = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let inputs: Vec<_> = prefixes
            .iter()
            .zip(&suffixes)
            .map(|(p, s)| p.as_ref().map(|p| (p.as_slice(), &s[..h])).map_err(|e| *e))
            .collect();
        out.push(score_outcomes(model, vocab, traces, &inputs, cfg.threshold)?);
    }
    Ok(out)
}

/// Order-preserving early detection; per-trace failures carry the trace id.
pub fn batch_detect(
    lm: &GenerativeLm,
    model: &DetectorModel,
    vocab: &Vocabulary,
    traces: &[ApiTrace],
    cfg: &EarlyDetectConfig,
) -> Result<BatchDetection> {
    Ok(batch_detect_horizons(lm, model, vocab, traces, cfg, &[cfg.horizon])?.remove(0))
}

/// Prefix, generated suffix, verdict on the extended trace. Reads at most
/// `cfg.prefix_len` calls of `trace`.
pub fn early_detect(
    lm: &GenerativeLm,
    model: &DetectorModel,
    vocab: &Vocabulary,
    trace: &ApiTrace,
    cfg: &EarlyDetectConfig,
) -> Result<Verdict> {
    let mut out = batch_detect(lm, model, vocab, std::slice::from_ref(trace), cfg)?;
    out.verdicts.remove(0).map_err(|f| f.error)
}

/// Verdicts on the observed prefix alone, without generated calls.
pub fn batch_classify_prefix(
    model: &DetectorModel,
    vocab: &Vocabulary,
    traces: &[ApiTrace],
    prefix_len: usize,
    threshold: f32,
) -> Result<BatchDetection> {
    if model.vocab_hash() != vocab.hash() {
        return Err(Error::VocabMismatch {
            expected: vocab.hash(),
            found: model.vocab_hash().to_string(),
        });
    }
    if prefix_len == 0 {
        return Err(Error::InvalidArgument("prefix_len must be at least 1".into()));
    }
    let prefixes: Vec<_> = traces.iter().map(|t| observed(t, vocab, prefix_len)).collect();
    let inputs: Vec<_> = prefixes
        .iter()
        .map(|p| p.as_ref().map(|p| (p.as_slice(), &[][..])).map_err(|e| *e))
        .collect();
    score_outcomes(model, vocab, traces, &inputs, threshold)
}
