//! Bidirectional transformer encoder producing contextual call embeddings,
//! with optional masked-token pretraining.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::ENCODER_FORMAT;
use crate::checkpoint::{decode_checkpoint, encode_checkpoint, write_file, Checkpoint};
use crate::corpus::{Vocabulary, PAD, UNK};
use crate::error::{Error, Result};
use crate::layers::{
    attention_bias, dropout, embed_tokens, BlockDims, LayerNorm, Linear, Mode, NormPlacement, TransformerBlock,
};
use crate::numerics::{adam_step, xavier_uniform, AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub dropout: f32,
    pub attention_dropout: f32,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            max_len: 128,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 128,
            dropout: 0.1,
            attention_dropout: 0.1,
            seed: 42,
        }
    }

    /// DistilBERT-base dimensions. Kept for reference; too large for CPU training.
    pub fn full_scale() -> Self {
        EncoderConfig {
            vocab_size: 30522,
            max_len: 512,
            embed_dim: 768,
            n_layers: 6,
            n_heads: 12,
            ff_dim: 3072,
            dropout: 0.1,
            attention_dropout: 0.1,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size < 5 || self.max_len < 1 || self.n_layers == 0 || self.ff_dim == 0 {
            return bad(format!("degenerate encoder config {self:?}"));
        }
        if self.n_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        for p in [self.dropout, self.attention_dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout {p} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Reconstruction head: dense + GELU + LayerNorm, decoded against the token
/// embedding table.
#[derive(Clone, Debug)]
struct MlmHead {
    transform: Linear,
    ln: LayerNorm,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ContextualEncoder {
    config: EncoderConfig,
    store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    ln_emb: LayerNorm,
    blocks: Vec<TransformerBlock>,
    mlm: MlmHead,
    vocab_hash: String,
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
    vocab_hash: String,
}

impl ContextualEncoder {
    pub fn new(config: EncoderConfig, vocab_hash: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (v, d) = (config.vocab_size, config.embed_dim);
        let tok = store.add("tok_embed", xavier_uniform(&mut rng, &[v, d], v, d));
        let pos = store.add(
            "pos_embed",
            xavier_uniform(&mut rng, &[config.max_len, d], config.max_len, d),
        );
        let ln_emb = LayerNorm::new(&mut store, "ln_embed", d);
        let dims = BlockDims {
            dim: d,
            heads: config.n_heads,
            ff_dim: config.ff_dim,
        };
        let blocks = (0..config.n_layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("layer{i}"), &dims, NormPlacement::Post, &mut rng))
            .collect();
        let mlm = MlmHead {
            transform: Linear::new(&mut store, "mlm.transform", d, d, &mut rng),
            ln: LayerNorm::new(&mut store, "mlm.ln", d),
            bias: store.add("mlm.bias", Tensor::zeros(&[v])),
        };
        Ok(ContextualEncoder {
            config,
            store,
            tok,
            pos,
            ln_emb,
            blocks,
            mlm,
            vocab_hash: vocab_hash.into(),
        })
    }

    pub fn for_vocab(mut config: EncoderConfig, vocab: &Vocabulary) -> Result<Self> {
        config.vocab_size = vocab.size();
        Self::new(config, vocab.hash())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Contextual states `[B, L, D]` on `tape`.
    pub fn forward(&self, tape: &mut Tape, ids: &[u32], mask: &[f32], batch: usize, len: usize, mode: &mut Mode) -> Result<Var> {
        if len > self.config.max_len {
            return Err(Error::CapacityExceeded {
                len,
                max: self.config.max_len,
            });
        }
        if ids.len() != batch * len || mask.len() != batch * len {
            return Err(Error::shape("encoder input", &[batch, len], &[ids.len()]));
        }
        let x = embed_tokens(tape, &self.store, self.tok, self.pos, ids, batch, len)?;
        let x = self.ln_emb.forward(tape, &self.store, x)?;
        let mut x = dropout(tape, x, self.config.dropout, mode)?;
        let bias = tape.constant(attention_bias(mask, batch, len, self.config.n_heads, false));
        for block in &self.blocks {
            x = block.forward(
                tape,
                &self.store,
                x,
                bias,
                self.config.dropout,
                self.config.attention_dropout,
                mode,
            )?;
        }
        Ok(x)
    }

    /// Vocabulary logits `[B, L, V]` from encoder states.
    fn mlm_logits(&self, tape: &mut Tape, states: Var) -> Result<Var> {
        let h = self.mlm.transform.forward(tape, &self.store, states)?;
        let h = tape.gelu(h);
        let h = self.mlm.ln.forward(tape, &self.store, h)?;
        let table = tape.param(&self.store, self.tok);
        let logits = tape.matmul_nt(h, table)?;
        let b = tape.param(&self.store, self.mlm.bias);
        tape.add_bias(logits, b)
    }

    pub(crate) fn meta_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(EncoderMeta {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
        })?)
    }

    pub(crate) fn from_parts(meta: serde_json::Value, ckpt: &Checkpoint, group: &str) -> Result<Self> {
        let meta: EncoderMeta = serde_json::from_value(meta)?;
        let mut enc = ContextualEncoder::new(meta.config, meta.vocab_hash)?;
        enc.store.load_named(ckpt.group(group)?)?;
        Ok(enc)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_checkpoint(ENCODER_FORMAT, &self.meta_json()?, &[("encoder", &self.store)])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt = decode_checkpoint(bytes, ENCODER_FORMAT)?;
        Self::from_parts(ckpt.meta.clone(), &ckpt, "encoder")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Inference-mode embeddings `[B, L, D]`. Rows at mask 0 carry values that
/// consumers must ignore.
pub fn encode_contextual(enc: &ContextualEncoder, ids: &[u32], mask: &[f32], batch: usize, len: usize) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let y = enc.forward(&mut tape, ids, mask, batch, len, &mut Mode::Eval)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub mask_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            mask_rate: 0.15,
            epochs: 5,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

/// Positions to hide in `row`: `round(rate * n)` (at least one) of the
/// non-reserved ids, drawn without replacement.
pub fn choose_mask_positions(row: &[u32], rate: f32, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut real: Vec<usize> = (0..row.len()).filter(|&i| !Vocabulary::is_reserved(row[i])).collect();
    if real.is_empty() {
        return real;
    }
    let k = ((rate as f64 * real.len() as f64).round() as usize).clamp(1, real.len());
    real.shuffle(rng);
    real.truncate(k);
    real.sort_unstable();
    real
}

/// A padded batch with hidden positions replaced by UNK and reconstruction
/// targets at exactly those positions.
struct MaskedBatch {
    ids: Vec<u32>,
    mask: Vec<f32>,
    targets: Vec<u32>,
    weights: Vec<f32>,
    batch: usize,
    len: usize,
}

impl MaskedBatch {
    fn new(rows: &[&Vec<u32>], rate: f32, rng: &mut ChaCha8Rng) -> Self {
        let len = rows.iter().map(|r| r.len()).max().unwrap_or(1).max(1);
        let batch = rows.len();
        let n = batch * len;
        let mut mb = MaskedBatch {
            ids: vec![PAD; n],
            mask: vec![0.0; n],
            targets: vec![PAD; n],
            weights: vec![0.0; n],
            batch,
            len,
        };
        for (b, row) in rows.iter().enumerate() {
            let o = b * len;
            mb.ids[o..o + row.len()].copy_from_slice(row);
            mb.mask[o..o + row.len()].fill(1.0);
            for p in choose_mask_positions(row, rate, rng) {
                mb.targets[o + p] = row[p];
                mb.weights[o + p] = 1.0;
                mb.ids[o + p] = UNK;
            }
        }
        mb
    }
}

fn check_rows<'a>(rows: &'a [Vec<u32>], cfg: &EncoderConfig) -> Result<Vec<&'a Vec<u32>>> {
    if let Some(r) = rows.iter().find(|r| r.len() > cfg.max_len) {
        return Err(Error::CapacityExceeded {
            len: r.len(),
            max: cfg.max_len,
        });
    }
    let rows: Vec<&Vec<u32>> = rows.iter().filter(|r| !r.is_empty()).collect();
    if rows.is_empty() {
        return Err(Error::EmptyInput("pretraining corpus"));
    }
    Ok(rows)
}

/// Masked-token pretraining on unlabeled id rows; returns the per-epoch mean
/// reconstruction loss.
pub fn mlm_pretrain(enc: &mut ContextualEncoder, rows: &[Vec<u32>], cfg: &MlmConfig) -> Result<Vec<f64>> {
    if !(cfg.mask_rate > 0.0 && cfg.mask_rate < 0.5) {
        return Err(Error::InvalidArgument(format!("mask_rate {} outside (0, 0.5)", cfg.mask_rate)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let rows = check_rows(rows, &enc.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(enc.config.seed ^ 0x6d6c_6d00);
    let mut adam = AdamState::new(cfg.adam);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0f64, 0.0f64);
        for chunk in order.chunks(cfg.batch_size) {
            let batch_rows: Vec<&Vec<u32>> = chunk.iter().map(|&i| rows[i]).collect();
            let mb = MaskedBatch::new(&batch_rows, cfg.mask_rate, &mut rng);
            let n: f64 = mb.weights.iter().map(|&w| w as f64).sum();
            if n == 0.0 {
                continue;
            }
            let mut tape = Tape::new();
            let states = enc.forward(&mut tape, &mb.ids, &mb.mask, mb.batch, mb.len, &mut Mode::Train(&mut rng))?;
            let logits = enc.mlm_logits(&mut tape, states)?;
            let flat = tape.reshape(logits, &[mb.batch * mb.len, enc.config.vocab_size])?;
            let loss = tape.cross_entropy(flat, &mb.targets, &mb.weights)?;
            let grads = tape.backward(loss)?;
            adam_step(&mut [&mut enc.store], &grads, &mut adam)?;
            total += tape.value(loss).item() as f64 * n;
            count += n;
        }
        curve.push(if count > 0.0 { total / count } else { 0.0 });
    }
    Ok(curve)
}

/// Fraction of hidden positions whose original id is the top prediction,
/// with positions drawn from `seed`.
pub fn mlm_accuracy(enc: &ContextualEncoder, rows: &[Vec<u32>], mask_rate: f32, seed: u64) -> Result<f64> {
    let rows = check_rows(rows, &enc.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = enc.config.vocab_size;
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in rows.chunks(64) {
        let mb = MaskedBatch::new(chunk, mask_rate, &mut rng);
        let mut tape = Tape::no_grad();
        let states = enc.forward(&mut tape, &mb.ids, &mb.mask, mb.batch, mb.len, &mut Mode::Eval)?;
        let logits = enc.mlm_logits(&mut tape, states)?;
        let data = tape.value(logits).data();
        for (i, &w) in mb.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = &data[i * v..(i + 1) * v];
            let best = (0..v).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
            hit += usize::from(best as u32 == mb.targets[i]);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("masked positions"));
    }
    Ok(hit as f64 / total as f64)
}
