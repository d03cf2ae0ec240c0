//! Decoder-only causal language model over API-call ids: training,
//! next-call prediction and autoregressive suffix generation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::LM_FORMAT;
use crate::checkpoint::{decode_checkpoint, encode_checkpoint, write_file};
use crate::corpus::{token_ids, ApiTrace, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::layers::{
    attention_bias, dropout, embed_tokens, BlockDims, LayerNorm, Linear, Mode, NormPlacement, TransformerBlock,
};
use crate::numerics::{adam_step, xavier_uniform, AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub dropout: f32,
    pub seed: u64,
}

impl LmConfig {
    /// Small CPU-friendly model.
    pub fn desk(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            max_len: 128,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 128,
            dropout: 0.1,
            seed: 42,
        }
    }

    /// Desk dimensions with a 500-token context.
    pub fn long_context(vocab_size: usize) -> Self {
        LmConfig {
            max_len: 500,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if self.n_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.ff_dim == 0 {
            return bad("n_layers and ff_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GenerativeLm {
    config: LmConfig,
    store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
    vocab_hash: String,
}

#[derive(Serialize, Deserialize)]
struct LmMeta {
    config: LmConfig,
    vocab_hash: String,
}

impl GenerativeLm {
    /// Fresh model with Xavier-uniform weights drawn from `config.seed`.
    pub fn new(config: LmConfig, vocab_hash: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (v, d) = (config.vocab_size, config.embed_dim);
        let tok = store.add("tok_embed", xavier_uniform(&mut rng, &[v, d], v, d));
        let pos = store.add(
            "pos_embed",
            xavier_uniform(&mut rng, &[config.max_len, d], config.max_len, d),
        );
        let dims = BlockDims {
            dim: d,
            heads: config.n_heads,
            ff_dim: config.ff_dim,
        };
        let blocks = (0..config.n_layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("block{i}"), &dims, NormPlacement::Pre, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", d);
        let head = Linear::new(&mut store, "head", d, v, &mut rng);
        Ok(GenerativeLm {
            config,
            store,
            tok,
            pos,
            blocks,
            ln_f,
            head,
            vocab_hash: vocab_hash.into(),
        })
    }

    /// Model sized for `vocab` and bound to its hash.
    pub fn for_vocab(mut config: LmConfig, vocab: &Vocabulary) -> Result<Self> {
        config.vocab_size = vocab.size();
        Self::new(config, vocab.hash())
    }

    pub fn config(&self) -> &LmConfig {
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

    pub fn output_head(&self) -> &Linear {
        &self.head
    }

    fn check_ids(&self, ids: &[u32], len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::CapacityExceeded {
                len,
                max: self.config.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::IdOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Final-layer hidden states `[B, L, D]`.
    fn hidden(&self, tape: &mut Tape, ids: &[u32], mask: &[f32], batch: usize, len: usize, mode: &mut Mode) -> Result<Var> {
        self.check_ids(ids, len)?;
        if ids.len() != batch * len || mask.len() != batch * len {
            return Err(Error::shape("lm input", &[batch, len], &[ids.len()]));
        }
        let x = embed_tokens(tape, &self.store, self.tok, self.pos, ids, batch, len)?;
        let mut x = dropout(tape, x, self.config.dropout, mode)?;
        let bias = tape.constant(attention_bias(mask, batch, len, self.config.n_heads, true));
        for block in &self.blocks {
            x = block.forward(tape, &self.store, x, bias, self.config.dropout, self.config.dropout, mode)?;
        }
        self.ln_f.forward(tape, &self.store, x)
    }

    fn logits_var(&self, tape: &mut Tape, ids: &[u32], mask: &[f32], batch: usize, len: usize, mode: &mut Mode) -> Result<Var> {
        let h = self.hidden(tape, ids, mask, batch, len, mode)?;
        self.head.forward(tape, &self.store, h)
    }

    /// Output logits for selected `(row, position)` pairs only.
    fn logits_at(&self, ids: &[u32], mask: &[f32], batch: usize, len: usize, at: &[(usize, usize)]) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::no_grad();
        let h = self.hidden(&mut tape, ids, mask, batch, len, &mut Mode::Eval)?;
        let d = self.config.embed_dim;
        let hv = tape.value(h).data();
        let mut rows = Vec::with_capacity(at.len() * d);
        for &(b, t) in at {
            let o = (b * len + t) * d;
            rows.extend_from_slice(&hv[o..o + d]);
        }
        let x = Tensor::new(vec![at.len(), d], rows)?;
        let logits = x.matmul(self.store.get(self.head.w))?;
        let bias = self.store.get(self.head.b).data();
        let v = self.config.vocab_size;
        Ok(logits
            .data()
            .chunks(v)
            .map(|r| r.iter().zip(bias).map(|(a, b)| a + b).collect())
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = LmMeta {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
        };
        encode_checkpoint(LM_FORMAT, &meta, &[("lm", &self.store)])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt = decode_checkpoint(bytes, LM_FORMAT)?;
        let meta: LmMeta = ckpt.meta_as()?;
        let mut model = GenerativeLm::new(meta.config, meta.vocab_hash)?;
        model.store.load_named(ckpt.group("lm")?)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Logits `[B, L, V]` for row-major `ids[B, L]`; `logits[b, t]` scores the
/// token at `t + 1`.
pub fn lm_forward(model: &GenerativeLm, ids: &[u32], mask: &[f32], batch: usize, len: usize) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let y = model.logits_var(&mut tape, ids, mask, batch, len, &mut Mode::Eval)?;
    Ok(tape.value(y).clone())
}

/// Training rows `BOS + ids + EOS` capped at `max_len`; labels are dropped.
pub fn lm_rows(traces: &[ApiTrace], vocab: &Vocabulary, max_len: usize) -> Vec<Vec<u32>> {
    traces.iter().map(|t| token_ids(&t.calls, vocab, max_len)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

/// Per-epoch mean losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub dev: Vec<f64>,
}

/// Shifted next-token batch: inputs `row[..n-1]`, targets `row[1..]`.
struct NextTokenBatch {
    ids: Vec<u32>,
    mask: Vec<f32>,
    targets: Vec<u32>,
    weights: Vec<f32>,
    batch: usize,
    len: usize,
}

impl NextTokenBatch {
    fn new(rows: &[&Vec<u32>]) -> Self {
        let len = rows.iter().map(|r| r.len() - 1).max().unwrap_or(1);
        let batch = rows.len();
        let mut b = NextTokenBatch {
            ids: Vec::with_capacity(batch * len),
            mask: Vec::with_capacity(batch * len),
            targets: Vec::with_capacity(batch * len),
            weights: Vec::with_capacity(batch * len),
            batch,
            len,
        };
        for row in rows {
            let n = row.len() - 1;
            for t in 0..len {
                if t < n {
                    b.ids.push(row[t]);
                    b.mask.push(1.0);
                    b.targets.push(row[t + 1]);
                    b.weights.push(if row[t + 1] == PAD { 0.0 } else { 1.0 });
                } else {
                    b.ids.push(PAD);
                    b.mask.push(0.0);
                    b.targets.push(PAD);
                    b.weights.push(0.0);
                }
            }
        }
        b
    }

    fn tokens(&self) -> f64 {
        self.weights.iter().map(|&w| w as f64).sum()
    }
}

fn usable_rows<'a>(rows: &'a [Vec<u32>], max_len: usize) -> Result<Vec<&'a Vec<u32>>> {
    if let Some(r) = rows.iter().find(|r| r.len() > max_len) {
        return Err(Error::CapacityExceeded { len: r.len(), max: max_len });
    }
    Ok(rows.iter().filter(|r| r.len() >= 2).collect())
}

/// Token-weighted mean next-token cross-entropy over non-PAD targets.
pub fn mean_next_token_loss(model: &GenerativeLm, rows: &[Vec<u32>], batch_size: usize) -> Result<f64> {
    let rows = usable_rows(rows, model.config.max_len)?;
    if rows.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let (mut total, mut count) = (0.0f64, 0.0f64);
    for chunk in rows.chunks(batch_size.max(1)) {
        let nb = NextTokenBatch::new(chunk);
        let mut tape = Tape::no_grad();
        let logits = model.logits_var(&mut tape, &nb.ids, &nb.mask, nb.batch, nb.len, &mut Mode::Eval)?;
        let flat = tape.reshape(logits, &[nb.batch * nb.len, model.config.vocab_size])?;
        let loss = tape.cross_entropy(flat, &nb.targets, &nb.weights)?;
        let n = nb.tokens();
        total += tape.value(loss).item() as f64 * n;
        count += n;
    }
    if count == 0.0 {
        return Err(Error::EmptyInput("evaluation targets"));
    }
    Ok(total / count)
}

/// `exp` of the mean next-token cross-entropy over non-PAD positions.
pub fn perplexity(model: &GenerativeLm, rows: &[Vec<u32>]) -> Result<f64> {
    Ok(mean_next_token_loss(model, rows, 64)?.exp())
}

/// Trains with Adam on mean next-token cross-entropy. Batch order and dropout
/// masks are drawn from `config.seed`.
pub fn lm_train(model: &mut GenerativeLm, train: &[Vec<u32>], dev: &[Vec<u32>], opts: &LmTrainConfig) -> Result<LossCurve> {
    let rows = usable_rows(train, model.config.max_len)?;
    if rows.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x6c6d_7472);
    let mut adam = AdamState::new(opts.adam);
    let mut curve = LossCurve::default();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0f64, 0.0f64);
        for chunk in order.chunks(opts.batch_size) {
            let batch_rows: Vec<&Vec<u32>> = chunk.iter().map(|&i| rows[i]).collect();
            let nb = NextTokenBatch::new(&batch_rows);
            let mut tape = Tape::new();
            let logits = model.logits_var(&mut tape, &nb.ids, &nb.mask, nb.batch, nb.len, &mut Mode::Train(&mut rng))?;
            let flat = tape.reshape(logits, &[nb.batch * nb.len, model.config.vocab_size])?;
            let loss = tape.cross_entropy(flat, &nb.targets, &nb.weights)?;
            let grads = tape.backward(loss)?;
            adam_step(&mut [&mut model.store], &grads, &mut adam)?;
            let n = nb.tokens();
            total += tape.value(loss).item() as f64 * n;
            count += n;
        }
        curve.train.push(if count > 0.0 { total / count } else { 0.0 });
        if !dev.is_empty() {
            curve.dev.push(mean_next_token_loss(model, dev, 64)?);
        }
    }
    Ok(curve)
}

/// Next-token distribution after `prefix`. PAD and BOS never follow a
/// prefix, so their probability is fixed at zero.
pub fn predict_next(model: &GenerativeLm, prefix: &[u32]) -> Result<Vec<f32>> {
    if prefix.is_empty() {
        return Err(Error::EmptyInput("prefix"));
    }
    if prefix.len() > model.config.max_len - 1 {
        return Err(Error::CapacityExceeded {
            len: prefix.len() + 1,
            max: model.config.max_len,
        });
    }
    let n = prefix.len();
    let mut logits = model
        .logits_at(prefix, &vec![1.0; n], 1, n, &[(0, n - 1)])?
        .remove(0);
    logits[PAD as usize] = f32::NEG_INFINITY;
    logits[BOS as usize] = f32::NEG_INFINITY;
    Ok(Tensor::new(vec![logits.len()], logits)?.softmax(0)?.into_data())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    TopK,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Greedy => "greedy",
            Strategy::TopK => "topk",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "topk" => Ok(Strategy::TopK),
            other => Err(Error::InvalidArgument(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prefix: Vec<u32>,
    pub horizon: usize,
    pub strategy: Strategy,
    pub k: usize,
    pub temperature: f32,
    pub seed: u64,
}

impl GenRequest {
    pub fn greedy(prefix: Vec<u32>, horizon: usize) -> Self {
        GenRequest {
            prefix,
            horizon,
            strategy: Strategy::Greedy,
            k: 5,
            temperature: 1.0,
            seed: 0,
        }
    }

    pub fn top_k(prefix: Vec<u32>, horizon: usize, k: usize, temperature: f32, seed: u64) -> Self {
        GenRequest {
            prefix,
            horizon,
            strategy: Strategy::TopK,
            k,
            temperature,
            seed,
        }
    }

    fn validate(&self, cfg: &LmConfig) -> Result<()> {
        if self.prefix.is_empty() {
            return Err(Error::EmptyInput("prefix"));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if self.k == 0 || self.k > cfg.vocab_size {
            return Err(Error::InvalidArgument(format!("k={} outside [1, {}]", self.k, cfg.vocab_size)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {} must be positive", self.temperature)));
        }
        let total = self.prefix.len() + self.horizon;
        if total > cfg.max_len {
            return Err(Error::CapacityExceeded {
                len: total,
                max: cfg.max_len,
            });
        }
        Ok(())
    }
}

fn is_candidate(id: usize) -> bool {
    id != PAD as usize && id != BOS as usize && id != EOS as usize
}

/// Picks the next id from raw logits. Reserved delimiters are never chosen;
/// ties resolve to the lower id. Top-k draws exactly one uniform per call.
fn choose(logits: &[f32], req: &GenRequest, rng: &mut ChaCha8Rng) -> u32 {
    let mut cands: Vec<usize> = (0..logits.len()).filter(|&i| is_candidate(i)).collect();
    cands.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    match req.strategy {
        Strategy::Greedy => cands[0] as u32,
        Strategy::TopK => {
            let top = &cands[..req.k.min(cands.len())];
            let t = req.temperature as f64;
            let max = logits[top[0]] as f64;
            let w: Vec<f64> = top.iter().map(|&i| ((logits[i] as f64 - max) / t).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (&i, &wi) in top.iter().zip(&w) {
                if u < wi {
                    return i as u32;
                }
                u -= wi;
            }
            top[top.len() - 1] as u32
        }
    }
}

/// Rows per forward pass during batched generation.
const GEN_CHUNK: usize = 64;

/// Batched autoregressive generation; `out[i]` equals
/// `generate_suffix(model, &reqs[i])`.
pub fn generate_batch(model: &GenerativeLm, reqs: &[GenRequest]) -> Result<Vec<Vec<u32>>> {
    for r in reqs {
        r.validate(&model.config)?;
        model.check_ids(&r.prefix, r.prefix.len())?;
    }
    let mut out = Vec::with_capacity(reqs.len());
    for chunk in reqs.chunks(GEN_CHUNK) {
        let mut seqs: Vec<Vec<u32>> = chunk.iter().map(|r| r.prefix.clone()).collect();
        let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
        let steps = chunk.iter().map(|r| r.horizon).max().unwrap_or(0);
        for step in 0..steps {
            let active: Vec<usize> = (0..chunk.len()).filter(|&i| step < chunk[i].horizon).collect();
            let len = active.iter().map(|&i| seqs[i].len()).max().unwrap();
            let mut ids = Vec::with_capacity(active.len() * len);
            let mut mask = Vec::with_capacity(active.len() * len);
            let mut at = Vec::with_capacity(active.len());
            for (b, &i) in active.iter().enumerate() {
                let s = &seqs[i];
                ids.extend_from_slice(s);
                ids.extend(std::iter::repeat(PAD).take(len - s.len()));
                mask.extend((0..len).map(|t| if t < s.len() { 1.0 } else { 0.0 }));
                at.push((b, s.len() - 1));
            }
            let logits = model.logits_at(&ids, &mask, active.len(), len, &at)?;
            for (row, &i) in logits.iter().zip(&active) {
                let next = choose(row, &chunk[i], &mut rngs[i]);
                seqs[i].push(next);
            }
        }
        for (s, r) in seqs.into_iter().zip(chunk) {
            out.push(s[r.prefix.len()..].to_vec());
        }
    }
    Ok(out)
}

/// Exactly `req.horizon` generated ids following `req.prefix`.
pub fn generate_suffix(model: &GenerativeLm, req: &GenRequest) -> Result<Vec<u32>> {
    Ok(generate_batch(model, std::slice::from_ref(req))?.remove(0))
}

/// `prefix ++ suffix`, bounded by `max_len`.
pub fn assemble_extended(prefix: &[u32], suffix: &[u32], max_len: usize) -> Result<Vec<u32>> {
    if suffix.is_empty() {
        return Err(Error::InvalidArgument("suffix must hold at least one id".into()));
    }
    let len = prefix.len() + suffix.len();
    if len > max_len {
        return Err(Error::CapacityExceeded { len, max: max_len });
    }
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(prefix);
    out.extend_from_slice(suffix);
    Ok(out)
}
