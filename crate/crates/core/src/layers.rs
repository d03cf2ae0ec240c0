//! Parameterized building blocks shared by the generative model, the encoder
//! and the classification heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{xavier_uniform, ParamId, ParamStore, Tape, Tensor, Var};

/// Forward-pass mode. Dropout draws from the training RNG and is the identity
/// in evaluation.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)`.
pub fn dropout(tape: &mut Tape, x: Var, p: f32, mode: &mut Mode) -> Result<Var> {
    let Mode::Train(rng) = mode else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f32>() < p { 0.0 } else { keep });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.weight"), xavier_uniform(rng, &[in_dim, out_dim], in_dim, out_dim));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f32 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Additive attention bias `[B, H, L, L]`: 0 where query `t` may attend to key
/// `u`, a large negative value otherwise. Keys at PAD positions are always
/// excluded; `causal` also excludes `u > t`.
pub fn attention_bias(mask: &[f32], batch: usize, len: usize, heads: usize, causal: bool) -> Tensor {
    const BLOCKED: f32 = -1e9;
    let mut data = Vec::with_capacity(batch * heads * len * len);
    for b in 0..batch {
        let row = &mask[b * len..(b + 1) * len];
        let mut block = Vec::with_capacity(len * len);
        for t in 0..len {
            for (u, &m) in row.iter().enumerate() {
                let open = m > 0.0 && (!causal || u <= t);
                block.push(if open { 0.0 } else { BLOCKED });
            }
        }
        for _ in 0..heads {
            data.extend_from_slice(&block);
        }
    }
    Tensor::from_parts(vec![batch, heads, len, len], data)
}

/// Multi-head scaled dot-product self-attention with a fused QKV projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        SelfAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `x[B, L, D]` with a precomputed `[B, H, L, L]` bias.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        bias: Var,
        attn_dropout: f32,
        mode: &mut Mode,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, l) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let qkv = self.qkv.forward(tape, store, x)?;
        let qkv = tape.reshape(qkv, &[b, l, 3, self.heads, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let p = tape.slice(qkv, 0, i, 1)?;
            parts.push(tape.reshape(p, &[b, self.heads, l, dh])?);
        }
        let scores = tape.bmm(parts[0], parts[1], true)?;
        let scores = tape.affine(scores, 1.0 / (dh as f32).sqrt(), 0.0);
        let scores = tape.add(scores, bias)?;
        let probs = tape.softmax(scores, 3)?;
        let probs = dropout(tape, probs, attn_dropout, mode)?;
        let ctx = tape.bmm(probs, parts[2], false)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, self.dim])?;
        self.out.forward(tape, store, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }
}

/// Where layer normalization sits relative to each residual branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPlacement {
    /// `x + f(LN(x))`
    Pre,
    /// `LN(x + f(x))`
    Post,
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: SelfAttention,
    pub ff: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub placement: NormPlacement,
}

pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &BlockDims,
        placement: NormPlacement,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TransformerBlock {
            attn: SelfAttention::new(store, &format!("{name}.attn"), dims.dim, dims.heads, rng),
            ff: FeedForward::new(store, &format!("{name}.ff"), dims.dim, dims.ff_dim, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dims.dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dims.dim),
            placement,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        bias: Var,
        dropout_p: f32,
        attn_dropout: f32,
        mode: &mut Mode,
    ) -> Result<Var> {
        match self.placement {
            NormPlacement::Pre => {
                let h = self.ln1.forward(tape, store, x)?;
                let h = self.attn.forward(tape, store, h, bias, attn_dropout, mode)?;
                let h = dropout(tape, h, dropout_p, mode)?;
                let x = tape.add(x, h)?;
                let h = self.ln2.forward(tape, store, x)?;
                let h = self.ff.forward(tape, store, h)?;
                let h = dropout(tape, h, dropout_p, mode)?;
                tape.add(x, h)
            }
            NormPlacement::Post => {
                let h = self.attn.forward(tape, store, x, bias, attn_dropout, mode)?;
                let h = dropout(tape, h, dropout_p, mode)?;
                let x = tape.add(x, h)?;
                let x = self.ln1.forward(tape, store, x)?;
                let h = self.ff.forward(tape, store, x)?;
                let h = dropout(tape, h, dropout_p, mode)?;
                let x = tape.add(x, h)?;
                self.ln2.forward(tape, store, x)
            }
        }
    }
}

/// Token plus learned positional embeddings for `ids[B, L]`.
pub fn embed_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    tokens: ParamId,
    positions: ParamId,
    ids: &[u32],
    batch: usize,
    len: usize,
) -> Result<Var> {
    let tok = tape.param(store, tokens);
    let pos = tape.param(store, positions);
    let x = tape.embedding(tok, ids, &[batch, len])?;
    let pos_ids: Vec<u32> = (0..batch).flat_map(|_| 0..len as u32).collect();
    let p = tape.embedding(pos, &pos_ids, &[batch, len])?;
    tape.add(x, p)
}
