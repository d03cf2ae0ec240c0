//! Classification heads over contextual embeddings: BiGRU with attention
//! pooling, plus recurrent and convolutional baselines.
//!
//! Every head maps `X[B, L, D]` and a `[B, L]` mask to malware probabilities
//! `[B]`. PAD positions never influence the result.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{dropout, Linear, Mode};
use crate::numerics::{xavier_uniform, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    BigruAttention,
    Lstm,
    Bilstm,
    Gru,
    Cnn,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 5] = [
        HeadVariant::BigruAttention,
        HeadVariant::Lstm,
        HeadVariant::Bilstm,
        HeadVariant::Gru,
        HeadVariant::Cnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::BigruAttention => "bigru_attention",
            HeadVariant::Lstm => "lstm",
            HeadVariant::Bilstm => "bilstm",
            HeadVariant::Gru => "gru",
            HeadVariant::Cnn => "cnn",
        }
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown head variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    /// Recurrent hidden units per direction.
    pub hidden: usize,
    pub dense: [usize; 2],
    /// Applied to the sequence features before pooling, in training only.
    pub dropout: f32,
    pub cnn_widths: Vec<usize>,
    pub cnn_filters: usize,
    pub seed: u64,
}

impl HeadConfig {
    pub fn new(variant: HeadVariant) -> Self {
        HeadConfig {
            variant,
            hidden: 32,
            dense: [64, 32],
            dropout: 0.3,
            cnn_widths: vec![3, 5],
            cnn_filters: 32,
            seed: 42,
        }
    }
}

/// Standard GRU cell with gate order (update, reset, candidate).
#[derive(Clone, Debug)]
pub struct GruCell {
    /// Input weights `[D, 3H]`.
    pub w: ParamId,
    /// Update and reset recurrent weights `[H, 2H]`.
    pub u_zr: ParamId,
    /// Candidate recurrent weights `[H, H]`.
    pub u_h: ParamId,
    /// Biases `[3H]`.
    pub b: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let h = hidden;
        GruCell {
            w: store.add(format!("{name}.w"), xavier_uniform(rng, &[input, 3 * h], input, h)),
            u_zr: store.add(format!("{name}.u_zr"), xavier_uniform(rng, &[h, 2 * h], h, h)),
            u_h: store.add(format!("{name}.u_h"), xavier_uniform(rng, &[h, h], h, h)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[3 * h])),
            hidden,
        }
    }

    /// One step on the tape: `x[B, D]`, `h[B, H]` to `h[B, H]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let xw = project(tape, store, x, self.w, self.b)?;
        self.step(tape, store, xw, h)
    }

    /// `xw[B, 3H]` is the precomputed `x·W + b`.
    fn step(&self, tape: &mut Tape, store: &ParamStore, xw: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let u_zr = tape.param(store, self.u_zr);
        let u_h = tape.param(store, self.u_h);
        let x_z = tape.slice(xw, 1, 0, hd)?;
        let x_r = tape.slice(xw, 1, hd, hd)?;
        let x_h = tape.slice(xw, 1, 2 * hd, hd)?;
        let hu = tape.matmul(h, u_zr)?;
        let h_z = tape.slice(hu, 1, 0, hd)?;
        let h_r = tape.slice(hu, 1, hd, hd)?;
        let z = tape.add(x_z, h_z)?;
        let z = tape.sigmoid(z);
        let r = tape.add(x_r, h_r)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let c = tape.matmul(rh, u_h)?;
        let c = tape.add(x_h, c)?;
        let c = tape.tanh(c);
        // (1 - z)·h + z·c
        let delta = tape.sub(c, h)?;
        let delta = tape.mul(z, delta)?;
        tape.add(h, delta)
    }
}

/// One GRU step on plain vectors: `x[D]`, `h_prev[H]` to `h[H]`.
pub fn gru_step(cell: &GruCell, store: &ParamStore, x: &[f32], h_prev: &[f32]) -> Result<Vec<f32>> {
    let d = store.get(cell.w).shape()[0];
    if x.len() != d || h_prev.len() != cell.hidden {
        return Err(Error::shape("gru_step", &[d, cell.hidden], &[x.len(), h_prev.len()]));
    }
    let mut tape = Tape::no_grad();
    let xv = tape.constant(Tensor::new(vec![1, d], x.to_vec())?);
    let hv = tape.constant(Tensor::new(vec![1, cell.hidden], h_prev.to_vec())?);
    let out = cell.forward(&mut tape, store, xv, hv)?;
    Ok(tape.value(out).data().to_vec())
}

/// LSTM cell with gate order (input, forget, candidate, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    /// Input weights `[D, 4H]`.
    pub w: ParamId,
    /// Recurrent weights `[H, 4H]`.
    pub u: ParamId,
    /// Biases `[4H]`.
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let h = hidden;
        LstmCell {
            w: store.add(format!("{name}.w"), xavier_uniform(rng, &[input, 4 * h], input, h)),
            u: store.add(format!("{name}.u"), xavier_uniform(rng, &[h, 4 * h], h, h)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[4 * h])),
            hidden,
        }
    }

    /// One step on the tape; returns `(h, c)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xw = project(tape, store, x, self.w, self.b)?;
        self.step(tape, store, xw, h, c)
    }

    /// Returns `(h, c)`.
    fn step(&self, tape: &mut Tape, store: &ParamStore, xw: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let u = tape.param(store, self.u);
        let hu = tape.matmul(h, u)?;
        let g = tape.add(xw, hu)?;
        let i = tape.slice(g, 1, 0, hd)?;
        let i = tape.sigmoid(i);
        let f = tape.slice(g, 1, hd, hd)?;
        let f = tape.sigmoid(f);
        let cand = tape.slice(g, 1, 2 * hd, hd)?;
        let cand = tape.tanh(cand);
        let o = tape.slice(g, 1, 3 * hd, hd)?;
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, cand)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }
}

/// One LSTM step on plain vectors; returns `(h, c)`.
pub fn lstm_step(cell: &LstmCell, store: &ParamStore, x: &[f32], h_prev: &[f32], c_prev: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
    let d = store.get(cell.w).shape()[0];
    let hd = cell.hidden;
    if x.len() != d || h_prev.len() != hd || c_prev.len() != hd {
        return Err(Error::shape("lstm_step", &[d, hd], &[x.len(), h_prev.len()]));
    }
    let mut tape = Tape::no_grad();
    let xv = tape.constant(Tensor::new(vec![1, d], x.to_vec())?);
    let hv = tape.constant(Tensor::new(vec![1, hd], h_prev.to_vec())?);
    let cv = tape.constant(Tensor::new(vec![1, hd], c_prev.to_vec())?);
    let (h, c) = cell.forward(&mut tape, store, xv, hv, cv)?;
    Ok((tape.value(h).data().to_vec(), tape.value(c).data().to_vec()))
}

#[derive(Clone, Copy)]
enum Direction {
    Forward,
    Backward,
}

/// Per-step mask columns `[B, H]`, one per time step.
fn step_masks(tape: &mut Tape, mask: &[f32], batch: usize, len: usize, hidden: usize) -> Vec<Var> {
    (0..len)
        .map(|t| {
            let m = Tensor::from_fn(&[batch, hidden], |i| mask[(i / hidden) * len + t]);
            tape.constant(m)
        })
        .collect()
}

fn check_input(tape: &Tape, x: Var, mask: &[f32], input: usize) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != input || mask.len() != s[0] * s[1] {
        return Err(Error::shape("head input", s, &[mask.len(), input]));
    }
    Ok((s[0], s[1]))
}

/// Input projection `x·W + b` for all steps, `[B, L, G]`.
fn project(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn at_step(tape: &mut Tape, xw: Var, t: usize) -> Result<Var> {
    let s = tape.shape(xw).to_vec();
    let v = tape.slice(xw, 1, t, 1)?;
    tape.reshape(v, &[s[0], s[2]])
}

/// Masked step update: real positions take the new state, PAD positions
/// keep the old one.
fn gate_state(tape: &mut Tape, old: Var, new: Var, m: Var) -> Result<Var> {
    let d = tape.sub(new, old)?;
    let d = tape.mul(m, d)?;
    tape.add(old, d)
}

/// Runs a GRU over real positions in one direction. Returns the per-step
/// outputs (zero at PAD) in time order and the final state.
fn run_gru(
    tape: &mut Tape,
    store: &ParamStore,
    cell: &GruCell,
    x: Var,
    masks: &[Var],
    dir: Direction,
) -> Result<(Vec<Var>, Var)> {
    let batch = tape.shape(x)[0];
    let len = masks.len();
    let xw = project(tape, store, x, cell.w, cell.b)?;
    let mut h = tape.constant(Tensor::zeros(&[batch, cell.hidden]));
    let mut outs = vec![None; len];
    let order: Vec<usize> = match dir {
        Direction::Forward => (0..len).collect(),
        Direction::Backward => (0..len).rev().collect(),
    };
    for t in order {
        let xt = at_step(tape, xw, t)?;
        let h_new = cell.step(tape, store, xt, h)?;
        outs[t] = Some(tape.mul(masks[t], h_new)?);
        h = gate_state(tape, h, h_new, masks[t])?;
    }
    Ok((outs.into_iter().map(Option::unwrap).collect(), h))
}

fn run_lstm(
    tape: &mut Tape,
    store: &ParamStore,
    cell: &LstmCell,
    x: Var,
    masks: &[Var],
    dir: Direction,
) -> Result<Var> {
    let batch = tape.shape(x)[0];
    let len = masks.len();
    let xw = project(tape, store, x, cell.w, cell.b)?;
    let mut h = tape.constant(Tensor::zeros(&[batch, cell.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[batch, cell.hidden]));
    let order: Vec<usize> = match dir {
        Direction::Forward => (0..len).collect(),
        Direction::Backward => (0..len).rev().collect(),
    };
    for t in order {
        let xt = at_step(tape, xw, t)?;
        let (h_new, c_new) = cell.step(tape, store, xt, h, c)?;
        h = gate_state(tape, h, h_new, masks[t])?;
        c = gate_state(tape, c, c_new, masks[t])?;
    }
    Ok(h)
}

fn stack_steps(tape: &mut Tape, steps: &[Var]) -> Result<Var> {
    let s = tape.shape(steps[0]).to_vec();
    let cols: Vec<Var> = steps
        .iter()
        .map(|&v| tape.reshape(v, &[s[0], 1, s[1]]))
        .collect::<Result<_>>()?;
    tape.concat(&cols, 1)
}

/// Bidirectional GRU: `X[B, L, D]` to `[B, L, 2H]` with `[h_fwd; h_bwd]` per
/// position and zeros at PAD.
pub fn bigru_forward(
    tape: &mut Tape,
    store: &ParamStore,
    fwd: &GruCell,
    bwd: &GruCell,
    x: Var,
    mask: &[f32],
) -> Result<Var> {
    let input = store.get(fwd.w).shape()[0];
    let (batch, len) = check_input(tape, x, mask, input)?;
    let masks = step_masks(tape, mask, batch, len, fwd.hidden);
    let (f, _) = run_gru(tape, store, fwd, x, &masks, Direction::Forward)?;
    let (b, _) = run_gru(tape, store, bwd, x, &masks, Direction::Backward)?;
    let f = stack_steps(tape, &f)?;
    let b = stack_steps(tape, &b)?;
    tape.concat(&[f, b], 2)
}

/// Parameter-free self-attention pooling over `H[B, L, C]`.
///
/// Relevance `s_t = Σ_u h_t·h_u / √C` over real `u`, softmax over real `t`.
/// Uses `Σ_u h_t·h_u = h_t·(Σ_u h_u)` to avoid the `L×L` score matrix.
/// Returns `(context[B, C], weights[B, L])`.
pub fn attention_pool(tape: &mut Tape, h: Var, mask: &[f32]) -> Result<(Var, Var)> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 || mask.len() != s[0] * s[1] {
        return Err(Error::shape("attention_pool", &s, &[mask.len()]));
    }
    let (b, l, c) = (s[0], s[1], s[2]);
    if let Some(row) = (0..b).find(|&r| mask[r * l..(r + 1) * l].iter().all(|&m| m == 0.0)) {
        return Err(Error::AllPadRow(row));
    }
    let m = tape.constant(Tensor::from_fn(&[b, l, c], |i| mask[i / c]));
    let hm = tape.mul(h, m)?;
    let total = tape.sum_axis(hm, 1)?;
    let total = tape.reshape(total, &[b, c, 1])?;
    let scores = tape.bmm(hm, total, false)?;
    let scores = tape.reshape(scores, &[b, l])?;
    let scores = tape.affine(scores, 1.0 / (c as f32).sqrt(), 0.0);
    let blocked = tape.constant(Tensor::from_fn(&[b, l], |i| if mask[i] > 0.0 { 0.0 } else { -1e9 }));
    let scores = tape.add(scores, blocked)?;
    let alpha = tape.softmax(scores, 1)?;
    let a3 = tape.reshape(alpha, &[b, 1, l])?;
    let ctx = tape.bmm(a3, hm, false)?;
    let ctx = tape.reshape(ctx, &[b, c])?;
    Ok((ctx, alpha))
}

/// `σ(W₃·ReLU(W₂·ReLU(W₁·x + b₁) + b₂) + b₃)`.
#[derive(Clone, Debug)]
pub struct DenseStack {
    pub layers: [Linear; 3],
}

impl DenseStack {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, widths: [usize; 2], rng: &mut ChaCha8Rng) -> Self {
        DenseStack {
            layers: [
                Linear::new(store, &format!("{name}.l1"), input, widths[0], rng),
                Linear::new(store, &format!("{name}.l2"), widths[0], widths[1], rng),
                Linear::new(store, &format!("{name}.out"), widths[1], 1, rng),
            ],
        }
    }
}

/// Probabilities `[B]` from features `x[B, C]`.
pub fn dense_forward(tape: &mut Tape, store: &ParamStore, stack: &DenseStack, x: Var) -> Result<Var> {
    let h = stack.layers[0].forward(tape, store, x)?;
    let h = tape.relu(h);
    let h = stack.layers[1].forward(tape, store, h)?;
    let h = tape.relu(h);
    let y = stack.layers[2].forward(tape, store, h)?;
    let p = tape.sigmoid(y);
    let b = tape.shape(p)[0];
    tape.reshape(p, &[b])
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(tape: &mut Tape, p: Var, y: &[f32]) -> Result<Var> {
    tape.bce(p, y)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub width: usize,
    /// `[width·D, F]`
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
enum Body {
    BiGru { fwd: GruCell, bwd: GruCell },
    Gru(GruCell),
    Lstm(LstmCell),
    BiLstm { fwd: LstmCell, bwd: LstmCell },
    Cnn(Vec<Conv>),
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    config: HeadConfig,
    input_dim: usize,
    store: ParamStore,
    body: Body,
    dense: DenseStack,
}

impl ClassifierHead {
    pub fn new(config: HeadConfig, input_dim: usize) -> Result<Self> {
        if config.hidden == 0 || input_dim == 0 || config.dense.contains(&0) {
            return Err(Error::InvalidArgument("head dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let (body, features) = match config.variant {
            HeadVariant::BigruAttention => (
                Body::BiGru {
                    fwd: GruCell::new(&mut store, "bigru.fwd", input_dim, h, &mut rng),
                    bwd: GruCell::new(&mut store, "bigru.bwd", input_dim, h, &mut rng),
                },
                2 * h,
            ),
            HeadVariant::Gru => (Body::Gru(GruCell::new(&mut store, "gru", input_dim, h, &mut rng)), h),
            HeadVariant::Lstm => (Body::Lstm(LstmCell::new(&mut store, "lstm", input_dim, h, &mut rng)), h),
            HeadVariant::Bilstm => (
                Body::BiLstm {
                    fwd: LstmCell::new(&mut store, "bilstm.fwd", input_dim, h, &mut rng),
                    bwd: LstmCell::new(&mut store, "bilstm.bwd", input_dim, h, &mut rng),
                },
                2 * h,
            ),
            HeadVariant::Cnn => {
                if config.cnn_widths.is_empty() || config.cnn_filters == 0 {
                    return Err(Error::InvalidArgument("cnn needs widths and filters".into()));
                }
                if let Some(w) = config.cnn_widths.iter().find(|&&w| w % 2 == 0) {
                    return Err(Error::InvalidArgument(format!("cnn width {w} must be odd")));
                }
                let f = config.cnn_filters;
                let convs = config
                    .cnn_widths
                    .iter()
                    .map(|&width| Conv {
                        width,
                        w: store.add(
                            format!("cnn.w{width}"),
                            xavier_uniform(&mut rng, &[width * input_dim, f], width * input_dim, f),
                        ),
                        b: store.add(format!("cnn.b{width}"), Tensor::zeros(&[f])),
                    })
                    .collect::<Vec<_>>();
                let n = convs.len() * f;
                (Body::Cnn(convs), n)
            }
        };
        let dense = DenseStack::new(&mut store, "dense", features, config.dense, &mut rng);
        Ok(ClassifierHead {
            config,
            input_dim,
            store,
            body,
            dense,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dense(&self) -> &DenseStack {
        &self.dense
    }

    /// The forward and backward cells of a BiGRU head.
    pub fn bigru_cells(&self) -> Option<(&GruCell, &GruCell)> {
        match &self.body {
            Body::BiGru { fwd, bwd } => Some((fwd, bwd)),
            _ => None,
        }
    }

    /// Probabilities `[B]` for embeddings `x[B, L, D]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &[f32], mode: &mut Mode) -> Result<Var> {
        let (batch, len) = check_input(tape, x, mask, self.input_dim)?;
        if let Some(row) = (0..batch).find(|&r| mask[r * len..(r + 1) * len].iter().all(|&m| m == 0.0)) {
            return Err(Error::AllPadRow(row));
        }
        let st = &self.store;
        let p = self.config.dropout;
        let features = match &self.body {
            Body::BiGru { fwd, bwd } => {
                let h = bigru_forward(tape, st, fwd, bwd, x, mask)?;
                let h = dropout(tape, h, p, mode)?;
                attention_pool(tape, h, mask)?.0
            }
            Body::Gru(cell) => {
                let masks = step_masks(tape, mask, batch, len, cell.hidden);
                let (_, h) = run_gru(tape, st, cell, x, &masks, Direction::Forward)?;
                dropout(tape, h, p, mode)?
            }
            Body::Lstm(cell) => {
                let masks = step_masks(tape, mask, batch, len, cell.hidden);
                let h = run_lstm(tape, st, cell, x, &masks, Direction::Forward)?;
                dropout(tape, h, p, mode)?
            }
            Body::BiLstm { fwd, bwd } => {
                let masks = step_masks(tape, mask, batch, len, fwd.hidden);
                let f = run_lstm(tape, st, fwd, x, &masks, Direction::Forward)?;
                let b = run_lstm(tape, st, bwd, x, &masks, Direction::Backward)?;
                let h = tape.concat(&[f, b], 1)?;
                dropout(tape, h, p, mode)?
            }
            Body::Cnn(convs) => {
                let d = self.input_dim;
                let m = tape.constant(Tensor::from_fn(&[batch, len, d], |i| mask[i / d]));
                let xm = tape.mul(x, m)?;
                let mut maps = Vec::with_capacity(convs.len());
                for conv in convs {
                    let windows = tape.unfold(xm, conv.width)?;
                    let y = project(tape, st, windows, conv.w, conv.b)?;
                    maps.push(tape.relu(y));
                }
                let y = tape.concat(&maps, 2)?;
                let y = dropout(tape, y, p, mode)?;
                tape.masked_max(y, mask)?
            }
        };
        dense_forward(tape, st, &self.dense, features)
    }
}

/// Inference-mode probabilities for a plain embedding tensor `x[B, L, D]`.
pub fn head_forward(head: &ClassifierHead, x: &Tensor, mask: &[f32]) -> Result<Vec<f32>> {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let p = head.forward(&mut tape, xv, mask, &mut Mode::Eval)?;
    Ok(tape.value(p).data().to_vec())
}
