//! Reverse-mode autodiff over a linear tape.
//!
//! Every op appends a node whose inputs already exist, so the node order is a
//! topological order and backward is a single reverse sweep.

use std::collections::HashMap;

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::params::{ParamId, ParamStore};
use super::tensor::{AxisDims, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, scale: f32 },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Softmax { a: Var, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<u32>, weights: Vec<f32> },
    Bce { p: Var, targets: Vec<f32> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Embedding { table: Var, ids: Vec<u32> },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Slice { a: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { a: Var, axis: usize },
    MaskedMax { x: Var, argmax: Vec<u32> },
    Unfold { x: Var, width: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward computations. A tape built with [`Tape::no_grad`] never
/// marks anything as requiring gradients.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<(u64, usize), Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const BCE_CLAMP: f32 = 1e-7;

/// Row-major strides.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index of `permute(shape, perm)`, the source flat index.
fn permute_index_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let src: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Input that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; repeated requests for the same parameter share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), Op::Leaf, entry.trainable);
        self.params.insert(key, v);
        v
    }

    // ---------------------------------------------------------------- linear

    /// `a[.., K] · b[K, N]`, leading dims of `a` flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }, rg))
    }

    /// `a[.., K] · b[N, K]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (n, k) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMulNt { a, b }, rg))
    }

    fn bmm_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(Error::shape("bmm", sa, sb));
        }
        let g = sa[..r - 2].iter().product();
        Ok((g, m, k, n))
    }

    /// Batched product over leading dims: `a[.., M, K] · b[.., K, N]`
    /// (or `b[.., N, K]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (g, m, k, n) = self.bmm_dims(a, b, trans_b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(g * m * n);
        for gi in 0..g {
            let ab = &da[gi * m * k..(gi + 1) * m * k];
            let bb = &db[gi * k * n..(gi + 1) * k * n];
            if trans_b {
                out.extend(gemm_nt(ab, bb, m, k, n));
            } else {
                out.extend(gemm(ab, bb, m, k, n));
            }
        }
        let mut shape = self.shape(a).to_vec();
        let r = shape.len();
        shape[r - 1] = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Bmm { a, b, trans_b }, rg))
    }

    // ----------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    /// Adds a `[N]` vector along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let n = sb[0];
        let bd = self.value(bias).data();
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % n])
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias { a, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, rg))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f32, shift: f32) -> Var {
        let v = self.value(a);
        let out: Vec<f32> = v.data().iter().map(|x| scale * x + shift).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Affine { a, scale }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let v = self.value(a);
        let out: Vec<f32> = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f32::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).softmax(axis)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { a, axis }, rg))
    }

    // ---------------------------------------------------------------- losses

    /// Weighted mean token cross-entropy of `logits[N, V]` against `targets`.
    /// Rows with zero weight are ignored; all-zero weights give a zero loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[f32]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || s[0] != weights.len() {
            return Err(Error::shape("cross_entropy", s, &[targets.len()]));
        }
        let (n, v) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(Error::IdOutOfRange { id: t, size: v });
        }
        let data = self.value(logits).data();
        let denom: f64 = weights.iter().map(|&w| w as f64).sum();
        let mut total = 0.0f64;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &data[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
            total += weights[i] as f64 * (lse - row[targets[i] as usize] as f64);
        }
        let loss = if denom > 0.0 { total / denom } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p[B]` (clamped to
    /// `[1e-7, 1 - 1e-7]`) against `targets` in {0, 1}.
    pub fn bce(&mut self, p: Var, targets: &[f32]) -> Result<Var> {
        let pv = self.value(p);
        if pv.numel() != targets.len() || targets.is_empty() {
            return Err(Error::shape("bce", pv.shape(), &[targets.len()]));
        }
        let mut total = 0.0f64;
        for (&pi, &y) in pv.data().iter().zip(targets) {
            let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP) as f64;
            let y = y as f64;
            total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let loss = total / targets.len() as f64;
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    // ------------------------------------------------------------ structural

    /// Normalizes over the last axis, then scales by `gamma` and shifts by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", sx, self.shape(gamma)));
        }
        let shape = sx.to_vec();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / d;
        let mut out = vec![0.0f32; xd.len()];
        let mut xhat = vec![0.0f32; xd.len()];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup `table[V, D]` for `ids`; output shape is `lead ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], lead: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", st, lead));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::IdOutOfRange { id: bad, size: v });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i as usize * d..(i as usize + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let map = permute_index_map(&shape, perm);
        let src = self.value(a).data();
        let out: Vec<f32> = map.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`; the axis is kept.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} of axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let dims = AxisDims::new(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(dims.outer * len * dims.inner);
        for o in 0..dims.outer {
            let base = dims.index(o, start, 0);
            out.extend_from_slice(&src[base..base + len * dims.inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Slice { a, axis, start }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(Error::EmptyInput("concat inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().map(|&x| x as f64).sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::MeanAll(a), rg)
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::InvalidArgument(format!("sum_axis {axis} for {shape:?}")));
        }
        let dims = AxisDims::new(&shape, axis);
        let src = self.value(a).data();
        let mut acc = vec![0.0f64; dims.outer * dims.inner];
        for o in 0..dims.outer {
            for l in 0..dims.len {
                for i in 0..dims.inner {
                    acc[o * dims.inner + i] += src[dims.index(o, l, i)] as f64;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, acc.into_iter().map(|v| v as f32).collect()),
            Op::SumAxis { a, axis },
            rg,
        ))
    }

    /// Max over axis 1 of `x[B, L, C]` restricted to positions with `mask[b, l] = 1`.
    pub fn masked_max(&mut self, x: Var, mask: &[f32]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::shape("masked_max", &s, &[mask.len()]));
        }
        let (b, l, c) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; b * c];
        let mut argmax = vec![0u32; b * c];
        for bi in 0..b {
            if !(0..l).any(|t| mask[bi * l + t] > 0.0) {
                return Err(Error::AllPadRow(bi));
            }
            for ci in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut arg = 0;
                for t in 0..l {
                    if mask[bi * l + t] > 0.0 {
                        let v = xd[(bi * l + t) * c + ci];
                        if v > best {
                            best = v;
                            arg = t;
                        }
                    }
                }
                out[bi * c + ci] = best;
                argmax[bi * c + ci] = arg as u32;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![b, c], out), Op::MaskedMax { x, argmax }, rg))
    }

    /// Sliding windows of odd `width` over axis 1 of `x[B, L, D]`, zero-padded at
    /// both ends: output `[B, L, width * D]`, window offsets `-width/2..=width/2`.
    pub fn unfold(&mut self, x: Var, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || width % 2 == 0 {
            return Err(Error::InvalidArgument(format!("unfold width {width} for {s:?}")));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let half = width / 2;
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; b * l * width * d];
        for bi in 0..b {
            for t in 0..l {
                for j in 0..width {
                    let src = t as isize + j as isize - half as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    let from = (bi * l + src as usize) * d;
                    let to = ((bi * l + t) * width + j) * d;
                    out[to..to + d].copy_from_slice(&xd[from..from + d]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![b, l, width * d], out), Op::Unfold { x, width }, rg))
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, contrib: Vec<f32>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.rg(v) {
            return;
        }
        let n = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let sb = self.shape(b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(a).numel() / k;
                if self.rg(a) {
                    self.accumulate(grads, a, gemm_nt(g, self.value(b).data(), m, n, k));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, gemm_tn(self.value(a).data(), g, m, k, n));
                }
            }
            &Op::MatMulNt { a, b } => {
                let sb = self.shape(b);
                let (n, k) = (sb[0], sb[1]);
                let m = self.value(a).numel() / k;
                if self.rg(a) {
                    self.accumulate(grads, a, gemm(g, self.value(b).data(), m, n, k));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, gemm_tn(g, self.value(a).data(), m, n, k));
                }
            }
            &Op::Bmm { a, b, trans_b } => {
                let (gn, m, k, n) = self.bmm_dims(a, b, trans_b).expect("validated in forward");
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    let mut ga = Vec::with_capacity(da.len());
                    for gi in 0..gn {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &db[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            ga.extend(gemm(gg, bb, m, n, k));
                        } else {
                            ga.extend(gemm_nt(gg, bb, m, n, k));
                        }
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.rg(b) {
                    let mut gb = Vec::with_capacity(db.len());
                    for gi in 0..gn {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &da[gi * m * k..(gi + 1) * m * k];
                        if trans_b {
                            gb.extend(gemm_tn(gg, ab, m, n, k));
                        } else {
                            gb.extend(gemm_tn(ab, gg, m, k, n));
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::AddBias { a, bias } => {
                self.accumulate(grads, a, g.to_vec());
                if self.rg(bias) {
                    let n = self.value(bias).numel();
                    let mut acc = vec![0.0f64; n];
                    for (i, &v) in g.iter().enumerate() {
                        acc[i % n] += v as f64;
                    }
                    self.accumulate(grads, bias, acc.into_iter().map(|v| v as f32).collect());
                }
            }
            &Op::Mul { a, b } => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    self.accumulate(grads, a, g.iter().zip(db).map(|(x, y)| x * y).collect());
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g.iter().zip(da).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Affine { a, scale } => {
                self.accumulate(grads, a, g.iter().map(|x| x * scale).collect());
            }
            &Op::Sigmoid(a) => {
                self.accumulate(grads, a, g.iter().zip(out).map(|(d, y)| d * y * (1.0 - y)).collect());
            }
            &Op::Tanh(a) => {
                self.accumulate(grads, a, g.iter().zip(out).map(|(d, y)| d * (1.0 - y * y)).collect());
            }
            &Op::Relu(a) => {
                let x = self.value(a).data();
                self.accumulate(
                    grads,
                    a,
                    g.iter().zip(x).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect(),
                );
            }
            &Op::Gelu(a) => {
                let x = self.value(a).data();
                self.accumulate(grads, a, g.iter().zip(x).map(|(d, &x)| d * gelu_grad(x)).collect());
            }
            &Op::Softmax { a, axis } => {
                let dims = AxisDims::new(node.value.shape(), axis);
                let mut ga = vec![0.0f32; out.len()];
                for o in 0..dims.outer {
                    for i in 0..dims.inner {
                        let mut s = 0.0f64;
                        for l in 0..dims.len {
                            let idx = dims.index(o, l, i);
                            s += g[idx] as f64 * out[idx] as f64;
                        }
                        for l in 0..dims.len {
                            let idx = dims.index(o, l, i);
                            ga[idx] = (out[idx] as f64 * (g[idx] as f64 - s)) as f32;
                        }
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let lv = self.value(*logits);
                let v = lv.shape()[1];
                let data = lv.data();
                let denom: f64 = weights.iter().map(|&w| w as f64).sum();
                let mut gl = vec![0.0f32; data.len()];
                if denom > 0.0 {
                    let scale = g[0] as f64 / denom;
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = &data[i * v..(i + 1) * v];
                        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                        let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
                        for j in 0..v {
                            let p = (row[j] as f64 - max).exp() / z;
                            let onehot = if j == t as usize { 1.0 } else { 0.0 };
                            gl[i * v + j] = (scale * w as f64 * (p - onehot)) as f32;
                        }
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::Bce { p, targets } => {
                let pv = self.value(*p).data();
                let n = targets.len() as f64;
                let gp = pv
                    .iter()
                    .zip(targets)
                    .map(|(&pi, &y)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pi) {
                            return 0.0;
                        }
                        let (pi, y) = (pi as f64, y as f64);
                        (g[0] as f64 * (-(y / pi) + (1.0 - y) / (1.0 - pi)) / n) as f32
                    })
                    .collect();
                self.accumulate(grads, *p, gp);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gm = self.value(*gamma).data();
                let rows = xhat.len() / d;
                if self.rg(*x) {
                    let mut gx = vec![0.0f32; xhat.len()];
                    for r in 0..rows {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] as f64 * gm[j] as f64;
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j] as f64;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] as f64 * gm[j] as f64;
                            gx[r * d + j] =
                                (rstd[r] as f64 * (dxh - m1 - xhat[r * d + j] as f64 * m2)) as f32;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![0.0f64; d];
                    let mut gb = vec![0.0f64; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] as f64 * xhat[r * d + j] as f64;
                            gb[j] += g[r * d + j] as f64;
                        }
                    }
                    self.accumulate(grads, *gamma, gg.into_iter().map(|v| v as f32).collect());
                    self.accumulate(grads, *beta, gb.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                self.accumulate_with(grads, *table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        let dst = &mut gt[i as usize * d..(i as usize + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                });
            }
            &Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            Op::Permute { a, perm } => {
                let map = permute_index_map(self.shape(*a), perm);
                let mut ga = vec![0.0f32; g.len()];
                for (o, &src) in map.iter().enumerate() {
                    ga[src] = g[o];
                }
                self.accumulate(grads, *a, ga);
            }
            &Op::Slice { a, axis, start } => {
                let dims = AxisDims::new(self.shape(a), axis);
                let len = node.value.shape()[axis];
                self.accumulate_with(grads, a, |ga| {
                    for o in 0..dims.outer {
                        let base = dims.index(o, start, 0);
                        let n = len * dims.inner;
                        ga[base..base + n]
                            .iter_mut()
                            .zip(&g[o * n..(o + 1) * n])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += len;
                }
            }
            &Op::SumAll(a) => {
                let n = self.value(a).numel();
                self.accumulate(grads, a, vec![g[0]; n]);
            }
            &Op::MeanAll(a) => {
                let n = self.value(a).numel();
                self.accumulate(grads, a, vec![g[0] / n as f32; n]);
            }
            &Op::SumAxis { a, axis } => {
                let dims = AxisDims::new(self.shape(a), axis);
                let mut ga = vec![0.0f32; dims.outer * dims.len * dims.inner];
                for o in 0..dims.outer {
                    for l in 0..dims.len {
                        for i in 0..dims.inner {
                            ga[dims.index(o, l, i)] = g[o * dims.inner + i];
                        }
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::MaskedMax { x, argmax } => {
                let s = self.shape(*x);
                let (l, c) = (s[1], s[2]);
                self.accumulate_with(grads, *x, |gx| {
                    for (flat, &t) in argmax.iter().enumerate() {
                        let (bi, ci) = (flat / c, flat % c);
                        gx[(bi * l + t as usize) * c + ci] += g[flat];
                    }
                });
            }
            &Op::Unfold { x, width } => {
                let s = self.shape(x);
                let (b, l, d) = (s[0], s[1], s[2]);
                let half = width / 2;
                self.accumulate_with(grads, x, |gx| {
                    for bi in 0..b {
                        for t in 0..l {
                            for j in 0..width {
                                let src = t as isize + j as isize - half as isize;
                                if src < 0 || src >= l as isize {
                                    continue;
                                }
                                let to = (bi * l + src as usize) * d;
                                let from = ((bi * l + t) * width + j) * d;
                                gx[to..to + d]
                                    .iter_mut()
                                    .zip(&g[from..from + d])
                                    .for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<((u64, usize), Var)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient of a parameter leaf, if it was used on the tape and is trainable.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&[f32]> {
        let key = (store.uid(), id.0);
        self.params
            .iter()
            .find(|(k, _)| *k == key)
            .and_then(|(_, v)| self.grads[v.0].as_deref())
    }
}

/// Element-wise helper shared by inference code paths that bypass the tape.
pub fn sigmoid_scalar(x: f32) -> f32 {
    sigmoid(x)
}

