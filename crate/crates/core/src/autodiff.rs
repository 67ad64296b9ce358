//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] records every primitive applied during one forward pass
//! together with the state its vector–Jacobian product needs. Nodes are
//! appended after their inputs, so walking the node list backwards is a
//! reverse topological order. A graph may be replayed exactly once.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Padding, Tensor};
use crate::wavelet;

/// Handle to a value slot on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Dwt2(Var),
    Idwt2(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: WindowLayout,
        probs: Vec<f64>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Patchify(Var, usize),
    Unpatchify(Var, usize),
    Sum(Var),
    Norm(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Geometry of windowed multi-head attention over a row-major token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub rows: usize,
    pub cols: usize,
    pub win_rows: usize,
    pub win_cols: usize,
    pub heads: usize,
}

impl WindowLayout {
    pub fn new(rows: usize, cols: usize, window: usize, heads: usize) -> Result<Self> {
        let win_rows = window.min(rows);
        let win_cols = window.min(cols);
        if window == 0 || heads == 0 {
            return Err(Error::invalid("window and head count must be positive"));
        }
        if !rows.is_multiple_of(win_rows) || !cols.is_multiple_of(win_cols) {
            return Err(Error::shape(format!(
                "attention grid {rows}×{cols} not divisible by window {window}"
            )));
        }
        Ok(WindowLayout {
            rows,
            cols,
            win_rows,
            win_cols,
            heads,
        })
    }

    fn window_len(&self) -> usize {
        self.win_rows * self.win_cols
    }

    /// Token indices of each window, windows in row-major order and tokens
    /// row-major within a window.
    fn windows(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for wr in 0..self.rows / self.win_rows {
            for wc in 0..self.cols / self.win_cols {
                let mut idx = Vec::with_capacity(self.window_len());
                for r in 0..self.win_rows {
                    for c in 0..self.win_cols {
                        idx.push((wr * self.win_rows + r) * self.cols + wc * self.win_cols + c);
                    }
                }
                out.push(idx);
            }
        }
        out
    }
}

/// The tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    named: BTreeMap<String, Tensor>,
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    /// Gradient with respect to an arbitrary slot; `None` if it received no
    /// contribution.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.slots.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.named.iter()
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        self.push(t, Op::Param(name.into()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a length-`D` bias to every trailing-axis row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let d = *xv.shape().last().unwrap();
        if bv.len() != d {
            return Err(Error::shape(format!(
                "bias length {} does not match trailing extent {d}",
                bv.len()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `x · w + b` over the trailing axis of a rank-2 or rank-3 tensor.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().unwrap();
        let rows = self.value(x).len() / d;
        let flat = self.reshape(x, &[rows, d])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        let dout = self.value(y).shape()[1];
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = dout;
        self.reshape(y, &oshape)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Layer normalization over the trailing axis (rank 2 or 3 input).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let flat = xv.reshaped(&[xv.len() / d, d])?;
        let out = tensor::layernorm(&flat, self.value(gain), self.value(bias), eps)?
            .reshape(xv.shape())?;
        let (mean, rstd) = flat
            .data()
            .chunks(d)
            .map(|row| tensor::row_stats(row, eps))
            .unzip();
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = tensor::softmax(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: Padding) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(x).shape(),
            self.value(kernel).shape(),
            stride,
            pad,
        )?;
        let out = tensor::conv2d(self.value(x), self.value(kernel), stride, pad)?;
        Ok(self.push(out, Op::Conv2d { x, kernel, geom }))
    }

    /// Single-level Haar analysis of an even-extent field.
    pub fn dwt2(&mut self, x: Var) -> Result<Var> {
        let out = wavelet::analysis_even(self.value(x))?;
        Ok(self.push(out, Op::Dwt2(x)))
    }

    /// Single-level Haar synthesis back to a field of twice the extents.
    pub fn idwt2(&mut self, x: Var) -> Result<Var> {
        let out = wavelet::synthesis_even(self.value(x))?;
        Ok(self.push(out, Op::Idwt2(x)))
    }

    /// Windowed multi-head self-attention `softmax(QKᵀ/√d_head)V` over
    /// non-overlapping windows. `q`, `k`, `v` are `N×D` token matrices in
    /// row-major grid order.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: WindowLayout,
    ) -> Result<Var> {
        let (n, d) = self.value(q).rc()?;
        for t in [k, v] {
            if self.value(t).shape() != [n, d] {
                return Err(Error::shape("q, k, v must share shape"));
            }
        }
        if n != layout.rows * layout.cols {
            return Err(Error::shape("token count does not match attention grid"));
        }
        if d % layout.heads != 0 {
            return Err(Error::shape(format!(
                "width {d} not divisible by {} heads",
                layout.heads
            )));
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            &layout,
        );
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&refs)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `H×W×C → (H/p)×(W/p)×(p²C)`, row-major within a patch, channel fastest.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let out = patchify(self.value(x), p)?;
        Ok(self.push(out, Op::Patchify(x, p)))
    }

    pub fn unpatchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let out = unpatchify(self.value(x), p)?;
        Ok(self.push(out, Op::Unpatchify(x, p)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Euclidean norm over all entries (subgradient 0 at the origin).
    pub fn norm(&mut self, x: Var) -> Var {
        let s = self.value(x).norm_l2();
        self.push(Tensor::scalar(s), Op::Norm(x))
    }

    /// Replays the tape backwards from `output` with upstream gradient
    /// `seed` (defaults to 1 for scalar outputs).
    pub fn backward(&mut self, output: Var, seed: Option<Tensor>) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let out_shape = self.value(output).shape().to_vec();
        let seed = match seed {
            Some(s) => {
                if s.shape() != out_shape.as_slice() {
                    return Err(Error::shape("seed shape must match output shape"));
                }
                s
            }
            None => {
                if self.value(output).len() != 1 {
                    return Err(Error::shape("implicit seed requires a scalar output"));
                }
                Tensor::full(&out_shape, 1.0)
            }
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut named = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                named.insert(name.clone(), g);
            }
        }
        Ok(Gradients {
            named,
            slots: grads,
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.rc()?;
                let n = bv.shape()[1];
                let mut da = vec![0.0; m * k];
                tensor::matmul_nt_into(g.data(), bv.data(), &mut da, m, n, k);
                accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                let mut db = vec![0.0; k * n];
                tensor::matmul_tn_into(av.data(), g.data(), &mut db, k, m, n);
                accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
            }
            Op::AddBias(x, b) => {
                let d = self.value(*b).len();
                let mut db = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (s, &v) in db.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                accumulate(grads, *x, g.clone());
                let bshape = self.value(*b).shape().to_vec();
                accumulate(grads, *b, Tensor::from_parts(bshape, db));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Gelu(a) => {
                let dx = self
                    .value(*a)
                    .zip_map(g, |x, gv| gv * tensor::gelu_derivative(x))?;
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let d = gv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, (xrow, grow)) in xv.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    for k in 0..d {
                        xhat[k] = (xrow[k] - mu) * rs;
                        dxhat[k] = grow[k] * gv[k];
                        dgain[k] += grow[k] * xhat[k];
                        dbias[k] += grow[k];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for k in 0..d {
                        dx[r * d + k] = rs * (dxhat[k] - mean_dxhat - xhat[k] * mean_dxhat_xhat);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                let gshape = self.value(*gain).shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                accumulate(grads, *gain, Tensor::from_parts(gshape, dgain));
                accumulate(grads, *bias, Tensor::from_parts(bshape, dbias));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yrow, grow), drow) in y
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for k in 0..n {
                        drow[k] = yrow[k] * (grow[k] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Conv2d { x, kernel, geom } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let mut dx = vec![0.0; xv.len()];
                tensor::conv2d_grad_input(geom, g.data(), kv.data(), &mut dx);
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                let mut dk = vec![0.0; kv.len()];
                tensor::conv2d_grad_kernel(geom, g.data(), xv.data(), &mut dk);
                accumulate(grads, *kernel, Tensor::from_parts(kv.shape().to_vec(), dk));
            }
            // Orthonormal filter bank: the adjoint of analysis is synthesis.
            Op::Dwt2(x) => accumulate(grads, *x, wavelet::synthesis_even(g)?),
            Op::Idwt2(x) => accumulate(grads, *x, wavelet::analysis_even(g)?),
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (n, d) = self.value(*q).rc()?;
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    g.data(),
                    probs,
                    d,
                    layout,
                );
                accumulate(grads, *q, Tensor::from_parts(vec![n, d], dq));
                accumulate(grads, *k, Tensor::from_parts(vec![n, d], dk));
                accumulate(grads, *v, Tensor::from_parts(vec![n, d], dv));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).shape()[2];
                    accumulate(grads, p, g.channel_slice(start, c)?);
                    start += c;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, g.reshaped(&shape)?);
            }
            Op::Patchify(x, p) => accumulate(grads, *x, unpatchify(g, *p)?),
            Op::Unpatchify(x, p) => accumulate(grads, *x, patchify(g, *p)?),
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(&shape, g.data()[0]));
            }
            Op::Norm(x) => {
                let nrm = node.value.data()[0];
                let xv = self.value(*x);
                let dx = if nrm > 0.0 {
                    xv.scale(g.data()[0] / nrm)
                } else {
                    Tensor::zeros(xv.shape())
                };
                accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    layout: &WindowLayout,
) -> (Vec<f64>, Vec<f64>) {
    let heads = layout.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let wl = layout.window_len();
    let windows = layout.windows();
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; windows.len() * heads * wl * wl];
    for (w, idx) in windows.iter().enumerate() {
        for h in 0..heads {
            let off = h * dh;
            let pbase = (w * heads + h) * wl * wl;
            for (t, &qt) in idx.iter().enumerate() {
                let qrow = &q[qt * d + off..qt * d + off + dh];
                let prow = &mut probs[pbase + t * wl..pbase + (t + 1) * wl];
                for (s, &ks) in idx.iter().enumerate() {
                    let krow = &k[ks * d + off..ks * d + off + dh];
                    prow[s] = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                }
                tensor::softmax_in_place(prow);
                let orow = &mut out[qt * d + off..qt * d + off + dh];
                for (s, &vs) in idx.iter().enumerate() {
                    let p = prow[s];
                    let vrow = &v[vs * d + off..vs * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::type_complexity)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    probs: &[f64],
    d: usize,
    layout: &WindowLayout,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let heads = layout.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let wl = layout.window_len();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; wl];
    for (w, idx) in layout.windows().iter().enumerate() {
        for h in 0..heads {
            let off = h * dh;
            let pbase = (w * heads + h) * wl * wl;
            for (t, &qt) in idx.iter().enumerate() {
                let prow = &probs[pbase + t * wl..pbase + (t + 1) * wl];
                let grow = &g[qt * d + off..qt * d + off + dh];
                // dP[t,s] = g_t · v_s ; dV[s] += P[t,s] g_t
                for (s, &vs) in idx.iter().enumerate() {
                    let vrow = &v[vs * d + off..vs * d + off + dh];
                    ds[s] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    let dvrow = &mut dv[vs * d + off..vs * d + off + dh];
                    for (o, &gv) in dvrow.iter_mut().zip(grow) {
                        *o += prow[s] * gv;
                    }
                }
                let dot: f64 = prow.iter().zip(&ds).map(|(a, b)| a * b).sum();
                for s in 0..wl {
                    ds[s] = prow[s] * (ds[s] - dot) * scale;
                }
                let qrow = &q[qt * d + off..qt * d + off + dh];
                for (s, &ks) in idx.iter().enumerate() {
                    let coef = ds[s];
                    if coef == 0.0 {
                        continue;
                    }
                    let krow = &k[ks * d + off..ks * d + off + dh];
                    let dqrow = &mut dq[qt * d + off..qt * d + off + dh];
                    for (o, &kv) in dqrow.iter_mut().zip(krow) {
                        *o += coef * kv;
                    }
                    let dkrow = &mut dk[ks * d + off..ks * d + off + dh];
                    for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                        *o += coef * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Patch flattening `H×W×C → (H/p)×(W/p)×(p²C)`: within a patch, rows
/// outermost, then columns, channel fastest.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!(
            "grid {h}×{w} not divisible by patch size {p}"
        )));
    }
    let (hp, wp) = (h / p, w / p);
    let mut out = Vec::with_capacity(x.len());
    for i in 0..hp {
        for j in 0..wp {
            for a in 0..p {
                let row = i * p + a;
                let start = (row * w + j * p) * c;
                out.extend_from_slice(&x.data()[start..start + p * c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![hp, wp, p * p * c], out))
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (hp, wp, pc) = x.hwc()?;
    if p == 0 || pc % (p * p) != 0 {
        return Err(Error::shape(format!(
            "{pc} channels cannot be unpatchified with patch size {p}"
        )));
    }
    let c = pc / (p * p);
    let (h, w) = (hp * p, wp * p);
    let mut out = vec![0.0; x.len()];
    for i in 0..hp {
        for j in 0..wp {
            let src = &x.data()[(i * wp + j) * pc..(i * wp + j + 1) * pc];
            for a in 0..p {
                let row = i * p + a;
                let start = (row * w + j * p) * c;
                out[start..start + p * c].copy_from_slice(&src[a * p * c..(a + 1) * p * c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}
