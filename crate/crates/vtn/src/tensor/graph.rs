//! The operation tape: eager forward evaluation, single reverse sweep.

use std::rc::Rc;

use crate::rng;
use crate::scalar::{sc, Scalar};

use super::{Param, Tensor, TensorError};

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Recorded operation kinds. Attributes that are not graph values (masks,
/// ids, constants) are stored inline.
#[derive(Debug, Clone)]
pub enum Op<S> {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        c: S,
    },
    Relu {
        a: TensorId,
    },
    Sigmoid {
        a: TensorId,
    },
    Tanh {
        a: TensorId,
    },
    Abs {
        a: TensorId,
    },
    SoftmaxLast {
        a: TensorId,
        mask: Option<Rc<Vec<bool>>>,
    },
    LayerNorm {
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: S,
    },
    Conv1d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    Embed {
        table: TensorId,
        ids: Rc<Vec<usize>>,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        a: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Transpose {
        a: TensorId,
    },
    Reshape {
        a: TensorId,
    },
    Dropout {
        a: TensorId,
        mask: Vec<S>,
    },
    SumAll {
        a: TensorId,
    },
    MeanAll {
        a: TensorId,
    },
    BceWithLogits {
        logits: TensorId,
        labels: Rc<Vec<f64>>,
        pos_weight: f64,
    },
}

struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op<S>,
    param: Option<Param<S>>,
}

/// Append-only computation graph. Backward visits each node exactly once in
/// reverse append order; a node appended after the loss cannot influence it.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    strict: bool,
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += aip * brow[j];
            }
        }
    }
}

fn transpose_raw<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn softplus<S: Scalar>(x: S) -> S {
    // ln(1 + e^x) without overflow for large |x|.
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// How the rhs of an elementwise binary op maps onto the lhs.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Scalar,
    /// rhs shape is a suffix of lhs shape; it repeats along leading axes.
    Suffix,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            strict: true,
        }
    }

    /// Disable the NaN screen on incoming data.
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_finite(&self, op: &'static str, data: &[S]) -> Result<(), TensorError> {
        if self.strict && data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<S>,
        needs_grad: bool,
        op: Op<S>,
        param: Option<Param<S>>,
    ) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
            param,
        });
        id
    }

    /// Register an externally supplied value as a leaf.
    pub fn leaf(&mut self, t: Tensor<S>) -> Result<TensorId, TensorError> {
        self.check_finite("leaf", &t.data)?;
        Ok(self.push(t.shape, t.data, t.requires_grad, Op::Leaf, None))
    }

    /// Register a non-learnable value.
    pub fn constant(&mut self, t: Tensor<S>) -> Result<TensorId, TensorError> {
        self.check_finite("constant", &t.data)?;
        Ok(self.push(t.shape, t.data, false, Op::Leaf, None))
    }

    pub fn constant_from(
        &mut self,
        shape: Vec<usize>,
        data: Vec<S>,
    ) -> Result<TensorId, TensorError> {
        self.constant(Tensor::new(shape, data, false)?)
    }

    /// Register a shared parameter; its current value is snapshotted into the
    /// graph and gradients flow back into the parameter after backward.
    pub fn param(&mut self, p: &Param<S>) -> Result<TensorId, TensorError> {
        let (shape, data, rg) = {
            let t = p.value();
            (t.shape.clone(), t.data.clone(), t.requires_grad)
        };
        self.check_finite("param", &data)?;
        Ok(self.push(shape, data, rg, Op::Leaf, Some(p.clone())))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn scalar_value(&self, id: TensorId) -> S {
        self.nodes[id.0].data[0]
    }

    pub fn value_tensor(&self, id: TensorId) -> Tensor<S> {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn rows_cols(&self, op: &'static str, id: TensorId) -> Result<(usize, usize), TensorError> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op,
                shape: s.clone(),
                reason: "expected a 2-d tensor".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ---- elementwise binary ---------------------------------------------

    fn broadcast_kind(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<Broadcast, TensorError> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if self.nodes[b.0].data.len() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == sb[..] {
            return Ok(Broadcast::Suffix);
        }
        Err(TensorError::ShapeMismatch {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(S, S) -> S,
        make: impl Fn(TensorId, TensorId) -> Op<S>,
    ) -> Result<TensorId, TensorError> {
        let bc = self.broadcast_kind(op_name, a, b)?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let data: Vec<S> = match bc {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => {
                let y = db[0];
                da.iter().map(|&x| f(x, y)).collect()
            }
            Broadcast::Suffix => {
                let n = db.len();
                da.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, db[i % n]))
                    .collect()
            }
        };
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, needs, make(a, b), None))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> Result<TensorId, TensorError> {
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let needs = self.nodes[a.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, needs, Op::Scale { a, c }, None))
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(
        &mut self,
        a: TensorId,
        f: impl Fn(S) -> S,
        op: Op<S>,
    ) -> Result<TensorId, TensorError> {
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let needs = self.nodes[a.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, needs, op, None))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.unary(a, |x| if x > S::zero() { x } else { S::zero() }, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.unary(a, stable_sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.unary(a, |x| x.tanh(), Op::Tanh { a })
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.unary(a, |x| x.abs(), Op::Abs { a })
    }

    // ---- structural ------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.rows_cols("matmul", a)?;
        let (kb, n) = self.rows_cols("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = vec![S::zero(); m * n];
        matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut data);
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(vec![m, n], data, needs, Op::MatMul { a, b }, None))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.rows_cols("transpose", a)?;
        let data = transpose_raw(&self.nodes[a.0].data, r, c);
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![c, r], data, needs, Op::Transpose { a }, None))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("incompatible with {} elements", self.nodes[a.0].data.len()),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(shape, data, needs, Op::Reshape { a }, None))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::InvalidAttr {
                op: "concat",
                reason: "needs at least one part and axis in {0,1}".into(),
            });
        }
        let (r0, c0) = self.rows_cols("concat", parts[0])?;
        let mut rows = r0;
        let mut cols = c0;
        for &p in &parts[1..] {
            let (r, c) = self.rows_cols("concat", p)?;
            if axis == 0 {
                if c != c0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                cols += c;
            }
        }
        let mut data = vec![S::zero(); rows * cols];
        if axis == 0 {
            let mut off = 0;
            for &p in parts {
                let d = &self.nodes[p.0].data;
                data[off..off + d.len()].copy_from_slice(d);
                off += d.len();
            }
        } else {
            let mut col_off = 0;
            for &p in parts {
                let (r, c) = (self.nodes[p.0].shape[0], self.nodes[p.0].shape[1]);
                let d = &self.nodes[p.0].data;
                for i in 0..r {
                    data[i * cols + col_off..i * cols + col_off + c]
                        .copy_from_slice(&d[i * c..(i + 1) * c]);
                }
                col_off += c;
            }
        }
        let needs = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(
            vec![rows, cols],
            data,
            needs,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            None,
        ))
    }

    pub fn slice(
        &mut self,
        a: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.rows_cols("slice", a)?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(TensorError::InvalidAttr {
                op: "slice",
                reason: format!("range {start}..{} out of extent {extent}", start + len),
            });
        }
        let d = &self.nodes[a.0].data;
        let (shape, data) = if axis == 0 {
            (vec![len, c], d[start * c..(start + len) * c].to_vec())
        } else {
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&d[i * c + start..i * c + start + len]);
            }
            (vec![r, len], out)
        };
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(shape, data, needs, Op::Slice { a, axis, start, len }, None))
    }

    // ---- neural-net specific ---------------------------------------------

    /// Softmax along the last axis. `mask`, when given, marks the positions
    /// allowed to receive probability; disallowed entries come out exactly 0.
    pub fn softmax_last(
        &mut self,
        a: TensorId,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let cols = *shape.last().unwrap();
        let rows = self.nodes[a.0].data.len() / cols;
        if let Some(m) = &mask {
            if m.len() != self.nodes[a.0].data.len() {
                return Err(TensorError::InvalidAttr {
                    op: "softmax",
                    reason: format!("mask length {} vs {} values", m.len(), rows * cols),
                });
            }
        }
        let d = &self.nodes[a.0].data;
        let mut data = vec![S::zero(); d.len()];
        for i in 0..rows {
            let row = &d[i * cols..(i + 1) * cols];
            let allowed = |j: usize| mask.as_ref().map_or(true, |m| m[i * cols + j]);
            let mut maxv = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > maxv {
                    maxv = v;
                }
            }
            if maxv == S::neg_infinity() {
                return Err(TensorError::InvalidAttr {
                    op: "softmax",
                    reason: format!("row {i} has no unmasked positions"),
                });
            }
            let mut sum = S::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - maxv).exp();
                    data[i * cols + j] = e;
                    sum += e;
                }
            }
            for j in 0..cols {
                if allowed(j) {
                    data[i * cols + j] /= sum;
                }
            }
        }
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(shape, data, needs, Op::SoftmaxLast { a, mask }, None))
    }

    /// Layer normalization over the last axis with affine scale and shift.
    pub fn layernorm(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: S,
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[a.0].shape.clone();
        let d = *shape.last().unwrap();
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[t.0].data.len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" {
                        "layernorm gamma"
                    } else {
                        "layernorm beta"
                    },
                    lhs: shape.clone(),
                    rhs: self.nodes[t.0].shape.clone(),
                });
            }
        }
        let rows = self.nodes[a.0].data.len() / d;
        let x = &self.nodes[a.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let inv_d = S::one() / sc::<S>(d as f64);
        let mut data = vec![S::zero(); x.len()];
        for i in 0..rows {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let inv_std = S::one() / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let needs = self.nodes[a.0].needs_grad
            || self.nodes[gamma.0].needs_grad
            || self.nodes[beta.0].needs_grad;
        Ok(self.push(shape, data, needs, Op::LayerNorm { a, gamma, beta, eps }, None))
    }

    /// 1-d convolution over the time axis with zero same-padding.
    /// `x`: [T, c_in], `w`: [c_out, c_in, k] (k odd), `b`: [c_out].
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (t, c_in) = self.rows_cols("conv1d", x)?;
        let ws = self.nodes[w.0].shape.clone();
        if ws.len() != 3 || ws[1] != c_in || ws[2] % 2 == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: vec![t, c_in],
                rhs: ws,
            });
        }
        let (c_out, k) = (ws[0], ws[2]);
        if self.nodes[b.0].data.len() != c_out {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d bias",
                lhs: ws,
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let pad = (k - 1) / 2;
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut data = vec![S::zero(); t * c_out];
        for ti in 0..t {
            for o in 0..c_out {
                let mut acc = bd[o];
                for ki in 0..k {
                    let src = ti + ki;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    let src = src - pad;
                    let xrow = &xd[src * c_in..(src + 1) * c_in];
                    let wrow = &wd[o * c_in * k + ki..];
                    for c in 0..c_in {
                        acc += xrow[c] * wrow[c * k];
                    }
                }
                data[ti * c_out + o] = acc;
            }
        }
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        Ok(self.push(vec![t, c_out], data, needs, Op::Conv1d { x, w, b }, None))
    }

    /// Row lookup: `table` [vocab, d], output [ids.len(), d].
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let (vocab, d) = self.rows_cols("embed", table)?;
        if ids.is_empty() {
            return Err(TensorError::InvalidAttr {
                op: "embed",
                reason: "empty id sequence".into(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::OutOfVocab { id, vocab });
            }
            data.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        let needs = self.nodes[table.0].needs_grad;
        Ok(self.push(
            vec![ids.len(), d],
            data,
            needs,
            Op::Embed {
                table,
                ids: Rc::new(ids.to_vec()),
            },
            None,
        ))
    }

    /// Inverted dropout with a counter-based mask: the mask for element
    /// `(row, col)` depends only on `(key, row_offset + row, col)`, so the
    /// same coordinates always draw the same mask regardless of batch layout.
    pub fn dropout(
        &mut self,
        a: TensorId,
        rate: f64,
        key: u64,
        row_offset: usize,
    ) -> Result<TensorId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidAttr {
                op: "dropout",
                reason: format!("rate {rate} outside [0,1)"),
            });
        }
        let (_, cols) = self.rows_cols("dropout", a)?;
        let keep_scale = sc::<S>(1.0 / (1.0 - rate));
        let n = self.nodes[a.0].data.len();
        let mut mask = Vec::with_capacity(n);
        for i in 0..n {
            let (r, c) = (i / cols, i % cols);
            let coord = (((row_offset + r) as u64) << 32) | c as u64;
            let u = rng::counter_unit(key, coord);
            mask.push(if u >= rate { keep_scale } else { S::zero() });
        }
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let needs = self.nodes[a.0].needs_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, needs, Op::Dropout { a, mask }, None))
    }

    // ---- reductions and losses --------------------------------------------

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s: S = self.nodes[a.0].data.iter().copied().sum();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![1], vec![s], needs, Op::SumAll { a }, None))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let n = self.nodes[a.0].data.len();
        let s: S = self.nodes[a.0].data.iter().copied().sum();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(
            vec![1],
            vec![s / sc::<S>(n as f64)],
            needs,
            Op::MeanAll { a },
            None,
        ))
    }

    /// Numerically stable per-element weighted binary cross-entropy on
    /// logits; `pos_weight` multiplies the positive-class term.
    pub fn bce_with_logits(
        &mut self,
        logits: TensorId,
        labels: &[f64],
        pos_weight: f64,
    ) -> Result<TensorId, TensorError> {
        if labels.len() != self.nodes[logits.0].data.len() {
            return Err(TensorError::InvalidAttr {
                op: "bce_with_logits",
                reason: format!(
                    "{} labels vs {} logits",
                    labels.len(),
                    self.nodes[logits.0].data.len()
                ),
            });
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::InvalidAttr {
                op: "bce_with_logits",
                reason: "labels must be 0 or 1".into(),
            });
        }
        if pos_weight <= 0.0 {
            return Err(TensorError::InvalidAttr {
                op: "bce_with_logits",
                reason: format!("pos_weight {pos_weight} must be positive"),
            });
        }
        let w = sc::<S>(pos_weight);
        let data: Vec<S> = self.nodes[logits.0]
            .data
            .iter()
            .zip(labels)
            .map(|(&z, &y)| {
                let y = sc::<S>(y);
                w * y * softplus(-z) + (S::one() - y) * softplus(z)
            })
            .collect();
        let needs = self.nodes[logits.0].needs_grad;
        let shape = self.nodes[logits.0].shape.clone();
        Ok(self.push(
            shape,
            data,
            needs,
            Op::BceWithLogits {
                logits,
                labels: Rc::new(labels.to_vec()),
                pos_weight,
            },
            None,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of `requires_grad` leaves
    /// accumulate into their backing [`Param`]s (when bound).
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.step_back(i);
        }
        for node in &self.nodes {
            if let (Some(p), Some(g), true) = (&node.param, &node.grad, node.needs_grad) {
                p.value_mut().accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn take_grad(&self, i: usize) -> Vec<S> {
        self.nodes[i].grad.clone().unwrap()
    }

    fn accumulate(&mut self, id: TensorId, delta: &[S]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].data.len();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![S::zero(); n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    fn accumulate_binary(&mut self, a: TensorId, b: TensorId, ga: Vec<S>, gb_full: Vec<S>) {
        self.accumulate(a, &ga);
        if !self.nodes[b.0].needs_grad {
            return;
        }
        // Reduce the rhs gradient over broadcast axes.
        let nb = self.nodes[b.0].data.len();
        if gb_full.len() == nb {
            self.accumulate(b, &gb_full);
        } else {
            let mut gb = vec![S::zero(); nb];
            if nb == 1 {
                gb[0] = gb_full.iter().copied().sum();
            } else {
                for (i, g) in gb_full.iter().enumerate() {
                    gb[i % nb] += *g;
                }
            }
            self.accumulate(b, &gb);
        }
    }

    fn step_back(&mut self, i: usize) {
        let grad = self.take_grad(i);
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].needs_grad {
                    let bt = transpose_raw(&self.nodes[b.0].data, k, n);
                    let mut da = vec![S::zero(); m * k];
                    matmul_raw(&grad, &bt, m, n, k, &mut da);
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let at = transpose_raw(&self.nodes[a.0].data, m, k);
                    let mut db = vec![S::zero(); k * n];
                    matmul_raw(&at, &grad, k, m, n, &mut db);
                    self.accumulate(b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate_binary(a, b, grad.clone(), grad);
            }
            Op::Sub { a, b } => {
                let neg: Vec<S> = grad.iter().map(|&g| -g).collect();
                self.accumulate_binary(a, b, grad, neg);
            }
            Op::Mul { a, b } => {
                let na = self.nodes[a.0].data.len();
                let nb = self.nodes[b.0].data.len();
                let ga: Vec<S> = (0..na)
                    .map(|j| grad[j] * self.nodes[b.0].data[if nb == 1 { 0 } else { j % nb }])
                    .collect();
                let gb_full: Vec<S> = (0..na)
                    .map(|j| grad[j] * self.nodes[a.0].data[j])
                    .collect();
                self.accumulate_binary(a, b, ga, gb_full);
            }
            Op::Scale { a, c } => {
                let da: Vec<S> = grad.iter().map(|&g| g * c).collect();
                self.accumulate(a, &da);
            }
            Op::Relu { a } => {
                let da: Vec<S> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<S> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&g, &s)| g * s * (S::one() - s))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Tanh { a } => {
                let da: Vec<S> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&g, &t)| g * (S::one() - t * t))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Abs { a } => {
                let da: Vec<S> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&g, &x)| {
                        if x > S::zero() {
                            g
                        } else if x < S::zero() {
                            -g
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::SoftmaxLast { a, mask } => {
                let cols = *self.nodes[i].shape.last().unwrap();
                let rows = self.nodes[i].data.len() / cols;
                let s = &self.nodes[i].data;
                let mut da = vec![S::zero(); s.len()];
                for r in 0..rows {
                    let allowed = |j: usize| mask.as_ref().map_or(true, |m| m[r * cols + j]);
                    let mut dot = S::zero();
                    for j in 0..cols {
                        if allowed(j) {
                            dot += grad[r * cols + j] * s[r * cols + j];
                        }
                    }
                    for j in 0..cols {
                        if allowed(j) {
                            da[r * cols + j] = s[r * cols + j] * (grad[r * cols + j] - dot);
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let d = *self.nodes[i].shape.last().unwrap();
                let rows = self.nodes[i].data.len() / d;
                let x = self.nodes[a.0].data.clone();
                let g = self.nodes[gamma.0].data.clone();
                let inv_d = S::one() / sc::<S>(d as f64);
                let mut dx = vec![S::zero(); x.len()];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                for r in 0..rows {
                    let row = &x[r * d..(r + 1) * d];
                    let gr = &grad[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<S>() * inv_d;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
                    let inv_std = S::one() / (var + eps).sqrt();
                    let xhat: Vec<S> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for j in 0..d {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * g[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * g[j];
                        dx[r * d + j] =
                            inv_std * (dxh - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat);
                    }
                }
                self.accumulate(a, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::Conv1d { x, w, b } => {
                let (t, c_in) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let ws = &self.nodes[w.0].shape;
                let (c_out, k) = (ws[0], ws[2]);
                let pad = (k - 1) / 2;
                let xd = self.nodes[x.0].data.clone();
                let wd = self.nodes[w.0].data.clone();
                let mut dx = vec![S::zero(); t * c_in];
                let mut dw = vec![S::zero(); c_out * c_in * k];
                let mut db = vec![S::zero(); c_out];
                for ti in 0..t {
                    for o in 0..c_out {
                        let go = grad[ti * c_out + o];
                        db[o] += go;
                        for ki in 0..k {
                            let src = ti + ki;
                            if src < pad || src - pad >= t {
                                continue;
                            }
                            let src = src - pad;
                            for c in 0..c_in {
                                dx[src * c_in + c] += go * wd[o * c_in * k + c * k + ki];
                                dw[o * c_in * k + c * k + ki] += go * xd[src * c_in + c];
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                self.accumulate(b, &db);
            }
            Op::Embed { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                let mut dt = vec![S::zero(); self.nodes[table.0].data.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += grad[row * d + j];
                    }
                }
                self.accumulate(table, &dt);
            }
            Op::Concat { parts, axis } => {
                let cols = self.nodes[i].shape[1];
                if axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].data.len();
                        let slice = grad[off..off + n].to_vec();
                        self.accumulate(p, &slice);
                        off += n;
                    }
                } else {
                    let rows = self.nodes[i].shape[0];
                    let mut col_off = 0;
                    for p in parts {
                        let c = self.nodes[p.0].shape[1];
                        let mut dp = vec![S::zero(); rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c].copy_from_slice(
                                &grad[r * cols + col_off..r * cols + col_off + c],
                            );
                        }
                        self.accumulate(p, &dp);
                        col_off += c;
                    }
                }
            }
            Op::Slice { a, axis, start, len } => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let mut da = vec![S::zero(); r * c];
                if axis == 0 {
                    da[start * c..(start + len) * c].copy_from_slice(&grad);
                } else {
                    for ri in 0..r {
                        da[ri * c + start..ri * c + start + len]
                            .copy_from_slice(&grad[ri * len..(ri + 1) * len]);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Transpose { a } => {
                let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let da = transpose_raw(&grad, r, c);
                self.accumulate(a, &da);
            }
            Op::Reshape { a } => {
                self.accumulate(a, &grad);
            }
            Op::Dropout { a, mask } => {
                let da: Vec<S> = grad.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(a, &da);
            }
            Op::SumAll { a } => {
                let da = vec![grad[0]; self.nodes[a.0].data.len()];
                self.accumulate(a, &da);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].data.len();
                let g = grad[0] / sc::<S>(n as f64);
                let da = vec![g; n];
                self.accumulate(a, &da);
            }
            Op::BceWithLogits {
                logits,
                labels,
                pos_weight,
            } => {
                let w = sc::<S>(pos_weight);
                let da: Vec<S> = self.nodes[logits.0]
                    .data
                    .iter()
                    .zip(labels.iter())
                    .zip(&grad)
                    .map(|((&z, &y), &g)| {
                        let y = sc::<S>(y);
                        g * ((S::one() - y) * stable_sigmoid(z) - w * y * stable_sigmoid(-z))
                    })
                    .collect();
                self.accumulate(logits, &da);
            }
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}
