// SPDX-License-Identifier: Apache-2.0

//! Wengert tape: operations are recorded during the forward pass and
//! replayed in reverse to accumulate gradients.
//!
//! Every primitive stores whatever it needs for its backward rule at record
//! time. `backward` never touches the recorded values, so it can be called
//! several times on the same tape (once per output of interest) and each call
//! gets fresh gradient buffers.

use std::cell::RefCell;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{KneError, Result};

const RMS_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul {
        a: usize,
        b: usize,
        b_transposed: bool,
    },
    Add {
        a: usize,
        b: usize,
        broadcast_row: bool,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Softmax {
        a: usize,
    },
    Log {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Silu {
        a: usize,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<f64>,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    ScatterRows {
        src: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Sum {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        segments: Vec<usize>,
        probs: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Result of a backward pass: one gradient slot per tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not influence the output.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        self.push_shared(Arc::new(value), op, inputs)
    }

    fn push_shared(&self, value: Arc<Tensor>, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|&i| nodes[i].needs_grad),
        };
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, v: Var<'_>) -> Arc<Tensor> {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, &[])
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, &[])
    }

    /// A constant that shares storage with the caller (no copy).
    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_shared(value, Op::Constant, &[])
    }

    pub fn matmul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`; the natural product for weights stored as `out × in`.
    pub fn matmul_nt<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl<'t>(&'t self, a: Var<'t>, b: Var<'t>, b_transposed: bool) -> Result<Var<'t>> {
        let (av, bv) = (self.val(a), self.val(b));
        let (m, k) = av.matrix_dims("matmul")?;
        let (br, bc) = bv.matrix_dims("matmul")?;
        let (bk, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(KneError::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            false,
            bv.data(),
            b_transposed,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.id,
                b: b.id,
                b_transposed,
            },
            &[a.id, b.id],
        ))
    }

    /// Elementwise sum. `b` may also be a row vector (`[c]` or `[1, c]`)
    /// broadcast over the rows of a `[r, c]` matrix `a`.
    pub fn add<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.val(a), self.val(b));
        let broadcast_row = if av.shape() == bv.shape() {
            false
        } else {
            match (av.shape(), bv.shape()) {
                ([_, c], [n]) | ([_, c], [1, n]) if c == n => true,
                _ => return Err(KneError::shape("add", av.shape(), bv.shape())),
            }
        };
        let mut out = (*av).clone();
        if broadcast_row {
            let c = av.cols();
            for row in out.data_mut().chunks_mut(c) {
                for (x, y) in row.iter_mut().zip(bv.data()) {
                    *x += y;
                }
            }
        } else {
            out.add_assign(&bv);
        }
        Ok(self.push(
            out,
            Op::Add {
                a: a.id,
                b: b.id,
                broadcast_row,
            },
            &[a.id, b.id],
        ))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(KneError::shape("mul", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a: a.id, b: b.id }, &[a.id, b.id]))
    }

    pub fn scale<'t>(&'t self, a: Var<'t>, c: f64) -> Var<'t> {
        let value = self.val(a).scaled(c);
        self.push(value, Op::Scale { a: a.id, c }, &[a.id])
    }

    /// Softmax along the last axis.
    pub fn softmax<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        let av = self.val(a);
        let (_, c) = av
            .dims2()
            .ok_or_else(|| KneError::shape("softmax", av.shape(), &[0, 0]))?;
        let mut out = (*av).clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        Ok(self.push(out, Op::Softmax { a: a.id }, &[a.id]))
    }

    pub fn log<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        let av = self.val(a);
        if let Some(bad) = av.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(KneError::Domain {
                op: "log",
                msg: format!("input {bad} is not positive"),
            });
        }
        let out = av.map(f64::ln);
        Ok(self.push(out, Op::Log { a: a.id }, &[a.id]))
    }

    pub fn exp<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        let out = self.val(a).map(f64::exp);
        self.push(out, Op::Exp { a: a.id }, &[a.id])
    }

    /// `x · σ(x)`.
    pub fn silu<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        let out = self.val(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu { a: a.id }, &[a.id])
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm<'t>(&'t self, x: Var<'t>, gain: Var<'t>) -> Result<Var<'t>> {
        let (xv, gv) = (self.val(x), self.val(gain));
        let (r, c) = xv
            .dims2()
            .ok_or_else(|| KneError::shape("rms_norm", xv.shape(), gv.shape()))?;
        if gv.numel() != c || gv.shape().len() > 1 {
            return Err(KneError::shape("rms_norm", xv.shape(), gv.shape()));
        }
        let mut out = (*xv).clone();
        let mut inv_rms = Vec::with_capacity(r);
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            for (v, g) in row.iter_mut().zip(gv.data()) {
                *v *= inv * g;
            }
            inv_rms.push(inv);
        }
        Ok(self.push(
            out,
            Op::RmsNorm {
                x: x.id,
                gain: gain.id,
                inv_rms,
            },
            &[x.id, gain.id],
        ))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let tv = self.val(table);
        let (rows, cols) = tv.matrix_dims("gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(KneError::Domain {
                    op: "gather_rows",
                    msg: format!("row index {i} out of range for {rows} rows"),
                });
            }
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table: table.id,
                ids: ids.to_vec(),
            },
            &[table.id],
        ))
    }

    /// Places row `i` of `src` at row `ids[i]` of a zero `[rows, cols]` matrix.
    /// `ids` must be distinct.
    pub fn scatter_rows<'t>(&'t self, src: Var<'t>, ids: &[usize], rows: usize) -> Result<Var<'t>> {
        let sv = self.val(src);
        let (n, cols) = sv.matrix_dims("scatter_rows")?;
        if n != ids.len() {
            return Err(KneError::shape("scatter_rows", sv.shape(), &[ids.len()]));
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut seen = vec![false; rows];
        for (r, &i) in ids.iter().enumerate() {
            if i >= rows || seen[i] {
                return Err(KneError::Domain {
                    op: "scatter_rows",
                    msg: format!("row index {i} is out of range for {rows} rows or repeated"),
                });
            }
            seen[i] = true;
            out.row_mut(i).copy_from_slice(sv.row(r));
        }
        Ok(self.push(
            out,
            Op::ScatterRows {
                src: src.id,
                ids: ids.to_vec(),
            },
            &[src.id],
        ))
    }

    /// Concatenation of matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| self.val(*p)).collect();
        let first = vals
            .first()
            .ok_or_else(|| KneError::Config("concat of zero tensors".into()))?;
        let (r0, c0) = first.matrix_dims("concat")?;
        let value = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for v in &vals {
                    let (r, c) = v.matrix_dims("concat")?;
                    if c != c0 {
                        return Err(KneError::shape("concat", first.shape(), v.shape()));
                    }
                    rows += r;
                    data.extend_from_slice(v.data());
                }
                Tensor::new(vec![rows, c0], data)?
            }
            1 => {
                let mut cols = 0;
                for v in &vals {
                    let (r, c) = v.matrix_dims("concat")?;
                    if r != r0 {
                        return Err(KneError::shape("concat", first.shape(), v.shape()));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for v in &vals {
                        data.extend_from_slice(v.row(i));
                    }
                }
                Tensor::new(vec![r0, cols], data)?
            }
            _ => {
                return Err(KneError::Domain {
                    op: "concat",
                    msg: format!("axis {axis} not supported"),
                })
            }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(
            value,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) `start..end` of a matrix.
    pub fn slice<'t>(
        &'t self,
        a: Var<'t>,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Var<'t>> {
        let av = self.val(a);
        let (r, c) = av.matrix_dims("slice")?;
        let limit = match axis {
            0 => r,
            1 => c,
            _ => {
                return Err(KneError::Domain {
                    op: "slice",
                    msg: format!("axis {axis} not supported"),
                })
            }
        };
        if start > end || end > limit {
            return Err(KneError::Domain {
                op: "slice",
                msg: format!("range {start}..{end} out of bounds for axis of length {limit}"),
            });
        }
        let value = if axis == 0 {
            Tensor::new(vec![end - start, c], av.data()[start * c..end * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                data.extend_from_slice(&av.row(i)[start..end]);
            }
            Tensor::new(vec![r, end - start], data)?
        };
        Ok(self.push(
            value,
            Op::Slice {
                a: a.id,
                axis,
                start,
            },
            &[a.id],
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum<'t>(&'t self, a: Var<'t>) -> Var<'t> {
        let value = Tensor::scalar(self.val(a).sum());
        self.push(value, Op::Sum { a: a.id }, &[a.id])
    }

    /// Per-row negative log-likelihood `logsumexp(logits_i) - logits_i[target_i]`.
    pub fn cross_entropy<'t>(&'t self, logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
        let lv = self.val(logits);
        let (n, vocab) = lv.matrix_dims("cross_entropy")?;
        if targets.len() != n {
            return Err(KneError::shape(
                "cross_entropy",
                lv.shape(),
                &[targets.len()],
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut losses = Vec::with_capacity(n);
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            if t >= vocab {
                return Err(KneError::Domain {
                    op: "cross_entropy",
                    msg: format!("target {t} out of range for {vocab} classes"),
                });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            losses.push(lse - row[t]);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let value = Tensor::new(vec![n], losses)?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                probs,
            },
            &[logits.id],
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N, d]` with the rows of consecutive sequences
    /// stacked; `segments` lists the sequence lengths (summing to `N`).
    /// Attention never crosses a segment boundary.
    pub fn causal_attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        heads: usize,
        segments: &[usize],
    ) -> Result<Var<'t>> {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let (n, d) = qv.matrix_dims("causal_attention")?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(KneError::shape("causal_attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 || segments.iter().sum::<usize>() != n {
            return Err(KneError::Domain {
                op: "causal_attention",
                msg: format!(
                    "d={d}, heads={heads}, segments sum to {} for {n} rows",
                    segments.iter().sum::<usize>()
                ),
            });
        }
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut start = 0;
        for &len in segments {
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &qd[(start + i) * d + off..(start + i) * d + off + dh];
                    let row = &mut p[i * len..i * len + i + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kd[(start + j) * d + off..(start + j) * d + off + dh];
                        *s = dot(qi, kj) * inv_sqrt;
                    }
                    softmax_in_place(row);
                    let oi = &mut out[(start + i) * d + off..(start + i) * d + off + dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vd[(start + j) * d + off..(start + j) * d + off + dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
                probs.push(p);
            }
            start += len;
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            value,
            Op::CausalAttention {
                q: q.id,
                k: k.id,
                v: v.id,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            &[q.id, k.id, v.id],
        ))
    }

    /// Reverse pass from a single-element `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape().to_vec();
        if nodes[output.id].value.numel() != 1 {
            return Err(KneError::NotScalar(out_shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::ones(&out_shape));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut send = |target: usize, grad: Tensor| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            };
            let wants = |i: usize| nodes[i].needs_grad;
            let value = &node.value;
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::MatMul { a, b, b_transposed } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = (av.rows(), av.cols());
                    let n = value.cols();
                    if wants(*a) {
                        let mut da = vec![0.0; m * k];
                        // dA = G·Bᵀ, or G·B when the forward used Bᵀ.
                        gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            false,
                            bv.data(),
                            !*b_transposed,
                            &mut da,
                            false,
                        );
                        send(*a, Tensor::new(av.shape().to_vec(), da)?);
                    }
                    if wants(*b) {
                        let mut db = vec![0.0; k * n];
                        if *b_transposed {
                            gemm(n, m, k, g.data(), true, av.data(), false, &mut db, false);
                        } else {
                            gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                        }
                        send(*b, Tensor::new(bv.shape().to_vec(), db)?);
                    }
                }
                Op::Add {
                    a,
                    b,
                    broadcast_row,
                } => {
                    if wants(*b) {
                        let bshape = nodes[*b].value.shape().to_vec();
                        if *broadcast_row {
                            let c = g.cols();
                            let mut db = vec![0.0; c];
                            for row in g.data().chunks(c) {
                                for (acc, x) in db.iter_mut().zip(row) {
                                    *acc += x;
                                }
                            }
                            send(*b, Tensor::new(bshape, db)?);
                        } else {
                            send(*b, g.clone());
                        }
                    }
                    if wants(*a) {
                        send(*a, g);
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if wants(*a) {
                        let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                        send(*a, Tensor::new(g.shape().to_vec(), d)?);
                    }
                    if wants(*b) {
                        let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                        send(*b, Tensor::new(g.shape().to_vec(), d)?);
                    }
                }
                Op::Scale { a, c } => send(*a, g.scaled(*c)),
                Op::Softmax { a } => {
                    let c = value.cols().max(1);
                    let mut d = g.into_data();
                    for (drow, yrow) in d.chunks_mut(c).zip(value.data().chunks(c)) {
                        let inner = dot(drow, yrow);
                        for (dx, y) in drow.iter_mut().zip(yrow) {
                            *dx = y * (*dx - inner);
                        }
                    }
                    send(*a, Tensor::new(value.shape().to_vec(), d)?);
                }
                Op::Log { a } => {
                    let av = &nodes[*a].value;
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x / y).collect();
                    send(*a, Tensor::new(av.shape().to_vec(), d)?);
                }
                Op::Exp { a } => {
                    let d = g
                        .data()
                        .iter()
                        .zip(value.data())
                        .map(|(x, y)| x * y)
                        .collect();
                    send(*a, Tensor::new(value.shape().to_vec(), d)?);
                }
                Op::Silu { a } => {
                    let av = &nodes[*a].value;
                    let d = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(gx, &x)| {
                            let s = sigmoid(x);
                            gx * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    send(*a, Tensor::new(av.shape().to_vec(), d)?);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (xv, gv) = (&nodes[*x].value, &nodes[*gain].value);
                    let c = xv.cols().max(1);
                    let mut dx = vec![0.0; xv.numel()];
                    let mut dgain = vec![0.0; gv.numel()];
                    for (r, ((xrow, grow), dxrow)) in xv
                        .data()
                        .chunks(c)
                        .zip(g.data().chunks(c))
                        .zip(dx.chunks_mut(c))
                        .enumerate()
                    {
                        let inv = inv_rms[r];
                        let mut mean_dot = 0.0;
                        for j in 0..c {
                            let xhat = xrow[j] * inv;
                            dgain[j] += grow[j] * xhat;
                            mean_dot += grow[j] * gv.data()[j] * xhat;
                        }
                        mean_dot /= c as f64;
                        for j in 0..c {
                            let xhat = xrow[j] * inv;
                            dxrow[j] = inv * (grow[j] * gv.data()[j] - xhat * mean_dot);
                        }
                    }
                    if wants(*x) {
                        send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                    }
                    if wants(*gain) {
                        send(*gain, Tensor::new(gv.shape().to_vec(), dgain)?);
                    }
                }
                Op::GatherRows { table, ids } => {
                    let tv = &nodes[*table].value;
                    let mut dt = Tensor::zeros(tv.shape());
                    for (r, &i) in ids.iter().enumerate() {
                        for (acc, x) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    send(*table, dt);
                }
                Op::ScatterRows { src, ids } => {
                    let sv = &nodes[*src].value;
                    let mut ds = Vec::with_capacity(sv.numel());
                    for &i in ids {
                        ds.extend_from_slice(g.row(i));
                    }
                    send(*src, Tensor::new(sv.shape().to_vec(), ds)?);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = &nodes[p].value;
                        let (r, c) = (pv.rows(), pv.cols());
                        let piece = if *axis == 0 {
                            let gc = g.cols();
                            g.data()[offset * gc..(offset + r) * gc].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(r * c);
                            for i in 0..r {
                                d.extend_from_slice(&g.row(i)[offset..offset + c]);
                            }
                            d
                        };
                        offset += if *axis == 0 { r } else { c };
                        send(p, Tensor::new(pv.shape().to_vec(), piece)?);
                    }
                }
                Op::Slice { a, axis, start } => {
                    let av = &nodes[*a].value;
                    let mut da = Tensor::zeros(av.shape());
                    if *axis == 0 {
                        let c = av.cols();
                        da.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    } else {
                        let w = g.cols();
                        for i in 0..av.rows() {
                            da.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                        }
                    }
                    send(*a, da);
                }
                Op::Sum { a } => {
                    let shape = nodes[*a].value.shape().to_vec();
                    send(*a, Tensor::full(&shape, g.item()));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let lv = &nodes[*logits].value;
                    let vocab = lv.cols();
                    let mut d = probs.clone();
                    for (r, (row, &t)) in d.chunks_mut(vocab).zip(targets).enumerate() {
                        row[t] -= 1.0;
                        let gr = g.data()[r];
                        row.iter_mut().for_each(|x| *x *= gr);
                    }
                    send(*logits, Tensor::new(lv.shape().to_vec(), d)?);
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    heads,
                    segments,
                    probs,
                } => {
                    let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                    let (n, d) = (qv.rows(), qv.cols());
                    let dh = d / heads;
                    let inv_sqrt = 1.0 / (dh as f64).sqrt();
                    let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
                    let mut dq = vec![0.0; n * d];
                    let mut dk = vec![0.0; n * d];
                    let mut dv = vec![0.0; n * d];
                    let mut start = 0;
                    let mut pi = 0;
                    for &len in segments {
                        for h in 0..*heads {
                            let off = h * dh;
                            let p = &probs[pi];
                            pi += 1;
                            let at = |r: usize| (start + r) * d + off;
                            let mut ds = vec![0.0; len];
                            for i in 0..len {
                                let go = &gd[at(i)..at(i) + dh];
                                let prow = &p[i * len..i * len + i + 1];
                                for j in 0..=i {
                                    ds[j] = dot(go, &vd[at(j)..at(j) + dh]);
                                }
                                let inner = dot(&ds[..=i], prow);
                                for j in 0..=i {
                                    let pij = prow[j];
                                    let sij = pij * (ds[j] - inner) * inv_sqrt;
                                    for t in 0..dh {
                                        dq[at(i) + t] += sij * kd[at(j) + t];
                                        dk[at(j) + t] += sij * qd[at(i) + t];
                                        dv[at(j) + t] += pij * go[t];
                                    }
                                }
                            }
                        }
                        start += len;
                    }
                    let shape = qv.shape().to_vec();
                    send(*q, Tensor::new(shape.clone(), dq)?);
                    send(*k, Tensor::new(shape.clone(), dk)?);
                    send(*v, Tensor::new(shape, dv)?);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
