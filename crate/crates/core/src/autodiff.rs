//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably while the forward pass is
//! recorded. [`Tape::backward`] returns a [`Gradients`] buffer that the
//! caller folds into the store, so per-sample gradients can be reduced in a
//! fixed order.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Block(Var, usize),
    Softmax(Var),
    CrossEntropy(Var, usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Per-parameter gradient buffers produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.grads[id.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            slot => *slot = Some(g.to_vec()),
        }
    }

    /// Adds these gradients into the store's gradient buffers. Frozen
    /// parameters never receive anything.
    pub fn apply_to(&self, store: &mut ParamStore) {
        for (i, g) in self.grads.iter().enumerate() {
            let p = store.get_mut(ParamId(i));
            if p.frozen {
                continue;
            }
            if let (Some(g), Some(buf)) = (g, p.value.grad_mut()) {
                buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
            }
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(id) => &self.store.get(*id).value,
            _ => self.nodes[v.0].value.as_ref().expect("non-param node has a value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant. Constants never receive gradients and may hold
    /// `-inf` (mask role).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t.detached())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if x.ndim() != 2 || b.len() != x.cols() {
            return Err(Error::dim("add_row", x.shape(), b.shape()));
        }
        let n = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % n])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow(a, bias), out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(a, s), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu(a), out)
    }

    /// Row-wise layer normalization with affine gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        if xv.ndim() != 2 || g.len() != n || b.len() != n {
            return Err(Error::dim("layer_norm", xv.shape(), g.shape()));
        }
        let m = xv.rows();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 || start + len > x.cols() {
            return Err(Error::dim("slice_cols", x.shape(), &[start, len]));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&x.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.push(Op::SliceCols(a, start), out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 2 || t.rows() != m {
                return Err(Error::dim("concat_cols", self.value(parts[0]).shape(), t.shape()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 || start + len > x.rows() {
            return Err(Error::Index {
                what: "row slice end",
                index: start + len,
                len: x.rows(),
            });
        }
        let n = x.cols();
        let data = x.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        Ok(self.push(Op::SliceRows(a, start), out))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 2 || t.cols() != n {
                return Err(Error::dim("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            m += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    /// Selects rows of a table (embedding lookup).
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let n = t.cols();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= t.rows() {
                return Err(Error::Index {
                    what: "embedding row",
                    index: i,
                    len: t.rows(),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), n], data)?;
        Ok(self.push(Op::Gather(table, indices.to_vec()), out))
    }

    /// Top-left `rows×cols` block of slab `index` of a 3-d tensor.
    pub fn block(&mut self, a: Var, index: usize, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() != 3 || index >= s[0] || rows > s[1] || cols > s[2] {
            return Err(Error::dim("block", s, &[index, rows, cols]));
        }
        let base = index * s[1] * s[2];
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let off = base + r * s[2];
            data.extend_from_slice(&t.data()[off..off + cols]);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::Block(a, index), out))
    }

    pub fn masked_row_softmax(&mut self, a: Var) -> Result<Var> {
        let out = ops::masked_row_softmax(self.value(a))?;
        Ok(self.push(Op::Softmax(a), out))
    }

    /// Cross-entropy of a logit vector (any shape with `K` entries) against a
    /// class label. Produces a shape-`[1]` scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        let loss = ops::cross_entropy_loss(z, label)?;
        let probs = ops::softmax(z.data());
        Ok(self.push(Op::CrossEntropy(logits, label, probs), Tensor::scalar(loss)))
    }

    /// Back-propagates from `root`, whose gradient is seeded with `seed` in
    /// every entry.
    pub fn backward(&self, root: Var, seed: f64) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![seed; self.value(root).len()]);
        let mut out = Gradients::zeros_like(self.store);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| self.value(v);
            let mut send = |v: Var, d: Vec<f64>| match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&d).for_each(|(b, x)| *b += x),
                slot => *slot = Some(d),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if !self.store.get(*id).frozen {
                        out.accumulate(*id, &g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let gt = Tensor::new(vec![av.rows(), bv.cols()], g).expect("grad shape");
                    let da = ops::matmul(&gt, &bv.transpose().expect("2d")).expect("shapes");
                    let db = ops::matmul(&av.transpose().expect("2d"), &gt).expect("shapes");
                    send(*a, da.into_data());
                    send(*b, db.into_data());
                }
                Op::Transpose(a) => {
                    let s = self.value(Var(i)).shape();
                    let gt = Tensor::new(s.to_vec(), g).expect("grad shape");
                    send(*a, gt.transpose().expect("2d").into_data());
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::AddRow(a, bias) => {
                    let n = val(*bias).len();
                    let mut db = vec![0.0; n];
                    for (k, v) in g.iter().enumerate() {
                        db[k % n] += v;
                    }
                    send(*bias, db);
                    send(*a, g);
                }
                Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
                Op::Relu(a) => {
                    let x = val(*a).data();
                    send(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                            .collect(),
                    );
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = val(*gamma).data();
                    let n = gm.len();
                    let m = g.len() / n;
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..n {
                            dg[c] += gr[c] * hr[c];
                            db[c] += gr[c];
                            let d = gr[c] * gm[c];
                            sum_d += d;
                            sum_dh += d * hr[c];
                        }
                        let nf = n as f64;
                        for c in 0..n {
                            let d = gr[c] * gm[c];
                            dx[r * n + c] = inv_std[r] * (d - sum_d / nf - hr[c] * sum_dh / nf);
                        }
                    }
                    send(*gamma, dg);
                    send(*beta, db);
                    send(*x, dx);
                }
                Op::SliceCols(a, start) => {
                    let src = val(*a);
                    let (m, n) = (src.rows(), src.cols());
                    let len = g.len() / m;
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        d[r * n + start..r * n + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    send(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|p| val(*p).cols()).collect();
                    let total: usize = widths.iter().sum();
                    let m = g.len() / total;
                    let mut off = 0;
                    for (p, w) in parts.iter().zip(&widths) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        off += w;
                        send(*p, d);
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = val(*a);
                    let n = src.cols();
                    let mut d = vec![0.0; src.len()];
                    d[start * n..start * n + g.len()].copy_from_slice(&g);
                    send(*a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = val(*p).len();
                        send(*p, g[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::Gather(table, indices) => {
                    let t = val(*table);
                    let n = t.cols();
                    let mut d = vec![0.0; t.len()];
                    for (k, &row) in indices.iter().enumerate() {
                        for c in 0..n {
                            d[row * n + c] += g[k * n + c];
                        }
                    }
                    send(*table, d);
                }
                Op::Block(a, index) => {
                    let src = val(*a);
                    let s = src.shape();
                    let out_shape = self.value(Var(i)).shape();
                    let (rows, cols) = (out_shape[0], out_shape[1]);
                    let mut d = vec![0.0; src.len()];
                    let base = index * s[1] * s[2];
                    for r in 0..rows {
                        let off = base + r * s[2];
                        d[off..off + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                    }
                    send(*a, d);
                }
                Op::Softmax(a) => {
                    let p = self.value(Var(i));
                    let n = p.cols();
                    let mut d = vec![0.0; g.len()];
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for c in 0..n {
                            d[r * n + c] = pr[c] * (gr[c] - dot);
                        }
                    }
                    send(*a, d);
                }
                Op::CrossEntropy(logits, label, probs) => {
                    let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    d[*label] -= g[0];
                    send(*logits, d);
                }
            }
        }
        out
    }
}
