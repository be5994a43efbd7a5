//! Define-by-run reverse-mode autodiff.
//!
//! Every operation appends a node holding its value and the parents needed by
//! the chain rule. Nodes are only ever appended, so walking the node list
//! backwards is a valid reverse topological order.

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sum(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Glu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient stored on a `requires_grad` leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), ng))
    }

    /// `x · wᵀ + b` with `w` stored as `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (t, d_in) = self.dims2(x)?;
        let (d_out, d_in2) = self.dims2(w)?;
        if d_in != d_in2 {
            return Err(Error::shape(
                "linear",
                self.value(x).shape(),
                self.value(w).shape(),
            ));
        }
        let mut out = vec![0.0; t * d_out];
        tensor::matmul_nt(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            t,
            d_in,
            d_out,
        );
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [d_out] {
                return Err(Error::shape("linear bias", bias.shape(), &[d_out]));
            }
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(bias.data()).for_each(|(o, b)| *o += b);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let ng = self.needs(&parents);
        Ok(self.push(Tensor::new(vec![t, d_out], out)?, Op::Linear { x, w, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a length-`n` vector to every row of a `[rows × n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        let r = self.value(row);
        if r.shape() != [n] {
            return Err(Error::shape("add_row", self.value(x).shape(), r.shape()));
        }
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(r.data()).for_each(|(o, b)| *o += b);
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.needs(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let out =
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * s).collect()).expect("same shape");
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Adds a constant tensor (no gradient flows into it).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != c.shape() {
            return Err(Error::shape("add_const", v.shape(), c.shape()));
        }
        let data = v.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::AddConst(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    /// Layer normalization over the last axis of a `[rows × d]` matrix.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    self.value(x).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let (mean, var) = nn::mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, nn::relu, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, nn::gelu, Op::Gelu(x))
    }

    fn map(&mut self, x: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out =
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape");
        let ng = self.needs(&[x]);
        self.push(out, op, ng)
    }

    /// Gated linear unit over the last axis: `a ⊙ sigmoid(b)` for `[a ‖ b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        if d % 2 != 0 {
            return Err(Error::Contract(format!("GLU needs an even width, got {d}")));
        }
        let h = d / 2;
        let xs = self.value(x).data();
        let mut out = vec![0.0; rows * h];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            for j in 0..h {
                out[r * h + j] = row[j] * nn::sigmoid(row[h + j]);
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![rows, h], out)?, Op::Glu(x), ng))
    }

    /// Selects rows of `table` by id.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(table)?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Vocabulary { id, size: n });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let ng = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x)?;
        if start + len > d {
            return Err(Error::shape("slice_cols", &[rows, d], &[start, len]));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xs[r * d + start..r * d + start + len]);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(Error::shape("concat_cols", &[rows], self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Negative log-likelihood of `targets` under `softmax(logits)` row-wise.
    /// `None` targets are padding and contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        reduction: Reduction,
    ) -> Result<Var> {
        let (rows, v) = self.dims2(logits)?;
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy", &[rows, v], &[targets.len()]));
        }
        let ls = self.value(logits).data();
        let mut probs = ls.to_vec();
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::Vocabulary { id: t, size: v });
                }
                let lse = tensor::log_sum_exp(row);
                total += lse - row[t];
                count += 1;
            }
            tensor::softmax_in_place(row);
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if count > 0 => 1.0 / count as f64,
            Reduction::Mean => 0.0,
        };
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            ng,
        ))
    }

    /// Back-propagates from a scalar `loss`, accumulating into the `grad`
    /// slot of every `requires_grad` leaf. Leaves the loss does not reach get
    /// a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                match grads.get_mut(i).and_then(Option::take) {
                    Some(g) => node.value.accumulate_grad(&g),
                    None => {
                        let zeros = vec![0.0; node.value.numel()];
                        node.value.accumulate_grad(&zeros);
                    }
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, delta: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            delta(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let n = self.dims2(*b)?.1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC · Bᵀ
                send(*a, &|acc| {
                    let mut tmp = vec![0.0; m * k];
                    tensor::matmul_nt(g, bv, &mut tmp, m, n, k);
                    acc.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                });
                // dB = Aᵀ · dC
                send(*b, &|acc| tensor::matmul_tn_acc(av, g, acc, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let n = self.dims2(*b)?.0;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // C = A Bᵀ: dA = dC · B, dB = dCᵀ · A
                send(*a, &|acc| {
                    let mut tmp = vec![0.0; m * k];
                    tensor::matmul_nn(g, bv, &mut tmp, m, n, k);
                    acc.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                });
                send(*b, &|acc| tensor::matmul_tn_acc(g, av, acc, m, n, k));
            }
            Op::Linear { x, w, b } => {
                let (t, d_in) = self.dims2(*x)?;
                let d_out = self.dims2(*w)?.0;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                send(*x, &|acc| {
                    let mut tmp = vec![0.0; t * d_in];
                    tensor::matmul_nn(g, wv, &mut tmp, t, d_out, d_in);
                    acc.iter_mut().zip(&tmp).for_each(|(a, y)| *a += y);
                });
                send(*w, &|acc| tensor::matmul_tn_acc(g, xv, acc, t, d_out, d_in));
                if let Some(b) = b {
                    send(*b, &|acc| {
                        for row in g.chunks(d_out) {
                            acc.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                send(*a, &|acc| add_into(acc, g));
                send(*b, &|acc| add_into(acc, g));
            }
            Op::AddRow(x, row) => {
                let n = self.value(*row).numel();
                send(*x, &|acc| add_into(acc, g));
                send(*row, &|acc| {
                    for chunk in g.chunks(n) {
                        add_into(acc, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|acc| {
                    for ((s, gi), y) in acc.iter_mut().zip(g).zip(bv) {
                        *s += gi * y;
                    }
                });
                send(*b, &|acc| {
                    for ((s, gi), y) in acc.iter_mut().zip(g).zip(av) {
                        *s += gi * y;
                    }
                });
            }
            Op::Scale(x, s) => send(*x, &|acc| {
                acc.iter_mut().zip(g).for_each(|(a, gi)| *a += gi * s);
            }),
            Op::AddConst(x) => send(*x, &|acc| add_into(acc, g)),
            Op::Sum(x) => send(*x, &|acc| acc.iter_mut().for_each(|a| *a += g[0])),
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let shape = y.shape();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let yv = y.data();
                send(*x, &|acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * yv[idx(j)]).sum();
                            for j in 0..n {
                                acc[idx(j)] += yv[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                send(*gain, &|acc| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            acc[j] += gr[j] * hr[j];
                        }
                    }
                });
                send(*bias, &|acc| {
                    for gr in g.chunks(d) {
                        add_into(acc, gr);
                    }
                });
                send(*x, &|acc| {
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            acc[r * d + j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                send(*x, &|acc| {
                    for ((a, gi), xi) in acc.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *a += gi;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                send(*x, &|acc| {
                    for ((a, gi), xi) in acc.iter_mut().zip(g).zip(xv) {
                        *a += gi * nn::gelu_grad(*xi);
                    }
                });
            }
            Op::Glu(x) => {
                let (rows, d) = self.dims2(*x)?;
                let h = d / 2;
                let xv = self.value(*x).data();
                send(*x, &|acc| {
                    for r in 0..rows {
                        for j in 0..h {
                            let a = xv[r * d + j];
                            let s = nn::sigmoid(xv[r * d + h + j]);
                            let gi = g[r * h + j];
                            acc[r * d + j] += gi * s;
                            acc[r * d + h + j] += gi * a * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.dims2(*table)?.1;
                send(*table, &|acc| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut acc[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (rows, d) = self.dims2(*x)?;
                let len = node.value.dims2()?.1;
                send(*x, &|acc| {
                    for r in 0..rows {
                        add_into(
                            &mut acc[r * d + start..r * d + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims2(p)?.1;
                    send(p, &|acc| {
                        for r in 0..rows {
                            add_into(
                                &mut acc[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let v = self.dims2(*logits)?.1;
                let s = g[0] * scale;
                send(*logits, &|acc| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut acc[r * v..(r + 1) * v];
                        for (j, a) in row.iter_mut().enumerate() {
                            let p = probs[r * v + j];
                            *a += s * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}
