use super::kernels;
use super::{Axis, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var, Axis),
    Mean(Var, Axis),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of tensor operations. Nodes are appended in evaluation order, so
/// the node list is already topologically sorted and backward walks it in
/// reverse.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; its gradient is available after backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Adds a `[1×n]` row vector to each row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).sigmoid();
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).gelu();
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).exp();
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).log()?;
        Ok(self.push(out, Op::Log(x), &[x]))
    }

    pub fn sum(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let out = self.value(x).sum(axis)?;
        Ok(self.push(out, Op::Sum(x, axis), &[x]))
    }

    pub fn mean(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let out = self.value(x).mean(axis)?;
        Ok(self.push(out, Op::Mean(x, axis), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        match axis {
            Axis::Cols => {
                let out = self.value(x).softmax(Axis::Cols)?;
                Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
            }
            Axis::Rows => {
                let xt = self.transpose(x)?;
                let s = self.softmax(xt, Axis::Cols)?;
                self.transpose(s)
            }
            Axis::All => Err(Error::Domain {
                op: "softmax",
                detail: "graph softmax normalizes along rows or columns only".into(),
            }),
        }
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != n || b.numel() != n {
            return Err(Error::shape("layer_norm", xv.shape(), g.shape()));
        }
        let inv_n = T::one() / T::lit(n as f64);
        let mut normed = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                normed[r * n + j] = h;
                out[r * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(ids)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::concat_cols(&values)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::concat_rows(&values)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut norms = Vec::with_capacity(m);
        let mut out = xv.clone();
        for r in 0..m {
            let norm = xv.row_slice(r).iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() || !norm.is_finite() {
                return Err(Error::DegenerateEmbedding { index: r });
            }
            for v in &mut out.data_mut()[r * n..(r + 1) * n] {
                *v /= norm;
            }
            norms.push(norm);
        }
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// in the fused log-sum-exp form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::shape("bce_with_logits", lv.shape(), targets.shape()));
        }
        if lv.numel() == 0 {
            return Err(Error::EmptyPool);
        }
        let total: T = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| kernels::bce_with_logits(x, y))
            .sum();
        let out = Tensor::scalar(total / T::lit(lv.numel() as f64));
        Ok(self.push(out, Op::BceWithLogits { logits, targets }, &[logits]))
    }

    /// Mean over rows of `-log softmax(row)[target]`. With
    /// `exclude_diagonal`, column `r` is removed from row `r`'s softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], exclude_diagonal: bool) -> Result<Var> {
        let lv = self.value(logits);
        let (m, n) = (lv.rows(), lv.cols());
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if m == 0 {
            return Err(Error::EmptyPool);
        }
        let mut probs = vec![T::zero(); m * n];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::Index { index: t, len: n });
            }
            let excluded = exclude_diagonal.then_some(r);
            if excluded == Some(t) {
                return Err(Error::Domain {
                    op: "cross_entropy",
                    detail: format!("row {r} targets its excluded diagonal"),
                });
            }
            let row = lv.row_slice(r);
            kernels::softmax_row(row, &mut probs[r * n..(r + 1) * n], excluded);
            // log-sum-exp directly rather than ln(prob) to keep precision
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != excluded)
                .fold(T::neg_infinity(), |acc, (_, &v)| acc.max(v));
            let lse = row
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != excluded)
                .map(|(_, &v)| (v - max).exp())
                .sum::<T>()
                .ln()
                + max;
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / T::lit(m as f64));
        let probs = Tensor::new(&[m, n], probs)?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a `[1×1]` loss node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1, 1]));
        }
        let seed = Tensor::full(self.shape(loss), T::one());
        self.backward_seeded(&[(loss, seed)])
    }

    /// Reverse pass seeded with explicit upstream gradients on any number
    /// of nodes.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::shape("backward seed", self.shape(*v), g.shape()));
            }
            accumulate(&mut self.nodes[v.0], g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(idx, &grad)?;
            self.nodes[idx].grad = Some(grad);
            for (input, g) in contributions {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut self.nodes[input.0], g);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, idx: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(dy.data(), bv.data(), &mut ga, m, n, k);
                    out.push((*a, Tensor::new(&[m, k], ga)?));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(av.data(), dy.data(), &mut gb, k, m, n);
                    out.push((*b, Tensor::new(&[k, n], gb)?));
                }
            }
            Op::Transpose(x) => out.push((*x, dy.transpose()?)),
            Op::Add(a, b) => {
                out.push((*a, reduce_to(dy.clone(), self.shape(*a))));
                out.push((*b, reduce_to(dy.clone(), self.shape(*b))));
            }
            Op::Sub(a, b) => {
                out.push((*a, reduce_to(dy.clone(), self.shape(*a))));
                out.push((*b, reduce_to(dy.scale(-T::one()), self.shape(*b))));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    out.push((*a, reduce_to(dy.mul(bv)?, av.shape())));
                }
                if self.wants(*b) {
                    out.push((*b, reduce_to(dy.mul(av)?, bv.shape())));
                }
            }
            Op::Scale(x, s) => out.push((*x, dy.scale(*s))),
            Op::AddRow(x, b) => {
                out.push((*x, dy.clone()));
                if self.wants(*b) {
                    out.push((*b, dy.sum(Axis::Rows)?));
                }
            }
            Op::Sigmoid(x) => {
                let g = zip(dy, y, |d, s| d * s * (T::one() - s));
                out.push((*x, g));
            }
            Op::Gelu(x) => {
                let g = zip(dy, self.value(*x), |d, v| d * kernels::gelu_grad(v));
                out.push((*x, g));
            }
            Op::Exp(x) => out.push((*x, zip(dy, y, |d, e| d * e))),
            Op::Log(x) => out.push((*x, zip(dy, self.value(*x), |d, v| d / v))),
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let shape = self.shape(*x);
                let (m, n) = (shape[0], shape[1]);
                let count = match (&node.op, axis) {
                    (Op::Sum(..), _) => 1,
                    (_, Axis::All) => m * n,
                    (_, Axis::Rows) => m,
                    (_, Axis::Cols) => n,
                };
                let inv = T::one() / T::lit(count as f64);
                let mut g = vec![T::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        let up = match axis {
                            Axis::All => dy.data()[0],
                            Axis::Rows => dy.data()[c],
                            Axis::Cols => dy.data()[r],
                        };
                        g[r * n + c] = up * inv;
                    }
                }
                out.push((*x, Tensor::new(&[m, n], g)?));
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = (y.rows(), y.cols());
                let mut g = vec![T::zero(); m * n];
                for r in 0..m {
                    let yr = y.row_slice(r);
                    let dr = dy.row_slice(r);
                    let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        g[r * n + j] = yr[j] * (dr[j] - dot);
                    }
                }
                out.push((*x, Tensor::new(&[m, n], g)?));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let (m, n) = (y.rows(), y.cols());
                let g = self.value(*gain).data();
                let inv_n = T::one() / T::lit(n as f64);
                let mut dx = vec![T::zero(); m * n];
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                for r in 0..m {
                    let d = dy.row_slice(r);
                    let h = &normed[r * n..(r + 1) * n];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..n {
                        let dh = d[j] * g[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                        dgain[j] += d[j] * h[j];
                        dbias[j] += d[j];
                    }
                    mean_dh *= inv_n;
                    mean_dh_h *= inv_n;
                    for j in 0..n {
                        let dh = d[j] * g[j];
                        dx[r * n + j] = inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                out.push((*x, Tensor::new(&[m, n], dx)?));
                if self.wants(*gain) {
                    out.push((*gain, Tensor::new(self.shape(*gain), dgain)?));
                }
                if self.wants(*bias) {
                    out.push((*bias, Tensor::new(self.shape(*bias), dbias)?));
                }
            }
            Op::GatherRows { table, ids } => {
                let shape = self.shape(*table);
                let n = shape[1];
                let mut g = Tensor::zeros(shape);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut g.data_mut()[id * n..(id + 1) * n];
                    for (o, &v) in dst.iter_mut().zip(dy.row_slice(r)) {
                        *o += v;
                    }
                }
                out.push((*table, g));
            }
            Op::SliceCols { x, start } => {
                let shape = self.shape(*x);
                let (m, n) = (shape[0], shape[1]);
                let len = dy.cols();
                let mut g = Tensor::zeros(shape);
                for r in 0..m {
                    g.data_mut()[r * n + start..r * n + start + len].copy_from_slice(dy.row_slice(r));
                }
                out.push((*x, g));
            }
            Op::SliceRows { x, start } => {
                let shape = self.shape(*x);
                let n = shape[1];
                let mut g = Tensor::zeros(shape);
                g.data_mut()[start * n..start * n + dy.numel()].copy_from_slice(dy.data());
                out.push((*x, g));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.shape(p)[1];
                    out.push((p, dy.slice_cols(offset, width)?));
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let height = self.shape(p)[0];
                    out.push((p, dy.slice_rows(offset, height)?));
                    offset += height;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (m, n) = (y.rows(), y.cols());
                let mut g = vec![T::zero(); m * n];
                for r in 0..m {
                    let yr = y.row_slice(r);
                    let dr = dy.row_slice(r);
                    let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        g[r * n + j] = (dr[j] - yr[j] * dot) / norms[r];
                    }
                }
                out.push((*x, Tensor::new(&[m, n], g)?));
            }
            Op::BceWithLogits { logits, targets } => {
                let up = dy.data()[0] / T::lit(targets.numel() as f64);
                let g = zip(self.value(*logits), targets, |x, t| (kernels::sigmoid(x) - t) * up);
                out.push((*logits, g));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let m = targets.len();
                let n = probs.cols();
                let up = dy.data()[0] / T::lit(m as f64);
                let mut g = probs.scale(up);
                for (r, &t) in targets.iter().enumerate() {
                    g.data_mut()[r * n + t] -= up;
                }
                out.push((*logits, g));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(node: &mut Node<T>, g: Tensor<T>) {
    match &mut node.grad {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Undoes a scalar broadcast by summing the gradient down to one element.
fn reduce_to<T: Scalar>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        let total: T = g.data().iter().copied().sum();
        Tensor::full(shape, total)
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}
