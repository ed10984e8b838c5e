//! Reverse-mode differentiation over a flat operation record.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs to replay its adjoint. Nodes are only ever appended, so node order is
//! a valid topological order and the backward pass is a single reverse sweep.

use super::{layer_norm_with_stats, matmul, softmax_rows, NormStats, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    BroadcastRows(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: NormStats<T> },
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Operation record for one forward pass. Confined to a single training step;
/// build a fresh tape per sample.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every leaf on the tape.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `leaf`. Leaves the loss does not depend on get zeros.
    pub fn get(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.grads.get(leaf.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(leaf.0).and_then(Option::take)
    }
}

fn shape2(t: &Tensor<impl Scalar>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// A differentiable input. 1-D tensors are stored as `1 × n` rows.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let value = as_2d(value);
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let value = as_2d(value);
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Add a length-`n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        let n = vx.cols();
        if vr.len() != n {
            return Err(Error::dim("add_row", vx.shape(), vr.shape()));
        }
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (slot, &b) in chunk.iter_mut().zip(vr.data()) {
                *slot = *slot + b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        self.push(out, Op::Scale(x, c))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let ((m, p), (m2, q)) = (shape2(va), shape2(vb));
        if m != m2 {
            return Err(Error::dim("concat_cols", va.shape(), vb.shape()));
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(va.row_slice(r));
            data.extend_from_slice(vb.row_slice(r));
        }
        let out = Tensor::new(vec![m, p + q], data)?;
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Columns `start..start + len` of an `m × n` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = shape2(vx);
        if start + len > n || len == 0 {
            return Err(Error::dim("slice_cols", vx.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&vx.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    /// Repeat a `1 × n` row `m` times.
    pub fn broadcast_rows(&mut self, x: Var, m: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rows() != 1 || m == 0 {
            return Err(Error::dim("broadcast_rows", vx.shape(), &[m]));
        }
        let n = vx.cols();
        let data = vx.data().repeat(m);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::BroadcastRows(x)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, stats) =
            layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, stats }))
    }

    /// Mean over rows, giving a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (m, n) = shape2(vx);
        let mut acc = vec![0.0f64; n];
        for r in 0..m {
            for (a, v) in acc.iter_mut().zip(vx.row_slice(r)) {
                *a += v.as_f64();
            }
        }
        let data = acc.into_iter().map(|a| T::from_f64(a / m as f64)).collect();
        self.push(Tensor::row(data), Op::MeanRows(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(as_2d(Tensor::scalar(T::from_f64(s))), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.sum() / vx.len() as f64;
        self.push(as_2d(Tensor::scalar(T::from_f64(s))), Op::MeanAll(x))
    }

    /// Scale each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut data = vx.data().to_vec();
        for (r, chunk) in data.chunks_mut(n).enumerate() {
            let nr = super::norm(chunk);
            if nr == 0.0 || !nr.is_finite() {
                return Err(Error::Degenerate(format!("row {r} has norm {nr}")));
            }
            norms.push(nr);
            for slot in chunk.iter_mut() {
                *slot = T::from_f64(slot.as_f64() / nr);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::NormalizeRows { x, norms }))
    }
}

fn as_2d<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    if t.shape().len() == 1 {
        let n = t.len();
        t.reshape(vec![1, n]).expect("same length")
    } else {
        t
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl Fn(usize) -> f64) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    for (i, b) in buf.iter_mut().enumerate() {
        *b += f(i);
    }
}

/// Reverse sweep from `loss`, which must be a scalar recorded on `tape`.
pub fn backward<T: Scalar>(tape: &Tape<T>, loss: Var) -> Result<Gradients<T>> {
    let Some(root) = tape.nodes.get(loss.0) else {
        return Err(Error::Contract(format!("loss {loss:?} is not on this tape")));
    };
    if !root.value.is_scalar() {
        return Err(Error::Contract(format!(
            "loss must be scalar, got shape {:?}",
            root.value.shape()
        )));
    }

    // Adjoints are held in f64 until they are handed back.
    let mut adj: Vec<Option<Vec<f64>>> = vec![None; tape.nodes.len()];
    adj[loss.0] = Some(vec![1.0]);

    for idx in (0..=loss.0).rev() {
        let Some(dy) = adj[idx].take() else { continue };
        let node = &tape.nodes[idx];
        match &node.op {
            Op::Leaf => {
                adj[idx] = Some(dy);
                continue;
            }
            Op::Constant => {}
            Op::MatMul(a, b) => {
                let va = tape.value(*a);
                let vb = tape.value(*b);
                let (m, k) = shape2(va);
                let n = vb.cols();
                accumulate(&mut adj[a.0], m * k, |i| {
                    let (r, p) = (i / k, i % k);
                    (0..n).map(|j| dy[r * n + j] * vb.data()[p * n + j].as_f64()).sum()
                });
                accumulate(&mut adj[b.0], k * n, |i| {
                    let (p, j) = (i / n, i % n);
                    (0..m).map(|r| va.data()[r * k + p].as_f64() * dy[r * n + j]).sum()
                });
            }
            Op::Transpose(x) => {
                let (m, n) = shape2(tape.value(*x));
                accumulate(&mut adj[x.0], m * n, |i| dy[(i % n) * m + i / n]);
            }
            Op::Add(a, b) => {
                accumulate(&mut adj[a.0], dy.len(), |i| dy[i]);
                accumulate(&mut adj[b.0], dy.len(), |i| dy[i]);
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[a.0], dy.len(), |i| dy[i]);
                accumulate(&mut adj[b.0], dy.len(), |i| -dy[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (tape.value(*a).data(), tape.value(*b).data());
                accumulate(&mut adj[a.0], dy.len(), |i| dy[i] * vb[i].as_f64());
                accumulate(&mut adj[b.0], dy.len(), |i| dy[i] * va[i].as_f64());
            }
            Op::AddRow(x, row) => {
                let n = tape.value(*x).cols();
                let m = dy.len() / n;
                accumulate(&mut adj[x.0], dy.len(), |i| dy[i]);
                accumulate(&mut adj[row.0], n, |j| (0..m).map(|r| dy[r * n + j]).sum());
            }
            Op::Scale(x, c) => {
                let c = c.as_f64();
                accumulate(&mut adj[x.0], dy.len(), |i| c * dy[i]);
            }
            Op::ConcatCols(a, b) => {
                let p = tape.value(*a).cols();
                let q = tape.value(*b).cols();
                let m = tape.value(*a).rows();
                accumulate(&mut adj[a.0], m * p, |i| dy[(i / p) * (p + q) + i % p]);
                accumulate(&mut adj[b.0], m * q, |i| dy[(i / q) * (p + q) + p + i % q]);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = shape2(tape.value(*x));
                let len = node.value.cols();
                let start = *start;
                accumulate(&mut adj[x.0], m * n, |i| {
                    let (r, c) = (i / n, i % n);
                    if c >= start && c < start + len {
                        dy[r * len + c - start]
                    } else {
                        0.0
                    }
                });
            }
            Op::BroadcastRows(x) => {
                let n = node.value.cols();
                let m = node.value.rows();
                accumulate(&mut adj[x.0], n, |j| (0..m).map(|r| dy[r * n + j]).sum());
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let dots: Vec<f64> = y
                    .chunks(n)
                    .zip(dy.chunks(n))
                    .map(|(yr, dr)| yr.iter().zip(dr).map(|(a, b)| a.as_f64() * b).sum())
                    .collect();
                accumulate(&mut adj[x.0], y.len(), |i| y[i].as_f64() * (dy[i] - dots[i / n]));
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let g = tape.value(*gain).data();
                let xhat = &stats.xhat;
                accumulate(&mut adj[gain.0], d, |c| {
                    (0..rows).map(|r| dy[r * d + c] * xhat[r * d + c].as_f64()).sum()
                });
                accumulate(&mut adj[bias.0], d, |c| (0..rows).map(|r| dy[r * d + c]).sum());
                let mut dx = vec![0.0f64; rows * d];
                for r in 0..rows {
                    let dxhat: Vec<f64> = (0..d).map(|c| dy[r * d + c] * g[c].as_f64()).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        (0..d).map(|c| dxhat[c] * xhat[r * d + c].as_f64()).sum();
                    let inv = stats.inv_std[r];
                    for c in 0..d {
                        dx[r * d + c] = inv / d as f64
                            * (d as f64 * dxhat[c]
                                - sum_dxhat
                                - xhat[r * d + c].as_f64() * sum_dxhat_xhat);
                    }
                }
                accumulate(&mut adj[x.0], rows * d, |i| dx[i]);
            }
            Op::MeanRows(x) => {
                let (m, n) = shape2(tape.value(*x));
                accumulate(&mut adj[x.0], m * n, |i| dy[i % n] / m as f64);
            }
            Op::SumAll(x) => {
                let len = tape.value(*x).len();
                accumulate(&mut adj[x.0], len, |_| dy[0]);
            }
            Op::MeanAll(x) => {
                let len = tape.value(*x).len();
                accumulate(&mut adj[x.0], len, |_| dy[0] / len as f64);
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let n = node.value.cols();
                let dots: Vec<f64> = y
                    .chunks(n)
                    .zip(dy.chunks(n))
                    .map(|(yr, dr)| yr.iter().zip(dr).map(|(a, b)| a.as_f64() * b).sum())
                    .collect();
                accumulate(&mut adj[x.0], y.len(), |i| {
                    let r = i / n;
                    (dy[i] - y[i].as_f64() * dots[r]) / norms[r]
                });
            }
        }
    }

    let grads = tape
        .nodes
        .iter()
        .zip(adj)
        .map(|(node, a)| match node.op {
            Op::Leaf => Some(match a {
                Some(buf) => Tensor::new(
                    node.value.shape().to_vec(),
                    buf.into_iter().map(T::from_f64).collect(),
                )
                .expect("adjoint matches leaf shape"),
                None => Tensor::zeros(node.value.shape()),
            }),
            _ => None,
        })
        .collect();
    Ok(Gradients { grads })
}
