//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive in evaluation order. Because a node can
//! only reference nodes created before it, the recording order is already a
//! topological order, and [`Tape::backward`] simply walks it in reverse.

use std::f64::consts::PI;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    /// Handle for the node at `index`. Only meaningful on a tape whose first
    /// nodes were recorded in a known order.
    pub(crate) const fn from_index(index: usize) -> Self {
        Var(index)
    }
}

type LocalGrad = Box<dyn Fn(f64, f64) -> f64>;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    MulConst(Var, Vec<f64>),
    AddConst(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    WeightedRowSum(Var, Vec<f64>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Stack(Vec<Var>),
    Row(Var, usize),
    Pick(Var, usize),
    NormalizeRows(Var, Vec<f64>),
    Focal {
        logp: Var,
        alpha: f64,
        gamma: f64,
    },
    Map(Var, LocalGrad),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], one per node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if `v` does not
    /// require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("variable does not require grad")
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// `a · b` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ` for rank-2 operands.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    /// `op(a) · op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(format!("matmul needs rank 2, got {sa:?} and {sb:?}")));
        }
        let (m, ka) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape(format!("matmul inner extents {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, self.data(a), trans_a, self.data(b), trans_b, &mut out, 0.0);
        let op = Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
            m,
            k: ka,
            n,
        };
        Ok(self.push(Tensor::from_parts(vec![m, n], out), op, &[a, b]))
    }

    /// `x · w + b`, with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose needs rank 2"));
        }
        let value = self.value(x).transpose();
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    // ---- elementwise binary ---------------------------------------------

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector along the last axis of `x` (bias broadcast over rows).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(Error::shape(format!(
                "bias of {} for last axis {c}",
                self.value(bias).len()
            )));
        }
        let b = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            for (o, bj) in row.iter_mut().zip(&b) {
                *o += bj;
            }
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(v, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Sums several same-shaped values.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::invalid("add_all of nothing"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Multiplies every element of `x` by the scalar value `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by needs a scalar"));
        }
        let k = self.value(s).item();
        let v = self.value(x).map(|e| e * k);
        Ok(self.push(v, Op::ScaleBy(x, s), &[x, s]))
    }

    // ---- constants ------------------------------------------------------

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|e| e * k);
        self.push(v, Op::Scale(x, k), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|e| e + k);
        self.push(v, Op::AddScalar(x), &[x])
    }

    /// Elementwise product with a constant tensor (dropout masks, fixed weights).
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if c.shape() != self.shape(x) {
            return Err(Error::shape("mul_const shape"));
        }
        let data = self.data(x).iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let v = Tensor::from_parts(c.shape().to_vec(), data);
        Ok(self.push(v, Op::MulConst(x, c.data().to_vec()), &[x]))
    }

    /// Elementwise sum with a constant tensor (attention masks).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if c.shape() != self.shape(x) {
            return Err(Error::shape("add_const shape"));
        }
        let data = self.data(x).iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let v = Tensor::from_parts(c.shape().to_vec(), data);
        Ok(self.push(v, Op::AddConst(x), &[x]))
    }

    // ---- elementwise unary ----------------------------------------------

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu_scalar);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid_scalar);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.push(v, Op::Log(x), &[x])
    }

    /// Elementwise `f` with a caller-supplied local derivative `df(x, f(x))`.
    pub fn map(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let v = self.value(x).map(f);
        self.push(v, Op::Map(x, Box::new(df)), &[x])
    }

    // ---- normalizations -------------------------------------------------

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&e| (e - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|e| *e -= lse);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(v, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalization over the last axis with population variance and
    /// `eps` inside the square root, followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm gain/bias extent"));
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let rows = xs.len() / c;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &e) in row.iter().enumerate() {
                let h = (e - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor::from_parts(self.shape(x).to_vec(), out);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(v, op, &[x, gain, bias]))
    }

    /// Divides each row by its L2 norm. Rows with zero norm map to zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|e| e * e).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                row.iter_mut().for_each(|e| *e /= n);
            } else {
                log::warn!("zero vector left unnormalized");
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(v, Op::NormalizeRows(x, norms), &[x])
    }

    // ---- reductions and indexing ------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `Σ_r w_r · x[r, :]` over the rows of a rank-2 `x`, giving a vector.
    pub fn weighted_row_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || weights.len() != t.rows() {
            return Err(Error::shape("weighted_row_sum weights"));
        }
        let c = t.cols();
        let mut out = vec![0.0; c];
        for (row, &w) in t.data().chunks(c).zip(&weights) {
            if w != 0.0 {
                for (o, e) in out.iter_mut().zip(row) {
                    *o += w * e;
                }
            }
        }
        Ok(self.push(Tensor::vector(out), Op::WeightedRowSum(x, weights), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.cols() || len == 0 {
            return Err(Error::shape("slice_cols range"));
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(t.rows() * len);
        for row in t.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::from_parts(vec![t.rows(), len], out);
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self
            .value(*xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .rows();
        if xs.iter().any(|&v| self.value(v).rank() != 2 || self.value(v).rows() != rows) {
            return Err(Error::shape("concat_cols row extents"));
        }
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let v = Tensor::from_parts(vec![rows, total], out);
        Ok(self.push(v, Op::ConcatCols(xs.to_vec()), xs))
    }

    /// Stacks same-length vectors into the rows of a matrix.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self
            .value(*xs.first().ok_or_else(|| Error::invalid("stack of nothing"))?)
            .len();
        if xs.iter().any(|&v| self.value(v).len() != c) {
            return Err(Error::shape("stack extents"));
        }
        let mut out = Vec::with_capacity(xs.len() * c);
        for &v in xs {
            out.extend_from_slice(self.data(v));
        }
        let v = Tensor::from_parts(vec![xs.len(), c], out);
        Ok(self.push(v, Op::Stack(xs.to_vec()), xs))
    }

    /// Row `i` of a rank-2 value, as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || i >= t.rows() {
            return Err(Error::shape("row index"));
        }
        let v = Tensor::vector(t.row(i).to_vec());
        Ok(self.push(v, Op::Row(x, i), &[x]))
    }

    /// Element at flat index `i`, as a scalar.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let e = *self
            .data(x)
            .get(i)
            .ok_or_else(|| Error::shape("pick index out of range"))?;
        Ok(self.push(Tensor::scalar(e), Op::Pick(x, i), &[x]))
    }

    /// `−α (1 − p)^γ log p` from a scalar log-probability `log p`.
    pub fn focal_from_log_prob(&mut self, logp: Var, alpha: f64, gamma: f64) -> Result<Var> {
        if self.value(logp).len() != 1 {
            return Err(Error::shape("focal term needs a scalar log-probability"));
        }
        let l = self.value(logp).item();
        let q = -l.exp_m1();
        let modulator = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        let v = -alpha * modulator * l;
        Ok(self.push(
            Tensor::scalar(v),
            Op::Focal { logp, alpha, gamma },
            &[logp],
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of the scalar `root` with respect to every node that requires
    /// them. Leaves the root does not depend on get zero gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Tensor::from_parts(node.value.shape().to_vec(), data)
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                self.accumulate(grads, a, |ga| {
                    if trans_a {
                        gemm(k, n, m, bd, trans_b, g, true, ga, 1.0);
                    } else {
                        gemm(m, n, k, g, false, bd, !trans_b, ga, 1.0);
                    }
                });
                self.accumulate(grads, b, |gb| {
                    if trans_b {
                        gemm(n, m, k, g, true, ad, trans_a, gb, 1.0);
                    } else {
                        gemm(k, m, n, ad, !trans_a, g, false, gb, 1.0);
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |ga| axpy(ga, 1.0, g));
                self.accumulate(grads, b, |gb| axpy(gb, 1.0, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |ga| axpy(ga, 1.0, g));
                self.accumulate(grads, b, |gb| axpy(gb, -1.0, g));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                self.accumulate(grads, a, |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                });
            }
            &Op::AddBias(x, bias) => {
                self.accumulate(grads, x, |gx| axpy(gx, 1.0, g));
                let c = self.value(bias).len();
                self.accumulate(grads, bias, |gb| {
                    for row in g.chunks(c) {
                        axpy(gb, 1.0, row);
                    }
                });
            }
            &Op::Scale(x, k) => self.accumulate(grads, x, |gx| axpy(gx, k, g)),
            &Op::AddScalar(x) | &Op::AddConst(x) | &Op::Reshape(x) => {
                self.accumulate(grads, x, |gx| axpy(gx, 1.0, g))
            }
            &Op::ScaleBy(x, s) => {
                let k = self.value(s).item();
                self.accumulate(grads, x, |gx| axpy(gx, k, g));
                let dot: f64 = g.iter().zip(self.data(x)).map(|(a, b)| a * b).sum();
                self.accumulate(grads, s, |gs| gs[0] += dot);
            }
            Op::MulConst(x, c) => self.accumulate(grads, *x, |gx| {
                for ((o, gi), ci) in gx.iter_mut().zip(g).zip(c) {
                    *o += gi * ci;
                }
            }),
            &Op::Gelu(x) => {
                let xd = self.data(x);
                self.accumulate(grads, x, |gx| {
                    for ((o, gi), &xi) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gi * gelu_derivative(xi);
                    }
                });
            }
            &Op::Sigmoid(x) => self.accumulate(grads, x, |gx| {
                for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            }),
            &Op::Exp(x) => self.accumulate(grads, x, |gx| {
                for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *o += gi * yi;
                }
            }),
            &Op::Log(x) => {
                let xd = self.data(x);
                self.accumulate(grads, x, |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gi / xi;
                    }
                });
            }
            Op::Map(x, df) => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for (((o, gi), &xi), &yi) in gx.iter_mut().zip(g).zip(xd).zip(y) {
                        *o += gi * df(xi, yi);
                    }
                });
            }
            &Op::Softmax(x) => {
                let c = node.value.cols();
                self.accumulate(grads, x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(x) => {
                let c = node.value.cols();
                self.accumulate(grads, x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gd = self.data(*gain);
                self.accumulate(grads, *gain, |gg| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((o, gi), hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gi * hi;
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for gr in g.chunks(c) {
                        axpy(gb, 1.0, gr);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; c];
                    for (((gxr, gr), hr), &inv) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .zip(inv_std)
                    {
                        for j in 0..c {
                            dxhat[j] = gr[j] * gd[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gxr[j] += inv * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
            }
            &Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                self.accumulate(grads, x, |gx| {
                    // gx is c×r, g is r×c
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            &Op::Sum(x) => self.accumulate(grads, x, |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean(x) => {
                let k = g[0] / self.value(x).len() as f64;
                self.accumulate(grads, x, |gx| gx.iter_mut().for_each(|o| *o += k));
            }
            Op::WeightedRowSum(x, w) => {
                let c = node.value.len();
                self.accumulate(grads, *x, |gx| {
                    for (row, &wr) in gx.chunks_mut(c).zip(w) {
                        if wr != 0.0 {
                            axpy(row, wr, g);
                        }
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let c = self.value(x).cols();
                self.accumulate(grads, x, |gx| {
                    for (gxr, gr) in gx.chunks_mut(c).zip(g.chunks(len)) {
                        axpy(&mut gxr[start..start + len], 1.0, gr);
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).cols();
                    self.accumulate(grads, x, |gx| {
                        for (gxr, gr) in gx.chunks_mut(c).zip(g.chunks(total)) {
                            axpy(gxr, 1.0, &gr[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::Stack(xs) => {
                let c = node.value.cols();
                for (i, &x) in xs.iter().enumerate() {
                    self.accumulate(grads, x, |gx| axpy(gx, 1.0, &g[i * c..(i + 1) * c]));
                }
            }
            &Op::Row(x, i) => {
                let c = node.value.len();
                self.accumulate(grads, x, |gx| axpy(&mut gx[i * c..(i + 1) * c], 1.0, g));
            }
            &Op::Pick(x, i) => self.accumulate(grads, x, |gx| gx[i] += g[0]),
            Op::NormalizeRows(x, norms) => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |gx| {
                    for (((gxr, gr), yr), &n) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(y.chunks(c))
                        .zip(norms)
                    {
                        if n > 0.0 {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                                *o += (gi - yi * dot) / n;
                            }
                        }
                    }
                });
            }
            &Op::Focal { logp, alpha, gamma } => {
                let l = self.value(logp).item();
                let p = l.exp();
                let q = -l.exp_m1();
                let d = if gamma == 0.0 {
                    -alpha
                } else {
                    let lead = -alpha * q.powf(gamma);
                    let tail = if q > 0.0 {
                        alpha * gamma * l * p * q.powf(gamma - 1.0)
                    } else {
                        0.0
                    };
                    lead + tail
                };
                self.accumulate(grads, logp, |gl| gl[0] += g[0] * d);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        total += *e;
    }
    row.iter_mut().for_each(|e| *e /= total);
}

pub fn gelu_scalar(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let t = (k * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(3.0) - 2.9964).abs() < 1e-4);
        assert!((gelu_scalar(-3.0) + 0.0036).abs() < 1e-4);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5]));
        let y = tape.softmax(x);
        assert!(tape.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));

        let x = tape.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let y = tape.softmax(x);
        assert!((tape.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let x = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).max_abs_diff(&t(&[1, 2], &[1.0, -1.0])) < 1e-5);

        let x = tape.constant(t(&[1, 2], &[2.0, 2.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let g3 = tape.constant(Tensor::ones(&[3]));
        let b3 = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, g3, b3, 1e-5).unwrap();
        let expected = [-1.2247, 0.0, 1.2247];
        for (a, e) in tape.value(y).data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-4);
        }
    }

    #[test]
    fn nll_of_uniform_softmax() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[2]));
        let lp = tape.log_softmax(logits);
        let pick = tape.pick(lp, 0).unwrap();
        let loss = tape.scale(pick, -1.0);
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(logits).data();
        assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2, 3], 0.7));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn fan_out_accumulates_exactly() {
        // y = f(x) + g(x) with f = sum(exp x), g = sum(3x)
        let x0 = t(&[3], &[0.1, -0.4, 1.3]);
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let e = tape.exp(x);
        let f = tape.sum(e);
        let s3 = tape.scale(x, 3.0);
        let gsum = tape.sum(s3);
        let y = tape.add(f, gsum).unwrap();
        let both = tape.backward(y).unwrap().wrt(x).clone();
        let only_f = tape.backward(f).unwrap().wrt(x).clone();
        let only_g = tape.backward(gsum).unwrap().wrt(x).clone();
        for i in 0..3 {
            assert_eq!(both.data()[i], only_f.data()[i] + only_g.data()[i]);
        }
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let unused = tape.param(Tensor::ones(&[4]));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn focal_gamma_zero_is_negative_log_prob() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::scalar(-0.3));
        let f = tape.focal_from_log_prob(l, 1.0, 0.0).unwrap();
        assert_eq!(tape.value(f).item(), 0.3);
        assert_eq!(tape.backward(f).unwrap().wrt(l).item(), -1.0);
    }
}
