//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value; node order is a
//! topological order, so [`Graph::backward`] walks the tape from the end.
//! Activations use a channels-last layout: conv inputs are `[batch, time,
//! channels]`, dense inputs `[batch, features]`, and batch norm normalizes
//! over every axis but the last.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::float::{matmul, Float};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddLast(Var, Var),
    Scale(Var, F),
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, F, F),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    ConcatLast(Var, Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    SqDist(Var, Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<F>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddLast(..) => "add_last",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LogSumExp(..) => "log_sum_exp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::Reshape(..) => "reshape",
            Op::ConcatLast(..) => "concat",
            Op::GatherRows(..) => "gather_rows",
            Op::Pick(..) => "pick",
            Op::SqDist(..) => "sq_dist",
            Op::Dense { .. } => "dense",
            Op::Conv1d { .. } => "conv1d",
            Op::BatchNorm { .. } => "batchnorm",
        }
    }
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    needs_grad: bool,
}

/// Statistics of one training-mode batch-norm call, used to update running
/// estimates outside the tape.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (1/n) variance.
    pub var: Vec<F>,
    /// Number of rows reduced per channel.
    pub count: usize,
}

/// Computation tape. Not shareable across threads while recording.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_without_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Reports the first node whose value contains NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.is_finite() {
                return Err(Error::NonFinite(format!("{} (node {i})", n.op.name())));
            }
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, node: Op<F>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(node, out, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, node: Op<F>) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(node, out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[..., j] + c[...]`: adds `c` along the last axis of `a`.
    pub fn add_last(&mut self, a: Var, c: Var) -> Result<Var> {
        let sa = self.shape(a);
        if shape_without_last(sa) != self.shape(c) {
            return Err(shape_err("add_last", format!("{:?} vs {:?}", sa, self.shape(c))));
        }
        let va = self.value(a);
        let vc = self.value(c).data();
        let mut out = va.clone();
        let n = va.last_dim();
        for (row, &cv) in out.data_mut().chunks_exact_mut(n).zip(vc) {
            for x in row {
                *x = *x + cv;
            }
        }
        let ng = self.ng(a) || self.ng(c);
        Ok(self.push(Op::AddLast(a, c), out, ng))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, s: F) -> Var {
        self.unary(a, |x| x + s, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > F::zero())) {
            return Err(Error::Domain { op: "log", detail: format!("non-positive input {bad:?}") });
        }
        Ok(self.unary(a, |x| x.ln(), Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.last_dim();
        for row in out.data_mut().chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(Op::Softmax(a), out, ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.last_dim();
        for row in out.data_mut().chunks_exact_mut(n) {
            let lse = log_sum_exp(row);
            for x in row {
                *x = *x - lse;
            }
        }
        let ng = self.ng(a);
        self.push(Op::LogSoftmax(a), out, ng)
    }

    /// Log-sum-exp over the last axis (max-shifted); drops that axis.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.rows().map(log_sum_exp).collect();
        let out = Tensor::new(&shape_without_last(va.shape()), data).unwrap();
        let ng = self.ng(a);
        self.push(Op::LogSumExp(a), out, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(F::zero(), |acc, &x| acc + x);
        let ng = self.ng(a);
        self.push(Op::Sum(a), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().fold(F::zero(), |acc, &x| acc + x) / F::from_f64(v.len() as f64);
        let ng = self.ng(a);
        self.push(Op::Mean(a), Tensor::scalar(s), ng)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.rows().map(|r| r.iter().fold(F::zero(), |acc, &x| acc + x)).collect();
        let out = Tensor::new(&shape_without_last(va.shape()), data).unwrap();
        let ng = self.ng(a);
        self.push(Op::SumLast(a), out, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(Op::Reshape(a), out, ng))
    }

    /// Concatenates two `[rows, n]` tensors along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat", format!("{sa:?} vs {sb:?}")));
        }
        let (rows, na, nb) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(rows * (na + nb));
        for (ra, rb) in self.value(a).rows().zip(self.value(b).rows()) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let out = Tensor::new(&[rows, na + nb], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::ConcatLast(a, b), out, ng))
    }

    /// Selects rows of a `[k, n]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= st[0]) {
            return Err(shape_err("gather_rows", format!("table {st:?}, indices {idx:?}")));
        }
        let n = st[1];
        let vt = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&vt[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(&[idx.len(), n], data)?;
        let ng = self.ng(table);
        Ok(self.push(Op::GatherRows(table, idx.to_vec()), out, ng))
    }

    /// `out[r] = a[r, idx[r]]` for a `[rows, k]` tensor.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 || sa[0] != idx.len() || idx.iter().any(|&i| i >= sa[1]) {
            return Err(shape_err("pick", format!("input {sa:?}, indices {idx:?}")));
        }
        let k = sa[1];
        let va = self.value(a).data();
        let data = idx.iter().enumerate().map(|(r, &i)| va[r * k + i]).collect();
        let out = Tensor::new(&[idx.len()], data)?;
        let ng = self.ng(a);
        Ok(self.push(Op::Pick(a, idx.to_vec()), out, ng))
    }

    /// Squared Euclidean distances between rows of `a [b, l]` and `m [k, l]`.
    pub fn sq_dist(&mut self, a: Var, m: Var) -> Result<Var> {
        let (sa, sm) = (self.shape(a), self.shape(m));
        if sa.len() != 2 || sm.len() != 2 || sa[1] != sm[1] {
            return Err(shape_err("sq_dist", format!("{sa:?} vs {sm:?}")));
        }
        let (b, k) = (sa[0], sm[0]);
        let mut data = Vec::with_capacity(b * k);
        for ra in self.value(a).rows() {
            for rm in self.value(m).rows() {
                let d = ra.iter().zip(rm).fold(F::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
                data.push(d);
            }
        }
        let out = Tensor::new(&[b, k], data)?;
        let ng = self.ng(a) || self.ng(m);
        Ok(self.push(Op::SqDist(a, m), out, ng))
    }

    /// Affine layer: `x [b, n] · wᵀ + bias` with `w [m, n]`, `bias [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(shape_err("dense", format!("input {sx:?}, weight {sw:?}, bias {sb:?}")));
        }
        let (rows, n, m) = (sx[0], sx[1], sw[0]);
        let mut out = vec![F::zero(); rows * m];
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(m) {
            row.copy_from_slice(bias);
        }
        matmul(rows, n, m, self.value(x).data(), false, self.value(w).data(), true, &mut out, true);
        let out = Tensor::new(&[rows, m], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Op::Dense { x, w, b }, out, ng))
    }

    /// Stride-1 convolution over time with zero "same" padding.
    ///
    /// `x [b, t, c_in]`, `w [c_out, c_in, k]` with odd `k`, `bias [c_out]`;
    /// output `[b, t, c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || sb != [sw[0]] || sw[2] % 2 == 0 {
            return Err(shape_err("conv1d", format!("input {sx:?}, weight {sw:?}, bias {sb:?}")));
        }
        let (batch, t, c_in) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        let cols = im2col(self.value(x).data(), batch, t, c_in, k);
        let rows = batch * t;
        let mut out = vec![F::zero(); rows * c_out];
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(c_out) {
            row.copy_from_slice(bias);
        }
        matmul(rows, c_in * k, c_out, &cols, false, self.value(w).data(), true, &mut out, true);
        let out = Tensor::new(&[batch, t, c_out], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let cols = if self.ng(w) { cols } else { Vec::new() };
        Ok(self.push(Op::Conv1d { x, w, b, cols }, out, ng))
    }

    /// Batch normalization with batch statistics over every axis but the
    /// last. Requires at least two examples (`shape[0] >= 2`).
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<(Var, BatchStats<F>)> {
        let sx = self.shape(x);
        if sx[0] < 2 {
            return Err(shape_err("batchnorm", "training mode needs a batch of at least 2"));
        }
        self.check_affine(x, gamma, beta)?;
        let vx = self.value(x);
        let c = vx.last_dim();
        let count = vx.len() / c;
        let nf = F::from_f64(count as f64);
        let mut mean = vec![F::zero(); c];
        for row in vx.rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        let mut var = vec![F::zero(); c];
        for row in vx.rows() {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = *s / nf);
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &mean, &inv_std, true);
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Result<Var> {
        self.check_affine(x, gamma, beta)?;
        if running_mean.len() != self.value(x).last_dim() || running_var.len() != running_mean.len() {
            return Err(shape_err("batchnorm", "running statistics length"));
        }
        let inv_std: Vec<F> = running_var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        Ok(self.normalize(x, gamma, beta, running_mean, &inv_std, false))
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batchnorm",
                format!("input {:?}, scale {:?}, shift {:?}", self.shape(x), self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(())
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[F], inv_std: &[F], batch_stats: bool) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut xhat = vx.data().to_vec();
        for row in xhat.chunks_exact_mut(c) {
            for ((v, &m), &s) in row.iter_mut().zip(mean).zip(inv_std) {
                *v = (*v - m) * s;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(c) {
            for ((v, &g), &b) in row.iter_mut().zip(g).zip(b) {
                *v = *v * g + b;
            }
        }
        let out = Tensor::new(vx.shape(), out).unwrap();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Op::BatchNorm { x, gamma, beta, xhat, inv_std: inv_std.to_vec(), batch_stats },
            out,
            ng,
        )
    }

    /// Gradients of a one-element `loss` with respect to every node that
    /// depends on a [`Graph::param`] leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || zip_map(g, vb, |x, y| x * y));
                self.acc(grads, *b, || zip_map(g, va, |x, y| x * y));
            }
            Op::AddLast(a, c) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *c, || {
                    let data = g.rows().map(|r| r.iter().fold(F::zero(), |s, &x| s + x)).collect();
                    Tensor::new(self.shape(*c), data).unwrap()
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, || g.map(|x| x * *s)),
            Op::Offset(a) | Op::Reshape(a) => self.acc(grads, *a, || {
                Tensor::new(self.shape(*a), gd.to_vec()).unwrap()
            }),
            Op::Relu(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, || zip_map(g, va, |d, x| if x > F::zero() { d } else { F::zero() }));
            }
            Op::Tanh(a) => self.acc(grads, *a, || zip_map(g, out, |d, y| d * (F::one() - y * y))),
            Op::Exp(a) => self.acc(grads, *a, || zip_map(g, out, |d, y| d * y)),
            Op::Log(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, || zip_map(g, va, |d, x| d / x));
            }
            Op::Square(a) => {
                let va = self.value(*a);
                let two = F::from_f64(2.0);
                self.acc(grads, *a, || zip_map(g, va, |d, x| two * d * x));
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                self.acc(grads, *a, || {
                    zip_map(g, va, |d, x| if x >= *lo && x <= *hi { d } else { F::zero() })
                });
            }
            Op::Softmax(a) => self.acc(grads, *a, || {
                let n = out.last_dim();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_exact_mut(n).zip(out.rows()) {
                    let dot = drow.iter().zip(yrow).fold(F::zero(), |s, (&d, &y)| s + d * y);
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                dx
            }),
            Op::LogSoftmax(a) => self.acc(grads, *a, || {
                let n = out.last_dim();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_exact_mut(n).zip(out.rows()) {
                    let total = drow.iter().fold(F::zero(), |s, &d| s + d);
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d = *d - y.exp() * total;
                    }
                }
                dx
            }),
            Op::LogSumExp(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, || {
                    let n = va.last_dim();
                    let mut dx = va.clone();
                    for ((row, &lse), &d) in dx.data_mut().chunks_exact_mut(n).zip(out.data()).zip(gd) {
                        for x in row {
                            *x = d * (*x - lse).exp();
                        }
                    }
                    dx
                });
            }
            Op::Sum(a) => self.acc(grads, *a, || Tensor::full(self.shape(*a), gd[0])),
            Op::Mean(a) => {
                let n = F::from_f64(self.value(*a).len() as f64);
                self.acc(grads, *a, || Tensor::full(self.shape(*a), gd[0] / n));
            }
            Op::SumLast(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, || {
                    let n = va.last_dim();
                    let mut dx = Tensor::zeros(va.shape());
                    for (row, &d) in dx.data_mut().chunks_exact_mut(n).zip(gd) {
                        row.fill(d);
                    }
                    dx
                });
            }
            Op::ConcatLast(a, b) => {
                let (na, nb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                self.acc(grads, *a, || {
                    let data = g.rows().flat_map(|r| r[..na].iter().copied()).collect();
                    Tensor::new(self.shape(*a), data).unwrap()
                });
                self.acc(grads, *b, || {
                    let data = g.rows().flat_map(|r| r[na..na + nb].iter().copied()).collect();
                    Tensor::new(self.shape(*b), data).unwrap()
                });
            }
            Op::GatherRows(t, idx) => self.acc(grads, *t, || {
                let mut dt = Tensor::zeros(self.shape(*t));
                let n = dt.last_dim();
                for (r, &row) in idx.iter().enumerate() {
                    for (d, &x) in dt.data_mut()[row * n..(row + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *d = *d + x;
                    }
                }
                dt
            }),
            Op::Pick(a, idx) => self.acc(grads, *a, || {
                let mut da = Tensor::zeros(self.shape(*a));
                let k = da.last_dim();
                for (r, &j) in idx.iter().enumerate() {
                    da.data_mut()[r * k + j] = gd[r];
                }
                da
            }),
            Op::SqDist(a, m) => {
                let (va, vm) = (self.value(*a), self.value(*m));
                let (b, k, l) = (va.shape()[0], vm.shape()[0], va.last_dim());
                let two = F::from_f64(2.0);
                self.acc(grads, *a, || {
                    let mut da = Tensor::zeros(va.shape());
                    for r in 0..b {
                        for c in 0..k {
                            let w = two * gd[r * k + c];
                            for d in 0..l {
                                let diff = va.data()[r * l + d] - vm.data()[c * l + d];
                                da.data_mut()[r * l + d] = da.data()[r * l + d] + w * diff;
                            }
                        }
                    }
                    da
                });
                self.acc(grads, *m, || {
                    let mut dm = Tensor::zeros(vm.shape());
                    for r in 0..b {
                        for c in 0..k {
                            let w = two * gd[r * k + c];
                            for d in 0..l {
                                let diff = va.data()[r * l + d] - vm.data()[c * l + d];
                                dm.data_mut()[c * l + d] = dm.data()[c * l + d] - w * diff;
                            }
                        }
                    }
                    dm
                });
            }
            Op::Dense { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (rows, n, m) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                self.acc(grads, *x, || {
                    let mut dx = vec![F::zero(); rows * n];
                    matmul(rows, m, n, gd, false, vw.data(), false, &mut dx, false);
                    Tensor::new(vx.shape(), dx).unwrap()
                });
                self.acc(grads, *w, || {
                    let mut dw = vec![F::zero(); m * n];
                    matmul(m, rows, n, gd, true, vx.data(), false, &mut dw, false);
                    Tensor::new(vw.shape(), dw).unwrap()
                });
                self.acc(grads, *b, || column_sums(gd, m));
            }
            Op::Conv1d { x, w, b, cols } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (batch, t, c_in) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (c_out, k) = (vw.shape()[0], vw.shape()[2]);
                let rows = batch * t;
                self.acc(grads, *x, || {
                    let mut dcols = vec![F::zero(); rows * c_in * k];
                    matmul(rows, c_out, c_in * k, gd, false, vw.data(), false, &mut dcols, false);
                    Tensor::new(vx.shape(), col2im(&dcols, batch, t, c_in, k)).unwrap()
                });
                self.acc(grads, *w, || {
                    let mut dw = vec![F::zero(); c_out * c_in * k];
                    matmul(c_out, rows, c_in * k, gd, true, cols, false, &mut dw, false);
                    Tensor::new(vw.shape(), dw).unwrap()
                });
                self.acc(grads, *b, || column_sums(gd, c_out));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let vg = self.value(*gamma).data();
                self.acc(grads, *beta, || column_sums(gd, c));
                self.acc(grads, *gamma, || {
                    let mut dg = vec![F::zero(); c];
                    for (grow, xrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((s, &d), &xh) in dg.iter_mut().zip(grow).zip(xrow) {
                            *s = *s + d * xh;
                        }
                    }
                    Tensor::new(&[c], dg).unwrap()
                });
                self.acc(grads, *x, || {
                    let mut dx = vec![F::zero(); gd.len()];
                    if *batch_stats {
                        let count = gd.len() / c;
                        let nf = F::from_f64(count as f64);
                        let mut sum_d = vec![F::zero(); c];
                        let mut sum_dx = vec![F::zero(); c];
                        for (grow, xrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                let dxh = grow[j] * vg[j];
                                sum_d[j] = sum_d[j] + dxh;
                                sum_dx[j] = sum_dx[j] + dxh * xrow[j];
                            }
                        }
                        for ((orow, grow), xrow) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                let dxh = grow[j] * vg[j];
                                orow[j] = inv_std[j] / nf * (nf * dxh - sum_d[j] - xrow[j] * sum_dx[j]);
                            }
                        }
                    } else {
                        for (orow, grow) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)) {
                            for j in 0..c {
                                orow[j] = grow[j] * vg[j] * inv_std[j];
                            }
                        }
                    }
                    Tensor::new(self.shape(*x), dx).unwrap()
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, f: impl FnOnce() -> Tensor<F>) {
        if !self.ng(v) {
            return;
        }
        let g = f();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> String {
        String::from(self.nodes[v.0].op.name())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn zip_map<F: Float>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

fn column_sums<F: Float>(g: &[F], c: usize) -> Tensor<F> {
    let mut out = vec![F::zero(); c];
    for row in g.chunks_exact(c) {
        for (s, &v) in out.iter_mut().zip(row) {
            *s = *s + v;
        }
    }
    Tensor::new(&[c], out).unwrap()
}

/// `cols[(b, t), ci * k + j] = x[b, t + j - k/2, ci]`, zero outside.
fn im2col<F: Float>(x: &[F], batch: usize, t: usize, c_in: usize, k: usize) -> Vec<F> {
    let pad = k / 2;
    let width = c_in * k;
    let mut cols = vec![F::zero(); batch * t * width];
    for b in 0..batch {
        for ti in 0..t {
            let row = &mut cols[(b * t + ti) * width..(b * t + ti + 1) * width];
            for j in 0..k {
                let src = ti + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xrow = &x[(b * t + src - pad) * c_in..(b * t + src - pad + 1) * c_in];
                for (ci, &v) in xrow.iter().enumerate() {
                    row[ci * k + j] = v;
                }
            }
        }
    }
    cols
}

fn col2im<F: Float>(cols: &[F], batch: usize, t: usize, c_in: usize, k: usize) -> Vec<F> {
    let pad = k / 2;
    let width = c_in * k;
    let mut x = vec![F::zero(); batch * t * c_in];
    for b in 0..batch {
        for ti in 0..t {
            let row = &cols[(b * t + ti) * width..(b * t + ti + 1) * width];
            for j in 0..k {
                let src = ti + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xrow = &mut x[(b * t + src - pad) * c_in..(b * t + src - pad + 1) * c_in];
                for (ci, v) in xrow.iter_mut().enumerate() {
                    *v = *v + row[ci * k + j];
                }
            }
        }
    }
    x
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp<F: Float>(xs: &[F]) -> F {
    let max = xs.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    if max == F::neg_infinity() {
        return max;
    }
    let s = xs.iter().fold(F::zero(), |acc, &x| acc + (x - max).exp());
    max + s.ln()
}

pub fn softmax_in_place<F: Float>(xs: &mut [F]) {
    let max = xs.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut total = F::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / total;
    }
}
