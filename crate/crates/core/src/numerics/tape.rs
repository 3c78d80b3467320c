use std::collections::VecDeque;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the upstream gradient (same length as `output`) and
/// returns one optional gradient buffer per input, each matching that input's
/// element count.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    GroupNorm { x: Var, cpg: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose1d { x: Var, w: Var, geom: ConvGeom },
    GatherRows { table: Var, ids: Vec<usize> },
    PickCols { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    StraightThrough(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

/// Reverse-mode computation tape.
///
/// Every operation appends a node; [`Tape::backward`] walks the nodes in
/// reverse order, so gradient accumulation order depends only on the order
/// operations were recorded.
///
/// A tape can also *replay* a previous run: values captured by
/// [`Tape::stop_gradient`] and [`Tape::straight_through`] are recorded, and a
/// tape built with [`Tape::replaying`] substitutes those recorded values in
/// the same order. Finite differences taken on a replaying tape measure the
/// surrogate function whose true gradient is the stop-gradient gradient.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: Option<VecDeque<Tensor>>,
    detached: Vec<Tensor>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that substitutes previously detached values, in order.
    pub fn replaying(frozen: Vec<Tensor>) -> Self {
        Self {
            frozen: Some(frozen.into()),
            ..Self::default()
        }
    }

    /// Values captured by stop-gradient style operations, in recording order.
    pub fn detached(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn take_detached(&mut self) -> Vec<Tensor> {
        std::mem::take(&mut self.detached)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if av.shape().len() != 2 || bv.shape().len() != 2 || k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let grad = self.g(a) || self.g(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), grad))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let grad = self.g(a);
        Ok(self.push(t, Op::Transpose(a), grad))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        let grad = self.g(a);
        Ok(self.push(t, Op::Reshape(a), grad))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(t, Op::Add(a, b), grad))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(t, Op::Sub(a, b), grad))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(t, Op::Mul(a, b), grad))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.cols();
        if bv.numel() != n || bv.shape().iter().rev().skip(1).any(|&d| d != 1) {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let bd = bv.data();
        let data = av
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    /// `a[.., n] + b[n]`, broadcast over leading dimensions.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", a, b, |x, y| x + y)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(t, Op::AddRow(a, b), grad))
    }

    /// `a[.., n] ⊙ b[n]`, broadcast over leading dimensions.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", a, b, |x, y| x * y)?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(t, Op::MulRow(a, b), grad))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let grad = self.g(a);
        self.push(t, op, grad)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let grad = self.g(a);
        self.push(Tensor::scalar(s), Op::Sum(a), grad)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.numel() as f64;
        let grad = self.g(a);
        self.push(Tensor::scalar(s), Op::Mean(a), grad)
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let v = self.value(x);
        if axis >= v.shape().len() {
            return Err(Error::Input(format!("axis {axis} out of range for shape {:?}", v.shape())));
        }
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        Ok(())
    }

    fn softmax_values(v: &Tensor, axis: usize, log: bool) -> Vec<f64> {
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|j| (d[idx(j)] - mx).exp()).sum();
                if log {
                    let lz = z.ln() + mx;
                    for j in 0..n {
                        out[idx(j)] = d[idx(j)] - lz;
                    }
                } else {
                    for j in 0..n {
                        out[idx(j)] = (d[idx(j)] - mx).exp() / z;
                    }
                }
            }
        }
        out
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), Self::softmax_values(v, axis, false));
        let grad = self.g(x);
        Ok(self.push(t, Op::Softmax { x, axis }, grad))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), Self::softmax_values(v, axis, true));
        let grad = self.g(x);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, grad))
    }

    /// Group normalization of a `[time, channels]` signal. Each group of
    /// `channels_per_group` consecutive channels is normalized over all of its
    /// entries (channels × time) to zero mean and unit variance.
    pub fn group_norm(&mut self, x: Var, channels_per_group: usize, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let (t, c) = v.dims2()?;
        if channels_per_group == 0 || c % channels_per_group != 0 {
            return Err(Error::Config(format!(
                "{c} channels not divisible into groups of {channels_per_group}"
            )));
        }
        let groups = c / channels_per_group;
        let cnt = (t * channels_per_group) as f64;
        let d = v.data();
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; groups];
        for gi in 0..groups {
            let cols = gi * channels_per_group..(gi + 1) * channels_per_group;
            let mut mean = 0.0;
            for r in 0..t {
                mean += d[r * c + cols.start..r * c + cols.end].iter().sum::<f64>();
            }
            mean /= cnt;
            let mut var = 0.0;
            for r in 0..t {
                var += d[r * c + cols.start..r * c + cols.end].iter().map(|&z| (z - mean) * (z - mean)).sum::<f64>();
            }
            var /= cnt;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            for r in 0..t {
                for j in cols.clone() {
                    xhat[r * c + j] = (d[r * c + j] - mean) * is;
                }
            }
        }
        let t_out = Tensor::from_parts(vec![t, c], xhat.clone());
        let grad = self.g(x);
        Ok(self.push(t_out, Op::GroupNorm { x, cpg: channels_per_group, xhat, inv_std }, grad))
    }

    /// Normalizes each row of a `[rows, dim]` tensor (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        let d = v.data();
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for (o, &z) in xhat[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (z - mean) * is;
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), xhat.clone());
        let grad = self.g(x);
        Ok(self.push(out, Op::LayerNorm { x, xhat, inv_std }, grad))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize, transpose: bool) -> Result<(ConvGeom, usize)> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (t_in, c_in) = xv.dims2()?;
        let [kernel, wc_in, c_out] = *wv.shape() else {
            return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
        };
        if xv.shape().len() != 2 || wc_in != c_in || stride == 0 {
            return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
        }
        let geom = ConvGeom { t_in, c_in, c_out, kernel, stride, pad };
        let out = if transpose { geom.transpose_out_len() } else { geom.conv_out_len() };
        match out {
            Some(t) if t > 0 => Ok((geom, t)),
            _ => Err(Error::shape("conv1d", xv.shape(), wv.shape())),
        }
    }

    /// 1-D convolution of `x: [time, c_in]` with `w: [kernel, c_in, c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (geom, t_out) = self.conv_geom(x, w, stride, pad, false)?;
        let y = kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), geom, t_out);
        let grad = self.g(x) || self.g(w);
        Ok(self.push(Tensor::from_parts(vec![t_out, geom.c_out], y), Op::Conv1d { x, w, geom }, grad))
    }

    /// Transposed (upsampling) 1-D convolution; output length `(t−1)·s + k − 2p`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (geom, t_out) = self.conv_geom(x, w, stride, pad, true)?;
        let y = kernels::conv_transpose1d_forward(self.value(x).data(), self.value(w).data(), geom, t_out);
        let grad = self.g(x) || self.g(w);
        Ok(self.push(
            Tensor::from_parts(vec![t_out, geom.c_out], y),
            Op::ConvTranspose1d { x, w, geom },
            grad,
        ))
    }

    /// Embedding lookup: rows `ids` of `table: [vocab, dim]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = tv.dims2()?;
        if ids.is_empty() {
            return Err(Error::Input("gather_rows with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(Error::Input(format!("row {i} out of range for table of {v} rows")));
            }
            out.extend_from_slice(tv.row(i));
        }
        let grad = self.g(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::GatherRows { table, ids: ids.to_vec() },
            grad,
        ))
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::Input(format!("pick_cols: {} indices for {r}×{c}", idx.len())));
        }
        let out = idx.iter().enumerate().map(|(i, &j)| xv.at(i, j)).collect();
        let grad = self.g(x);
        Ok(self.push(Tensor::from_parts(vec![r], out), Op::PickCols { x, idx: idx.to_vec() }, grad))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("empty concat".into()))?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let grad = parts.iter().any(|&p| self.g(p));
        Ok(self.push(Tensor::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), grad))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("empty concat".into()))?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let grad = parts.iter().any(|&p| self.g(p));
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::ConcatRows(parts.to_vec()), grad))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::Input(format!("slice_cols {start}..{} of {c}", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let grad = self.g(x);
        Ok(self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols { x, start }, grad))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::Input(format!("slice_rows {start}..{} of {r}", start + len)));
        }
        let out = xv.data()[start * c..(start + len) * c].to_vec();
        let grad = self.g(x);
        Ok(self.push(Tensor::from_parts(vec![len, c], out), Op::SliceRows { x, start }, grad))
    }

    /// Value of `x` with no gradient path. On a replaying tape the recorded
    /// value is returned instead.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = match self.frozen.as_mut().and_then(VecDeque::pop_front) {
            Some(v) => v,
            None => self.value(x).clone(),
        };
        self.detached.push(value.clone());
        self.push(value, Op::Leaf, false)
    }

    /// Forward value `quantized`, backward identity into `z`.
    ///
    /// On a replaying tape the value is `z + r` with `r = quantized₀ − z₀`
    /// recorded from the original run.
    pub fn straight_through(&mut self, z: Var, quantized: &Tensor) -> Result<Var> {
        same_shape("straight_through", self.value(z), quantized)?;
        let value = match self.frozen.as_mut().and_then(VecDeque::pop_front) {
            Some(residual) => {
                same_shape("straight_through", self.value(z), &residual)?;
                let data = self.value(z).data().iter().zip(residual.data()).map(|(a, r)| a + r).collect();
                self.detached.push(residual);
                Tensor::from_parts(quantized.shape().to_vec(), data)
            }
            None => {
                let residual = quantized.data().iter().zip(self.value(z).data()).map(|(q, a)| q - a).collect();
                self.detached.push(Tensor::from_parts(quantized.shape().to_vec(), residual));
                quantized.clone()
            }
        };
        let grad = self.g(z);
        Ok(self.push(value, Op::StraightThrough(z), grad))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let grad = inputs.iter().any(|&v| self.g(v));
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, grad)
    }

    /// Gradients of scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients { grads })
    }

    /// `d loss / d leaf` for each of `leaves`; unreachable leaves get zeros.
    pub fn grad(&self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.backward(loss)?;
        Ok(leaves
            .iter()
            .map(|&v| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec())))
            .collect())
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.nodes[v.0].value.numel();
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].grad;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).cols();
                if wants(*a) {
                    let ga = acc(&mut grads[a.0], m * k);
                    kernels::matmul_bt_acc(g, val(*b).data(), ga, m, k, n);
                }
                if wants(*b) {
                    let gb = acc(&mut grads[b.0], k * n);
                    kernels::matmul_at_acc(val(*a).data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().unwrap();
                let ga = acc(&mut grads[a.0], r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(a) | Op::AddScalar(a) | Op::StraightThrough(a) => add_into(acc(&mut grads[a.0], g.len()), g),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(acc(&mut grads[v.0], g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(acc(&mut grads[a.0], g.len()), g);
                }
                if wants(*b) {
                    for (o, &x) in acc(&mut grads[b.0], g.len()).iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let od = val(other).data();
                        for ((o, &x), &y) in acc(&mut grads[v.0], g.len()).iter_mut().zip(g).zip(od) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::AddRow(a, b) => {
                if wants(*a) {
                    add_into(acc(&mut grads[a.0], g.len()), g);
                }
                if wants(*b) {
                    let n = len(*b);
                    let gb = acc(&mut grads[b.0], n);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::MulRow(a, b) => {
                let n = len(*b);
                if wants(*a) {
                    let bd = val(*b).data();
                    let ga = acc(&mut grads[a.0], g.len());
                    for (grow, orow) in g.chunks(n).zip(ga.chunks_mut(n)) {
                        for ((o, &x), &y) in orow.iter_mut().zip(grow).zip(bd) {
                            *o += x * y;
                        }
                    }
                }
                if wants(*b) {
                    let ad = val(*a).data();
                    let gb = acc(&mut grads[b.0], n);
                    for (grow, arow) in g.chunks(n).zip(ad.chunks(n)) {
                        for ((o, &x), &y) in gb.iter_mut().zip(grow).zip(arow) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                for (o, &x) in acc(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                    *o += c * x;
                }
            }
            Op::Relu(a) => self.elementwise_back(*a, g, grads, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::LeakyRelu(a, s) => self.elementwise_back(*a, g, grads, |x, _| if x > 0.0 { 1.0 } else { *s }),
            Op::Tanh(a) => {
                let od = out.data();
                let ga = acc(&mut grads[a.0], g.len());
                for ((o, &x), &y) in ga.iter_mut().zip(g).zip(od) {
                    *o += x * (1.0 - y * y);
                }
            }
            Op::Exp(a) => {
                let od = out.data();
                for ((o, &x), &y) in acc(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(od) {
                    *o += x * y;
                }
            }
            Op::Ln(a) => self.elementwise_back(*a, g, grads, |x, _| 1.0 / x),
            Op::Abs(a) => self.elementwise_back(*a, g, grads, |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Square(a) => self.elementwise_back(*a, g, grads, |x, _| 2.0 * x),
            Op::Sum(a) => {
                let ga = acc(&mut grads[a.0], len(*a));
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(a) => {
                let n = len(*a);
                let ga = acc(&mut grads[a.0], n);
                let s = g[0] / n as f64;
                ga.iter_mut().for_each(|o| *o += s);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let gx = acc(&mut grads[x.0], y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let s: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let gx = acc(&mut grads[x.0], y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let s: f64 = (0..n).map(|j| g[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] += g[idx(j)] - y[idx(j)].exp() * s;
                        }
                    }
                }
            }
            Op::GroupNorm { x, cpg, xhat, inv_std } => {
                let (t, c) = out.dims2().unwrap();
                let gx = acc(&mut grads[x.0], t * c);
                let cnt = (t * cpg) as f64;
                for (gi, &is) in inv_std.iter().enumerate() {
                    let cols = gi * cpg..(gi + 1) * cpg;
                    let (mut mg, mut mgx) = (0.0, 0.0);
                    for r in 0..t {
                        for j in cols.clone() {
                            mg += g[r * c + j];
                            mgx += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                    mg /= cnt;
                    mgx /= cnt;
                    for r in 0..t {
                        for j in cols.clone() {
                            let k = r * c + j;
                            gx[k] += is * (g[k] - mg - xhat[k] * mgx);
                        }
                    }
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let c = out.cols();
                let gx = acc(&mut grads[x.0], xhat.len());
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgx = kernels::dot(gr, xr) / c as f64;
                    for j in 0..c {
                        gx[r * c + j] += is * (gr[j] - mg - xr[j] * mgx);
                    }
                }
            }
            Op::Conv1d { x, w, geom } => {
                let t_out = out.rows();
                let (mut gx, mut gw) = (None, None);
                if wants(*x) {
                    gx = Some(grads[x.0].take().unwrap_or_else(|| vec![0.0; len(*x)]));
                }
                if wants(*w) {
                    gw = Some(grads[w.0].take().unwrap_or_else(|| vec![0.0; len(*w)]));
                }
                kernels::conv1d_backward(val(*x).data(), val(*w).data(), g, *geom, t_out, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
            }
            Op::ConvTranspose1d { x, w, geom } => {
                let t_out = out.rows();
                let (mut gx, mut gw) = (None, None);
                if wants(*x) {
                    gx = Some(grads[x.0].take().unwrap_or_else(|| vec![0.0; len(*x)]));
                }
                if wants(*w) {
                    gw = Some(grads[w.0].take().unwrap_or_else(|| vec![0.0; len(*w)]));
                }
                kernels::conv_transpose1d_backward(
                    val(*x).data(),
                    val(*w).data(),
                    g,
                    *geom,
                    t_out,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                );
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
            }
            Op::GatherRows { table, ids } => {
                let d = out.cols();
                let gt = acc(&mut grads[table.0], len(*table));
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::PickCols { x, idx } => {
                let c = val(*x).cols();
                let gx = acc(&mut grads[x.0], len(*x));
                for (r, &j) in idx.iter().enumerate() {
                    gx[r * c + j] += g[r];
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = out.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let gp = acc(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = len(p);
                    if wants(p) {
                        add_into(acc(&mut grads[p.0], n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).dims2().unwrap();
                let w = out.cols();
                let gx = acc(&mut grads[x.0], r * c);
                for i in 0..r {
                    add_into(&mut gx[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                let gx = acc(&mut grads[x.0], len(*x));
                add_into(&mut gx[start * c..start * c + g.len()], g);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let partials = op.backward(g, &ins, out);
                for (&v, part) in inputs.iter().zip(partials) {
                    if let (true, Some(p)) = (wants(v), part) {
                        add_into(acc(&mut grads[v.0], p.len()), &p);
                    }
                }
            }
        }
    }

    fn elementwise_back(&self, a: Var, g: &[f64], grads: &mut [Option<Vec<f64>>], d: impl Fn(f64, f64) -> f64) {
        let xd = self.nodes[a.0].value.data();
        let ga = acc(&mut grads[a.0], g.len());
        for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(xd) {
            *o += gv * d(x, gv);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
