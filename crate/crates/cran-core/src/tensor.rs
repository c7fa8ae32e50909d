//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The design is define-by-run: a [`Tape`] records every operation whose
//! inputs participate in gradients, and [`Tape::backward`] replays the
//! recorded nodes in reverse to accumulate d(loss)/d(leaf) into every
//! `requires_grad` leaf. A fresh tape is built per forward pass, which keeps
//! recurrent graphs of varying sequence length simple and correct.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense numeric array in row-major order, optionally participating in
/// gradient computation.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    /// True when this tensor is a `requires_grad` leaf or was produced by a
    /// recorded operation; gradients flow only through participating tensors.
    participating: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Build a tensor from row-major data. Every dimension must be positive
    /// and the element count must match the shape product.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidOperand {
                op: "tensor",
                msg: format!("shape dimensions must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidOperand {
                op: "tensor",
                msg: format!(
                    "shape {:?} implies {} elements but data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Self::from_parts(data, shape.to_vec(), false))
    }

    /// A `requires_grad` leaf (a trainable parameter).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        {
            let mut inner = t.inner.borrow_mut();
            inner.requires_grad = true;
            inner.participating = true;
        }
        Ok(t)
    }

    /// Scalar constant with shape `[1]`.
    pub fn scalar(x: f64) -> Tensor {
        Self::from_parts(vec![x], vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::from_parts(vec![0.0; numel.max(0)], shape.to_vec(), false)
    }

    fn from_parts(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad,
                grad: None,
                participating: requires_grad,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Copy of the row-major data.
    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub(crate) fn data_ref(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.inner.borrow(), |i| &i.data)
    }

    /// Value of a scalar (shape `[1]`) tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Accumulated gradient, if any flowed to this tensor during backward.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Mutate the underlying data in place (optimizer updates, finite
    /// difference perturbations). Shape is preserved.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data);
    }

    /// Replace the data wholesale; the length must match the current shape.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::InvalidOperand {
                op: "set_data",
                msg: format!("expected {} elements, got {}", inner.data.len(), data.len()),
            });
        }
        inner.data = data;
        Ok(())
    }

    pub(crate) fn participating(&self) -> bool {
        self.inner.borrow().participating
    }

    fn mark_participating(&self) {
        self.inner.borrow_mut().participating = true;
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        match &mut inner.grad {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    /// Pointer identity; used to deduplicate shared parameters.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

/// The kind of a recorded operation, together with any static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Matrix product; either side may be a vector (promoted to a one-row or
    /// one-column matrix, with the corresponding axis dropped in the result).
    MatMul,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Elementwise difference.
    Sub,
    /// Elementwise product.
    Mul,
    Tanh,
    Sigmoid,
    /// Row-wise softmax over the last axis (stabilized by subtracting the
    /// row maximum).
    Softmax,
    /// Valid-mode 1-D convolution, stride 1, with per-kernel bias.
    /// Inputs: signal `[in_ch, len]`, kernels `[out_ch, in_ch, width]`,
    /// bias `[out_ch]`.
    Conv1d,
    /// Temporal max pooling over the last axis.
    MaxPool1d { width: usize, stride: usize },
    /// Concatenation of vectors into one vector.
    Concat,
    /// Stack m vectors of length r into an `[r, m]` matrix (one per column).
    StackCols,
    /// Extract one column of an `[r, c]` matrix as an `[r]` vector.
    ColSlice { col: usize },
    /// Dot product of two equal-length vectors; scalar result.
    Dot,
    /// Mean over columns: `[r, c] -> [r]`.
    MeanCols,
    /// Sum of all elements; scalar result.
    SumAll,
    /// Elementwise sum of k same-shape tensors.
    SumN,
    /// Multiplication by a compile-time constant.
    Scale(f64),
    /// Elementwise max(0, x): hinge clamp and conv activation.
    MaxZero,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::Conv1d => "conv1d",
            OpKind::MaxPool1d { .. } => "maxpool1d",
            OpKind::Concat => "concat",
            OpKind::StackCols => "stack_cols",
            OpKind::ColSlice { .. } => "col_slice",
            OpKind::Dot => "dot",
            OpKind::MeanCols => "mean_cols",
            OpKind::SumAll => "sum_all",
            OpKind::SumN => "sum_n",
            OpKind::Scale(_) => "scale",
            OpKind::MaxZero => "max_zero",
        }
    }
}

struct Node {
    op: OpKind,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Records operations during a forward pass and replays them in reverse for
/// gradient accumulation. Single-threaded; rebuilt per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape for training passes.
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), recording: true }
    }

    /// A non-recording tape for evaluation; forward results are identical,
    /// nothing is retained.
    pub fn inference() -> Tape {
        Tape { nodes: Vec::new(), recording: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn record(&mut self, op: OpKind, inputs: &[&Tensor], output: &Tensor) {
        if self.recording && inputs.iter().any(|t| t.participating()) {
            output.mark_participating();
            self.nodes.push(Node {
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: output.clone(),
            });
        }
    }

    /// Uniform dispatch over operation kinds; the typed methods below are the
    /// primary API, this exists so tests can enumerate every kind.
    pub fn apply(&mut self, kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidOperand {
                    op: kind.name(),
                    msg: format!("expected {} inputs, got {}", n, inputs.len()),
                });
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                need(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                need(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Tanh => {
                need(1)?;
                self.tanh(inputs[0])
            }
            OpKind::Sigmoid => {
                need(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::Softmax => {
                need(1)?;
                self.softmax(inputs[0])
            }
            OpKind::Conv1d => {
                need(3)?;
                self.conv1d(inputs[0], inputs[1], inputs[2])
            }
            OpKind::MaxPool1d { width, stride } => {
                need(1)?;
                self.maxpool1d(inputs[0], width, stride)
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::StackCols => self.stack_cols(inputs),
            OpKind::ColSlice { col } => {
                need(1)?;
                self.col_slice(inputs[0], col)
            }
            OpKind::Dot => {
                need(2)?;
                self.dot(inputs[0], inputs[1])
            }
            OpKind::MeanCols => {
                need(1)?;
                self.mean_cols(inputs[0])
            }
            OpKind::SumAll => {
                need(1)?;
                self.sum_all(inputs[0])
            }
            OpKind::SumN => self.sum_n(inputs),
            OpKind::Scale(c) => {
                need(1)?;
                self.scale(inputs[0], c)
            }
            OpKind::MaxZero => {
                need(1)?;
                self.max_zero(inputs[0])
            }
        }
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (asp, bsp) = (a.shape(), b.shape());
        let (am, ak, a_vec) = match asp.len() {
            1 => (1, asp[0], true),
            2 => (asp[0], asp[1], false),
            _ => return Err(Error::ShapeMismatch { op: "matmul", lhs: asp, rhs: bsp }),
        };
        let (bk, bn, b_vec) = match bsp.len() {
            1 => (bsp[0], 1, true),
            2 => (bsp[0], bsp[1], false),
            _ => return Err(Error::ShapeMismatch { op: "matmul", lhs: asp, rhs: bsp }),
        };
        if ak != bk || (a_vec && b_vec) {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: asp, rhs: bsp });
        }
        let out = {
            let ad = a.data_ref();
            let bd = b.data_ref();
            mat_mul(&ad, am, ak, &bd, bn)
        };
        let out_shape: Vec<usize> = match (a_vec, b_vec) {
            (false, false) => vec![am, bn],
            (true, false) => vec![bn],
            (false, true) => vec![am],
            (true, true) => unreachable!(),
        };
        let y = Tensor::new(out, &out_shape)?;
        self.record(OpKind::MatMul, &[a, b], &y);
        Ok(y)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_same_shape("add", a, b, |x, y| x + y, OpKind::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, OpKind::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_same_shape("mul", a, b, |x, y| x * y, OpKind::Mul)
    }

    fn zip_same_shape(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        kind: OpKind,
    ) -> Result<Tensor> {
        let (asp, bsp) = (a.shape(), b.shape());
        if asp != bsp {
            return Err(Error::ShapeMismatch { op: name, lhs: asp, rhs: bsp });
        }
        let out: Vec<f64> = {
            let ad = a.data_ref();
            let bd = b.data_ref();
            ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let y = Tensor::new(out, &asp)?;
        self.record(kind, &[a, b], &y);
        Ok(y)
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data_ref().iter().map(|&x| x.tanh()).collect();
        let y = Tensor::new(out, &a.shape())?;
        self.record(OpKind::Tanh, &[a], &y);
        Ok(y)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data_ref().iter().map(|&x| stable_sigmoid(x)).collect();
        let y = Tensor::new(out, &a.shape())?;
        self.record(OpKind::Sigmoid, &[a], &y);
        Ok(y)
    }

    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        let shape = a.shape();
        let (rows, cols) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => {
                return Err(Error::InvalidOperand {
                    op: "softmax",
                    msg: format!("expected rank 1 or 2, got shape {shape:?}"),
                })
            }
        };
        let mut out = a.data();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let y = Tensor::new(out, &shape)?;
        self.record(OpKind::Softmax, &[a], &y);
        Ok(y)
    }

    pub fn conv1d(&mut self, x: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let ks = kernels.shape();
        let bs = bias.shape();
        if xs.len() != 2 || ks.len() != 3 || xs[0] != ks[1] {
            return Err(Error::ShapeMismatch { op: "conv1d", lhs: xs, rhs: ks });
        }
        if bs.len() != 1 || bs[0] != ks[0] {
            return Err(Error::ShapeMismatch { op: "conv1d", lhs: ks, rhs: bs });
        }
        let (in_ch, len) = (xs[0], xs[1]);
        let (out_ch, width) = (ks[0], ks[2]);
        if len < width {
            return Err(Error::SequenceTooShort { len, min_len: width });
        }
        let t_out = len - width + 1;
        let mut out = vec![0.0; out_ch * t_out];
        {
            let xd = x.data_ref();
            let kd = kernels.data_ref();
            let bd = bias.data_ref();
            for o in 0..out_ch {
                let krow = &kd[o * in_ch * width..(o + 1) * in_ch * width];
                let orow = &mut out[o * t_out..(o + 1) * t_out];
                orow.iter_mut().for_each(|v| *v = bd[o]);
                for i in 0..in_ch {
                    let xrow = &xd[i * len..(i + 1) * len];
                    let kk = &krow[i * width..(i + 1) * width];
                    for (t, acc) in orow.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for (dx, &kv) in kk.iter().enumerate() {
                            s += kv * xrow[t + dx];
                        }
                        *acc += s;
                    }
                }
            }
        }
        let y = Tensor::new(out, &[out_ch, t_out])?;
        self.record(OpKind::Conv1d, &[x, kernels, bias], &y);
        Ok(y)
    }

    pub fn maxpool1d(&mut self, x: &Tensor, width: usize, stride: usize) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 2 || width == 0 || stride == 0 {
            return Err(Error::InvalidOperand {
                op: "maxpool1d",
                msg: format!("expected rank-2 input and positive width/stride, got shape {xs:?}, width {width}, stride {stride}"),
            });
        }
        let (ch, len) = (xs[0], xs[1]);
        if len < width {
            return Err(Error::SequenceTooShort { len, min_len: width });
        }
        let t_out = (len - width) / stride + 1;
        let mut out = vec![0.0; ch * t_out];
        {
            let xd = x.data_ref();
            for c in 0..ch {
                for t in 0..t_out {
                    let start = t * stride;
                    let window = &xd[c * len + start..c * len + start + width];
                    out[c * t_out + t] =
                        window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                }
            }
        }
        let y = Tensor::new(out, &[ch, t_out])?;
        self.record(OpKind::MaxPool1d { width, stride }, &[x], &y);
        Ok(y)
    }

    pub fn concat(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidOperand { op: "concat", msg: "no inputs".into() });
        }
        let mut out = Vec::new();
        for p in parts {
            let sp = p.shape();
            if sp.len() != 1 {
                return Err(Error::InvalidOperand {
                    op: "concat",
                    msg: format!("expected rank-1 inputs, got shape {sp:?}"),
                });
            }
            out.extend_from_slice(&p.data_ref());
        }
        let n = out.len();
        let y = Tensor::new(out, &[n])?;
        self.record(OpKind::Concat, parts, &y);
        Ok(y)
    }

    pub fn stack_cols(&mut self, cols: &[&Tensor]) -> Result<Tensor> {
        if cols.is_empty() {
            return Err(Error::InvalidOperand { op: "stack_cols", msg: "no inputs".into() });
        }
        let r = {
            let sp = cols[0].shape();
            if sp.len() != 1 {
                return Err(Error::InvalidOperand {
                    op: "stack_cols",
                    msg: format!("expected rank-1 inputs, got shape {sp:?}"),
                });
            }
            sp[0]
        };
        let m = cols.len();
        let mut out = vec![0.0; r * m];
        for (j, col) in cols.iter().enumerate() {
            let sp = col.shape();
            if sp != vec![r] {
                return Err(Error::ShapeMismatch { op: "stack_cols", lhs: vec![r], rhs: sp });
            }
            for (i, &v) in col.data_ref().iter().enumerate() {
                out[i * m + j] = v;
            }
        }
        let y = Tensor::new(out, &[r, m])?;
        self.record(OpKind::StackCols, cols, &y);
        Ok(y)
    }

    pub fn col_slice(&mut self, a: &Tensor, col: usize) -> Result<Tensor> {
        let sp = a.shape();
        if sp.len() != 2 || col >= sp[1] {
            return Err(Error::InvalidOperand {
                op: "col_slice",
                msg: format!("column {col} out of range for shape {sp:?}"),
            });
        }
        let (r, c) = (sp[0], sp[1]);
        let out: Vec<f64> = {
            let ad = a.data_ref();
            (0..r).map(|i| ad[i * c + col]).collect()
        };
        let y = Tensor::new(out, &[r])?;
        self.record(OpKind::ColSlice { col }, &[a], &y);
        Ok(y)
    }

    pub fn dot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (asp, bsp) = (a.shape(), b.shape());
        if asp.len() != 1 || asp != bsp {
            return Err(Error::ShapeMismatch { op: "dot", lhs: asp, rhs: bsp });
        }
        let s: f64 = {
            let ad = a.data_ref();
            let bd = b.data_ref();
            ad.iter().zip(bd.iter()).map(|(x, y)| x * y).sum()
        };
        let y = Tensor::new(vec![s], &[1])?;
        self.record(OpKind::Dot, &[a, b], &y);
        Ok(y)
    }

    pub fn mean_cols(&mut self, a: &Tensor) -> Result<Tensor> {
        let sp = a.shape();
        if sp.len() != 2 {
            return Err(Error::InvalidOperand {
                op: "mean_cols",
                msg: format!("expected rank-2 input, got shape {sp:?}"),
            });
        }
        let (r, c) = (sp[0], sp[1]);
        let mut out = vec![0.0; r];
        {
            let ad = a.data_ref();
            for i in 0..r {
                out[i] = ad[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
            }
        }
        let y = Tensor::new(out, &[r])?;
        self.record(OpKind::MeanCols, &[a], &y);
        Ok(y)
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data_ref().iter().sum();
        let y = Tensor::new(vec![s], &[1])?;
        self.record(OpKind::SumAll, &[a], &y);
        Ok(y)
    }

    pub fn sum_n(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidOperand { op: "sum_n", msg: "no inputs".into() });
        }
        let shape = parts[0].shape();
        let mut out = parts[0].data();
        for p in &parts[1..] {
            let sp = p.shape();
            if sp != shape {
                return Err(Error::ShapeMismatch { op: "sum_n", lhs: shape, rhs: sp });
            }
            for (o, &v) in out.iter_mut().zip(p.data_ref().iter()) {
                *o += v;
            }
        }
        let y = Tensor::new(out, &shape)?;
        self.record(OpKind::SumN, parts, &y);
        Ok(y)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = a.data_ref().iter().map(|&x| c * x).collect();
        let y = Tensor::new(out, &a.shape())?;
        self.record(OpKind::Scale(c), &[a], &y);
        Ok(y)
    }

    pub fn max_zero(&mut self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data_ref().iter().map(|&x| x.max(0.0)).collect();
        let y = Tensor::new(out, &a.shape())?;
        self.record(OpKind::MaxZero, &[a], &y);
        Ok(y)
    }

    /// Reverse replay: accumulate d(loss)/d(leaf) into every participating
    /// `requires_grad` leaf. Gradients add across multiple uses of a tensor.
    /// A constant (never recorded) scalar loss is allowed and touches nothing.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::InvalidOperand {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", loss.shape()),
            });
        }
        if !loss.participating() {
            return Ok(());
        }
        loss.accumulate_grad(&[1.0]);
        for node in self.nodes.iter().rev() {
            let gout = match node.output.inner.borrow().grad.clone() {
                Some(g) => g,
                None => continue,
            };
            backward_op(node, &gout);
        }
        Ok(())
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain row-major matrix product: a is m×k, b is k×n.
fn mat_mul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

fn backward_op(node: &Node, gout: &[f64]) {
    let inputs = &node.inputs;
    match &node.op {
        OpKind::MatMul => {
            let a = &inputs[0];
            let b = &inputs[1];
            let (asp, bsp) = (a.shape(), b.shape());
            let (m, k) = if asp.len() == 1 { (1, asp[0]) } else { (asp[0], asp[1]) };
            let n = if bsp.len() == 1 { 1 } else { bsp[1] };
            if a.participating() {
                // dA = g @ B^T
                let da = {
                    let bd = b.data_ref();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gout[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    da
                };
                a.accumulate_grad(&da);
            }
            if b.participating() {
                // dB = A^T @ g
                let db = {
                    let ad = a.data_ref();
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ad[i * k + p] * gout[i * n + j];
                            }
                            db[p * n + j] = s;
                        }
                    }
                    db
                };
                b.accumulate_grad(&db);
            }
        }
        OpKind::Add => {
            for t in inputs {
                if t.participating() {
                    t.accumulate_grad(gout);
                }
            }
        }
        OpKind::Sub => {
            if inputs[0].participating() {
                inputs[0].accumulate_grad(gout);
            }
            if inputs[1].participating() {
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                inputs[1].accumulate_grad(&neg);
            }
        }
        OpKind::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.participating() {
                let da: Vec<f64> = {
                    let bd = b.data_ref();
                    gout.iter().zip(bd.iter()).map(|(g, v)| g * v).collect()
                };
                a.accumulate_grad(&da);
            }
            if b.participating() {
                let db: Vec<f64> = {
                    let ad = a.data_ref();
                    gout.iter().zip(ad.iter()).map(|(g, v)| g * v).collect()
                };
                b.accumulate_grad(&db);
            }
        }
        OpKind::Tanh => {
            if inputs[0].participating() {
                let yd = node.output.data_ref();
                let da: Vec<f64> =
                    gout.iter().zip(yd.iter()).map(|(g, y)| g * (1.0 - y * y)).collect();
                drop(yd);
                inputs[0].accumulate_grad(&da);
            }
        }
        OpKind::Sigmoid => {
            if inputs[0].participating() {
                let yd = node.output.data_ref();
                let da: Vec<f64> =
                    gout.iter().zip(yd.iter()).map(|(g, y)| g * y * (1.0 - y)).collect();
                drop(yd);
                inputs[0].accumulate_grad(&da);
            }
        }
        OpKind::Softmax => {
            if inputs[0].participating() {
                let shape = node.output.shape();
                let (rows, cols) =
                    if shape.len() == 1 { (1, shape[0]) } else { (shape[0], shape[1]) };
                let yd = node.output.data_ref();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = &yd[r * cols..(r + 1) * cols];
                    let g = &gout[r * cols..(r + 1) * cols];
                    let dot: f64 = g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..cols {
                        da[r * cols + j] = y[j] * (g[j] - dot);
                    }
                }
                drop(yd);
                inputs[0].accumulate_grad(&da);
            }
        }
        OpKind::Conv1d => {
            let (x, kernels, bias) = (&inputs[0], &inputs[1], &inputs[2]);
            let xs = x.shape();
            let ks = kernels.shape();
            let (in_ch, len) = (xs[0], xs[1]);
            let (out_ch, width) = (ks[0], ks[2]);
            let t_out = len - width + 1;
            if kernels.participating() {
                let xd = x.data_ref();
                let mut dk = vec![0.0; out_ch * in_ch * width];
                for o in 0..out_ch {
                    let g = &gout[o * t_out..(o + 1) * t_out];
                    for i in 0..in_ch {
                        let xrow = &xd[i * len..(i + 1) * len];
                        for dx in 0..width {
                            let mut s = 0.0;
                            for (t, &gv) in g.iter().enumerate() {
                                s += gv * xrow[t + dx];
                            }
                            dk[(o * in_ch + i) * width + dx] = s;
                        }
                    }
                }
                drop(xd);
                kernels.accumulate_grad(&dk);
            }
            if bias.participating() {
                let mut db = vec![0.0; out_ch];
                for o in 0..out_ch {
                    db[o] = gout[o * t_out..(o + 1) * t_out].iter().sum();
                }
                bias.accumulate_grad(&db);
            }
            if x.participating() {
                let kd = kernels.data_ref();
                let mut dx = vec![0.0; in_ch * len];
                for o in 0..out_ch {
                    let g = &gout[o * t_out..(o + 1) * t_out];
                    for i in 0..in_ch {
                        let kk = &kd[(o * in_ch + i) * width..(o * in_ch + i + 1) * width];
                        let drow = &mut dx[i * len..(i + 1) * len];
                        for (t, &gv) in g.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for (dxp, &kv) in kk.iter().enumerate() {
                                drow[t + dxp] += gv * kv;
                            }
                        }
                    }
                }
                drop(kd);
                x.accumulate_grad(&dx);
            }
        }
        OpKind::MaxPool1d { width, stride } => {
            if inputs[0].participating() {
                let xs = inputs[0].shape();
                let (ch, len) = (xs[0], xs[1]);
                let t_out = (len - width) / stride + 1;
                let xd = inputs[0].data_ref();
                let mut dx = vec![0.0; ch * len];
                for c in 0..ch {
                    for t in 0..t_out {
                        let start = t * stride;
                        let window = &xd[c * len + start..c * len + start + width];
                        // first maximum wins on ties, matching forward
                        let mut best = 0;
                        for (j, &v) in window.iter().enumerate() {
                            if v > window[best] {
                                best = j;
                            }
                        }
                        dx[c * len + start + best] += gout[c * t_out + t];
                    }
                }
                drop(xd);
                inputs[0].accumulate_grad(&dx);
            }
        }
        OpKind::Concat => {
            let mut offset = 0;
            for t in inputs {
                let n = t.numel();
                if t.participating() {
                    t.accumulate_grad(&gout[offset..offset + n]);
                }
                offset += n;
            }
        }
        OpKind::StackCols => {
            let m = inputs.len();
            let r = inputs[0].numel();
            for (j, t) in inputs.iter().enumerate() {
                if t.participating() {
                    let dj: Vec<f64> = (0..r).map(|i| gout[i * m + j]).collect();
                    t.accumulate_grad(&dj);
                }
            }
        }
        OpKind::ColSlice { col } => {
            if inputs[0].participating() {
                let sp = inputs[0].shape();
                let (r, c) = (sp[0], sp[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + col] = gout[i];
                }
                inputs[0].accumulate_grad(&da);
            }
        }
        OpKind::Dot => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let g = gout[0];
            if a.participating() {
                let da: Vec<f64> = {
                    let bd = b.data_ref();
                    bd.iter().map(|&v| g * v).collect()
                };
                a.accumulate_grad(&da);
            }
            if b.participating() {
                let db: Vec<f64> = {
                    let ad = a.data_ref();
                    ad.iter().map(|&v| g * v).collect()
                };
                b.accumulate_grad(&db);
            }
        }
        OpKind::MeanCols => {
            if inputs[0].participating() {
                let sp = inputs[0].shape();
                let (r, c) = (sp[0], sp[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let gi = gout[i] / c as f64;
                    for j in 0..c {
                        da[i * c + j] = gi;
                    }
                }
                inputs[0].accumulate_grad(&da);
            }
        }
        OpKind::SumAll => {
            if inputs[0].participating() {
                let da = vec![gout[0]; inputs[0].numel()];
                inputs[0].accumulate_grad(&da);
            }
        }
        OpKind::SumN => {
            for t in inputs {
                if t.participating() {
                    t.accumulate_grad(gout);
                }
            }
        }
        OpKind::Scale(c) => {
            if inputs[0].participating() {
                let da: Vec<f64> = gout.iter().map(|g| c * g).collect();
                inputs[0].accumulate_grad(&da);
            }
        }
        OpKind::MaxZero => {
            if inputs[0].participating() {
                let xd = inputs[0].data_ref();
                let da: Vec<f64> = gout
                    .iter()
                    .zip(xd.iter())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                drop(xd);
                inputs[0].accumulate_grad(&da);
            }
        }
    }
}
