//! Dense row-major `f64` arrays and a tape for reverse-mode differentiation.
//!
//! The op set is deliberately small: matrix products, row-bias addition,
//! elementwise arithmetic, (P)ReLU, reductions, a guarded square root and
//! flat-vector views. That is enough to train the map networks and to
//! differentiate the transport objectives.
//!
//! ```
//! use dpot::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let theta = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.square(theta).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(theta).unwrap().data(), &[2.0, 4.0]);
//! ```

use thiserror::Error;

/// Lower clamp on the argument of the derivative in [`Tape::sqrt_guarded`].
pub const SQRT_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: value {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("element count {len} does not match shape {shape:?}")]
    Layout { shape: Vec<usize>, len: usize },
}

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(TensorError::Layout { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major `rows × cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Rows of a rank-2 tensor; rank-0/1 tensors are treated as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(TensorError::Layout {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        check_matmul(self, other)?;
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (&self.data, k as isize, 1),
            (&other.data, n as isize, 1),
            &mut out,
        );
        Tensor::matrix(m, n, out)
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows() != other.rows() {
            return Err(TensorError::Shape {
                op: "concat_cols",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (r, ca, cb) = (self.rows(), self.cols(), other.cols());
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(self.row(i));
            out.extend_from_slice(other.row(i));
        }
        Tensor::matrix(r, ca + cb, out)
    }

    /// Rows picked by `index`, in order.
    pub fn gather_rows(&self, index: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![index.len(), c],
            data: out,
        }
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let r = self.rows();
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&self.row(i)[start..end]);
        }
        Tensor {
            shape: vec![r, end - start],
            data: out,
        }
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Tensor]) -> Result<Tensor> {
        let c = parts.first().map(|p| p.cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(TensorError::Shape {
                    op: "vstack",
                    lhs: vec![rows, c],
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, c, data)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = a · b` for row-major buffers given as `(data, row_stride, col_stride)`.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: strides describe in-bounds views of `a` (m×k), `b` (k×n) and
    // the contiguous `c` (m×n); all three were length-checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_matmul(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(TensorError::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Prelu(Var, Var),
    Square(Var),
    Sum(Var),
    SqrtGuarded(Var),
    View(Var, usize),
    ConcatCols(Var, Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

/// Records operations in execution order, so inputs always precede outputs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Param, value, true)
    }

    /// A leaf treated as fixed data.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let value = finite("matmul", value)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, t))
    }

    /// Adds a bias row (`[n]` or `[1, n]`) to every row of an `m × n` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.shape.len() != 2 || bv.len() != av.cols() || bv.rows() != 1 {
            return Err(TensorError::Shape {
                op: "add_row_bias",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let n = av.cols();
        let mut value = av.clone();
        for row in value.data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(&bv.data) {
                *x += b;
            }
        }
        let value = finite("add_row_bias", value)?;
        let t = self.tracked(&[a, bias]);
        Ok(self.push(Op::AddRowBias(a, bias), value, t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = finite("add", self.value(a).zip(self.value(b), |x, y| x + y))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = finite("sub", self.value(a).zip(self.value(b), |x, y| x - y))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = finite("mul", self.value(a).zip(self.value(b), |x, y| x * y))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, t))
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = finite("affine", self.value(a).map(|x| scale * x + shift))?;
        let t = self.tracked(&[a]);
        Ok(self.push(Op::Affine(a, scale), value, t))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let t = self.tracked(&[a]);
        Ok(self.push(Op::Relu(a), value, t))
    }

    /// Parametric ReLU with a scalar negative-side slope.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        let s = self.value(slope);
        if s.len() != 1 {
            return Err(TensorError::Shape {
                op: "prelu",
                lhs: self.value(a).shape.clone(),
                rhs: s.shape.clone(),
            });
        }
        let s = s.data[0];
        let value = finite("prelu", self.value(a).map(|x| if x > 0.0 { x } else { s * x }))?;
        let t = self.tracked(&[a, slope]);
        Ok(self.push(Op::Prelu(a, slope), value, t))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = finite("square", self.value(a).map(|x| x * x))?;
        let t = self.tracked(&[a]);
        Ok(self.push(Op::Square(a), value, t))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = finite("sum", Tensor::scalar(self.value(a).data.iter().sum()))?;
        let t = self.tracked(&[a]);
        Ok(self.push(Op::Sum(a), value, t))
    }

    /// `√max(x, 0)` for a scalar `x ≥ −SQRT_GUARD`. The derivative is taken
    /// at `max(x, SQRT_GUARD)` so it stays finite at zero.
    pub fn sqrt_guarded(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_scalar() {
            return Err(TensorError::Shape {
                op: "sqrt_guarded",
                lhs: av.shape.clone(),
                rhs: vec![],
            });
        }
        let x = av.data[0];
        if x.is_nan() || x < -SQRT_GUARD {
            return Err(TensorError::Domain {
                op: "sqrt_guarded",
                value: x,
            });
        }
        let value = finite("sqrt_guarded", Tensor::scalar(x.max(0.0).sqrt()))?;
        let t = self.tracked(&[a]);
        Ok(self.push(Op::SqrtGuarded(a), value, t))
    }

    /// A contiguous slice of a flat vector, reshaped. Gradients scatter back
    /// into the source vector.
    pub fn view(&mut self, src: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let sv = self.value(src);
        if offset + len > sv.len() {
            return Err(TensorError::Shape {
                op: "view",
                lhs: sv.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: sv.data[offset..offset + len].to_vec(),
        };
        let t = self.tracked(&[src]);
        Ok(self.push(Op::View(src, offset), value, t))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), value, t))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape; every `param`
    /// leaf receives a gradient (zeros when the loss does not depend on it).
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::Shape {
                op: "backward",
                lhs: lv.shape.clone(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor {
            shape: lv.shape.clone(),
            data: vec![1.0],
        });

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Param | Op::Constant) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }

        let mut out = vec![None; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param = node.op {
                out[idx] = Some(grads[idx].take().unwrap_or_else(|| Tensor::zeros(&node.value.shape)));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].tracked;
        match node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, (&g.data, n as isize, 1), (&bv.data, 1, n as isize), &mut da);
                    accumulate(
                        grads,
                        a,
                        Tensor {
                            shape: av.shape.clone(),
                            data: da,
                        },
                    );
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, (&av.data, 1, k as isize), (&g.data, n as isize, 1), &mut db);
                    accumulate(
                        grads,
                        b,
                        Tensor {
                            shape: bv.shape.clone(),
                            data: db,
                        },
                    );
                }
            }
            Op::AddRowBias(a, bias) => {
                if wants(bias) {
                    let bv = val(bias);
                    let n = bv.len();
                    let mut db = vec![0.0; n];
                    for row in g.data.chunks(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    accumulate(
                        grads,
                        bias,
                        Tensor {
                            shape: bv.shape.clone(),
                            data: db,
                        },
                    );
                }
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.zip(val(b), |x, y| x * y));
                }
                if wants(b) {
                    accumulate(grads, b, g.zip(val(a), |x, y| x * y));
                }
            }
            Op::Affine(a, scale) => accumulate(grads, a, g.map(|x| scale * x)),
            Op::Relu(a) => accumulate(grads, a, g.zip(val(a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Prelu(a, slope) => {
                let av = val(a);
                let s = val(slope).data[0];
                if wants(slope) {
                    let ds: f64 = g
                        .data
                        .iter()
                        .zip(&av.data)
                        .filter(|(_, &x)| x <= 0.0)
                        .map(|(gx, x)| gx * x)
                        .sum();
                    let sv = val(slope);
                    accumulate(
                        grads,
                        slope,
                        Tensor {
                            shape: sv.shape.clone(),
                            data: vec![ds],
                        },
                    );
                }
                if wants(a) {
                    accumulate(grads, a, g.zip(av, |x, y| if y > 0.0 { x } else { s * x }));
                }
            }
            Op::Square(a) => accumulate(grads, a, g.zip(val(a), |x, y| 2.0 * x * y)),
            Op::Sum(a) => {
                let av = val(a);
                accumulate(grads, a, Tensor::filled(&av.shape, g.data[0]));
            }
            Op::SqrtGuarded(a) => {
                let av = val(a);
                let y = av.data[0].max(SQRT_GUARD).sqrt();
                accumulate(
                    grads,
                    a,
                    Tensor {
                        shape: av.shape.clone(),
                        data: vec![g.data[0] / (2.0 * y)],
                    },
                );
            }
            Op::View(src, offset) => {
                let sv = val(src);
                let slot = grads[src.0].get_or_insert_with(|| Tensor::zeros(&sv.shape));
                for (d, x) in slot.data[offset..offset + g.len()].iter_mut().zip(&g.data) {
                    *d += x;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = val(a).cols();
                if wants(a) {
                    accumulate(grads, a, g.slice_cols(0, ca).reshape(val(a).shape.clone()).unwrap());
                }
                if wants(b) {
                    let cb = val(b).cols();
                    accumulate(
                        grads,
                        b,
                        g.slice_cols(ca, ca + cb).reshape(val(b).shape.clone()).unwrap(),
                    );
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Gradients of every `param` leaf of a consumed tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Fourth-order central-difference gradient of a scalar function.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let mut at = |d: f64| {
                p[i] = x[i] + d;
                let v = f(&p);
                p[i] = x[i];
                v
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
        })
        .collect()
}

/// Largest coordinatewise `|a − n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Central differences of a scalar function of one flat input.
    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data[i] += h;
                let mut m = x.clone();
                m.data[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (b.abs() + 1e-8)
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 3]);
        assert_eq!(Tensor::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn small_matmul_by_hand() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5, 3]);
        let mut tape = Tape::new();
        let av = tape.param(a.clone());
        let bv = tape.constant(b.clone());
        let c = tape.matmul(av, bv).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        let f = |x: &Tensor| x.matmul(&b).unwrap().data.iter().sum::<f64>();
        let num = numeric_grad(&f, &a, 1e-5);
        for (an, nu) in g.get(av).unwrap().data().iter().zip(&num) {
            assert!(rel_err(*an, *nu) < 1e-6, "{an} vs {nu}");
        }
    }

    #[test]
    fn sqrt_guard_values() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(4.0));
        let y = tape.sqrt_guarded(x).unwrap();
        assert_eq!(tape.value(y).item(), 2.0);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.sqrt_guarded(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).unwrap().item().is_finite());

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(-1e-6));
        assert!(matches!(tape.sqrt_guarded(x), Err(TensorError::Domain { .. })));
        // Tiny negative noise is clamped rather than rejected.
        let z = tape.param(Tensor::scalar(-1e-13));
        assert!(tape.sqrt_guarded(z).is_ok());
    }

    #[test]
    fn sqrt_gradient_at_quarter() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.25));
        let y = tape.sqrt_guarded(x).unwrap();
        let g = tape.backward(y).unwrap().get(x).unwrap().item();
        let h = 1e-5;
        let num = ((0.25f64 + h).sqrt() - (0.25f64 - h).sqrt()) / (2.0 * h);
        assert!((g - 1.0).abs() < 1e-12);
        assert!(rel_err(g, num) < 1e-6);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.square(theta).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(theta).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = tape.constant(Tensor::vector(vec![5.0]));
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(theta).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(a), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1e200]));
        assert!(matches!(tape.square(a), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn prelu_negative_side() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 2.0]));
        let s = tape.param(Tensor::vector(vec![-0.25]));
        let y = tape.prelu(x, s).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, 2.0]);
    }

    /// A composite expression that exercises every op; differentiated
    /// w.r.t. a flat parameter vector split by views.
    fn composite(tape: &mut Tape, theta: Var, x: Var) -> Result<Var> {
        let w = tape.view(theta, 0, &[3, 4])?;
        let b = tape.view(theta, 12, &[4])?;
        let s = tape.view(theta, 16, &[1])?;
        let h = tape.matmul(x, w)?;
        let h = tape.add_row_bias(h, b)?;
        let p = tape.prelu(h, s)?;
        let r = tape.relu(h)?;
        let m = tape.mul(p, r)?;
        let a = tape.affine(p, 0.7, -0.3)?;
        let d = tape.sub(a, m)?;
        let e = tape.add(d, p)?;
        let c = tape.concat_cols(e, x)?;
        let q = tape.square(c)?;
        let tot = tape.sum(q)?;
        let tot = tape.scale(tot, 0.01)?;
        tape.sqrt_guarded(tot)
    }

    fn composite_value(theta: &Tensor, x: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let t = tape.constant(theta.clone());
        let xv = tape.constant(x.clone());
        let out = composite(&mut tape, t, xv).unwrap();
        tape.value(out).item()
    }

    #[test]
    fn every_op_passes_gradient_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = random(&mut rng, &[17]);
            let x = random(&mut rng, &[5, 3]);
            let mut tape = Tape::new();
            let t = tape.param(theta.clone());
            let xv = tape.param(x.clone());
            let out = composite(&mut tape, t, xv).unwrap();
            let g = tape.backward(out).unwrap();
            let num_t = numeric_grad(&|p| composite_value(p, &x), &theta, 1e-5);
            let num_x = numeric_grad(&|p| composite_value(&theta, p), &x, 1e-5);
            for (an, nu) in g.get(t).unwrap().data().iter().zip(&num_t) {
                assert!((an - nu).abs() / (nu.abs() + 1e-8) < 1e-4, "theta: {an} vs {nu}");
            }
            for (an, nu) in g.get(xv).unwrap().data().iter().zip(&num_x) {
                assert!((an - nu).abs() / (nu.abs() + 1e-8) < 1e-4, "x: {an} vs {nu}");
            }
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = random(&mut rng, &[17]);
        let x = random(&mut rng, &[5, 3]);
        let (a, b) = (1.7, -0.4);
        let grad_of = |wa: f64, wb: f64| {
            let mut tape = Tape::new();
            let t = tape.param(theta.clone());
            let xv = tape.constant(x.clone());
            let f = composite(&mut tape, t, xv).unwrap();
            let sq = tape.square(t).unwrap();
            let g = tape.sum(sq).unwrap();
            let fa = tape.scale(f, wa).unwrap();
            let gb = tape.scale(g, wb).unwrap();
            let l = tape.add(fa, gb).unwrap();
            tape.backward(l).unwrap().take(t).unwrap()
        };
        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for i in 0..17 {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!((combined.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = random(&mut rng, &[17]);
        let x = random(&mut rng, &[5, 3]);
        let run = || {
            let mut tape = Tape::new();
            let t = tape.param(theta.clone());
            let xv = tape.constant(x.clone());
            let out = composite(&mut tape, t, xv).unwrap();
            let v = tape.value(out).item();
            (v, tape.backward(out).unwrap().take(t).unwrap())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
