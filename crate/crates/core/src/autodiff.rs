//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every value lives on a [`Tape`]; a [`Tensor`] is a cheap handle (node id
//! plus shape). Operations append nodes in evaluation order, so the node
//! list is already topologically sorted and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! All tensors are rank 2. Scalars are `1x1`, row vectors `1xn`.
//!
//! A tape is single-threaded; build one per thread.

use std::fmt;

use thiserror::Error;

/// Extents of a rank-2 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn extents(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.rows, self.cols)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: value {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward root must be scalar, got shape {0}")]
    NonScalarRoot(Shape),
    #[error("tensor {0} does not belong to this tape")]
    ForeignTensor(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
    shape: Shape,
}

impl Tensor {
    pub fn node_id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    /// Sum collapsing the given axis.
    SumAxis(usize, Axis),
    Square(usize),
    AbsPow(usize, f64),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    Concat(Vec<usize>, Axis),
    Slice {
        src: usize,
        axis: Axis,
        start: usize,
    },
    Broadcast(usize),
    RowNorm(usize),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of evaluated operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: a,
            right: b,
        });
    }
    Ok(())
}

/// `c (m x n) += a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: slice lengths were checked by the callers against m, k, n and
    // the strides describe row-major or transposed row-major layouts within
    // those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major matrix product `a (m x k) * b (k x n)`.
pub fn matmul_plain(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, a, k as isize, 1, b, n as isize, 1, &mut c, 0.0);
    c
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

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.len(), value.len());
        let id = self.nodes.len();
        let grad = if requires_grad {
            vec![0.0; value.len()]
        } else {
            Vec::new()
        };
        self.nodes.push(Node {
            shape,
            value,
            grad,
            op,
            requires_grad,
        });
        Tensor { id, shape }
    }

    fn node(&self, t: Tensor) -> Result<&Node> {
        self.nodes
            .get(t.id)
            .filter(|n| n.shape == t.shape)
            .ok_or(AutodiffError::ForeignTensor(t.id))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn leaf(&mut self, shape: Shape, data: Vec<f64>, requires_grad: bool, op: &'static str) -> Result<Tensor> {
        if shape.len() != data.len() {
            return Err(AutodiffError::InvalidArgument {
                op,
                reason: format!("shape {shape} needs {} values, got {}", shape.len(), data.len()),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        self.leaf(Shape::new(rows, cols), data, true, "param")
    }

    /// Leaf treated as a constant; its gradient stays zero.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        self.leaf(Shape::new(rows, cols), data, false, "constant")
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(Shape::SCALAR, vec![v], Op::Leaf, false)
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].value
    }

    /// Value of a `1x1` tensor.
    pub fn item(&self, t: Tensor) -> f64 {
        self.nodes[t.id].value[0]
    }

    /// Accumulated gradient. Constants report zeros.
    pub fn grad(&self, t: Tensor) -> Vec<f64> {
        let n = &self.nodes[t.id];
        if n.requires_grad {
            n.grad.clone()
        } else {
            vec![0.0; n.value.len()]
        }
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    /// Zero every gradient accumulator.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        check_same(op, a.shape, b.shape)?;
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let value = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(a.shape, value, mk(a.id, b.id), rg))
    }

    fn unary(&mut self, a: Tensor, value: Vec<f64>, op: Op) -> Tensor {
        let rg = self.nodes[a.id].requires_grad;
        self.push(a.shape, value, op, rg)
    }

    fn map(&self, a: Tensor, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        Ok(self.node(a)?.value.iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.cols() != b.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: a.shape,
                right: b.shape,
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let value = matmul_plain(&self.node(a)?.value, &self.node(b)?.value, m, k, n);
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(Shape::new(m, n), value, Op::MatMul(a.id, b.id), rg))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        let src = &self.node(a)?.value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(Shape::new(c, r), value, Op::Transpose(a.id), rg))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let v = self.map(a, |x| x * c)?;
        Ok(self.unary(a, v, Op::Scale(a.id, c)))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let v = self.map(a, |x| x + c)?;
        Ok(self.unary(a, v, Op::AddScalar(a.id)))
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.node(a)?.value.iter().sum();
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(Shape::SCALAR, vec![s], Op::Sum(a.id), rg))
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        if a.shape.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let s: f64 = self.node(a)?.value.iter().sum();
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(Shape::SCALAR, vec![s / a.shape.len() as f64], Op::Mean(a.id), rg))
    }

    /// Sum collapsing `axis`: `Rows` gives a `1 x cols` row, `Cols` a `rows x 1` column.
    pub fn sum_axis(&mut self, a: Tensor, axis: Axis) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        let src = &self.node(a)?.value;
        let (shape, value) = match axis {
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for row in src.chunks_exact(c.max(1)).take(r) {
                    out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                }
                (Shape::new(1, c), out)
            }
            Axis::Cols => (
                Shape::new(r, 1),
                (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect(),
            ),
        };
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(shape, value, Op::SumAxis(a.id, axis), rg))
    }

    pub fn square(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.map(a, |x| x * x)?;
        Ok(self.unary(a, v, Op::Square(a.id)))
    }

    /// `|a|^p` elementwise.
    ///
    /// The gradient at an exact zero is taken as 0 when `p >= 1` (the
    /// subgradient for `p = 1`); for `p < 1` an exact zero input is a
    /// domain error.
    pub fn abs_pow(&mut self, a: Tensor, p: f64) -> Result<Tensor> {
        if !(p > 0.0) || !p.is_finite() {
            return Err(AutodiffError::InvalidArgument {
                op: "abs_pow",
                reason: format!("exponent must be positive and finite, got {p}"),
            });
        }
        let src = &self.node(a)?.value;
        if p < 1.0 {
            if let Some(index) = src.iter().position(|&x| x == 0.0) {
                return Err(AutodiffError::Domain {
                    op: "abs_pow",
                    index,
                    value: 0.0,
                });
            }
        }
        let v = if p == 2.0 {
            src.iter().map(|&x| x * x).collect()
        } else {
            src.iter().map(|&x| x.abs().powf(p)).collect()
        };
        Ok(self.unary(a, v, Op::AbsPow(a.id, p)))
    }

    fn check_positive(&self, op: &'static str, a: Tensor) -> Result<()> {
        if let Some((index, &value)) = self.node(a)?.value.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
            return Err(AutodiffError::Domain { op, index, value });
        }
        Ok(())
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        self.check_positive("log", a)?;
        let v = self.map(a, f64::ln)?;
        Ok(self.unary(a, v, Op::Log(a.id)))
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.map(a, f64::exp)?;
        Ok(self.unary(a, v, Op::Exp(a.id)))
    }

    pub fn sqrt(&mut self, a: Tensor) -> Result<Tensor> {
        self.check_positive("sqrt", a)?;
        let v = self.map(a, f64::sqrt)?;
        Ok(self.unary(a, v, Op::Sqrt(a.id)))
    }

    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.map(a, f64::tanh)?;
        Ok(self.unary(a, v, Op::Tanh(a.id)))
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: f64) -> Result<Tensor> {
        let v = self.map(a, |x| if x > 0.0 { x } else { slope * x })?;
        Ok(self.unary(a, v, Op::LeakyRelu(a.id, slope)))
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: Axis) -> Result<Tensor> {
        let first = *parts.first().ok_or_else(|| AutodiffError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        for p in &parts[1..] {
            let ok = match axis {
                Axis::Rows => p.cols() == first.cols(),
                Axis::Cols => p.rows() == first.rows(),
            };
            if !ok {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    left: first.shape,
                    right: p.shape,
                });
            }
        }
        let shape = match axis {
            Axis::Rows => Shape::new(parts.iter().map(|p| p.rows()).sum(), first.cols()),
            Axis::Cols => Shape::new(first.rows(), parts.iter().map(|p| p.cols()).sum()),
        };
        let mut value = Vec::with_capacity(shape.len());
        match axis {
            Axis::Rows => {
                for p in parts {
                    value.extend_from_slice(&self.node(*p)?.value);
                }
            }
            Axis::Cols => {
                for i in 0..shape.rows {
                    for p in parts {
                        let c = p.cols();
                        value.extend_from_slice(&self.node(*p)?.value[i * c..(i + 1) * c]);
                    }
                }
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(shape, value, Op::Concat(ids, axis), rg))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Tensor, axis: Axis, start: usize, len: usize) -> Result<Tensor> {
        let extent = match axis {
            Axis::Rows => a.rows(),
            Axis::Cols => a.cols(),
        };
        if start + len > extent {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{} exceeds extent {extent} of {}", start + len, a.shape),
            });
        }
        let (r, c) = (a.rows(), a.cols());
        let src = &self.node(a)?.value;
        let (shape, value) = match axis {
            Axis::Rows => (Shape::new(len, c), src[start * c..(start + len) * c].to_vec()),
            Axis::Cols => {
                let mut v = Vec::with_capacity(r * len);
                for i in 0..r {
                    v.extend_from_slice(&src[i * c + start..i * c + start + len]);
                }
                (Shape::new(r, len), v)
            }
        };
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(shape, value, Op::Slice { src: a.id, axis, start }, rg))
    }

    /// Repeat a `1 x c`, `r x 1` or `1 x 1` tensor up to `rows x cols`.
    pub fn broadcast(&mut self, a: Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        let ok = (a.rows() == rows || a.rows() == 1) && (a.cols() == cols || a.cols() == 1);
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast",
                left: a.shape,
                right: Shape::new(rows, cols),
            });
        }
        let (ar, ac) = (a.rows(), a.cols());
        let src = &self.node(a)?.value;
        let mut value = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let si = if ar == 1 { 0 } else { i };
            for j in 0..cols {
                let sj = if ac == 1 { 0 } else { j };
                value.push(src[si * ac + sj]);
            }
        }
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(Shape::new(rows, cols), value, Op::Broadcast(a.id), rg))
    }

    /// Euclidean norm of each row, as an `rows x 1` column.
    ///
    /// The gradient of a zero-norm row is taken as zero.
    pub fn row_norm(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = (a.rows(), a.cols());
        let src = &self.node(a)?.value;
        let value = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(Shape::new(r, 1), value, Op::RowNorm(a.id), rg))
    }

    /// `a + broadcast(bias)` for a `1 x cols` bias row.
    pub fn add_row(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        let b = self.broadcast(bias, a.rows(), a.cols())?;
        self.add(a, b)
    }

    /// Accumulate `d root / d t` into every gradient-tracking node.
    ///
    /// Gradients accumulate across calls; use [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, root: Tensor) -> Result<()> {
        self.node(root)?;
        if !root.shape.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root.shape));
        }
        if !self.nodes[root.id].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        local[root.id] = Some(vec![1.0]);
        for i in (0..=root.id).rev() {
            let Some(g) = local[i].take() else { continue };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            node.grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            propagate(node, &g, before, &mut local);
        }
        Ok(())
    }
}

fn acc(local: &mut [Option<Vec<f64>>], before: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    let node = &before[id];
    if !node.requires_grad {
        return;
    }
    f(local[id].get_or_insert_with(|| vec![0.0; node.value.len()]));
}

fn propagate(node: &Node, g: &[f64], before: &[Node], local: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(local, before, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            acc(local, before, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::Sub(a, b) => {
            acc(local, before, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            acc(local, before, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let vb = &before[*b].value;
            let va = &before[*a].value;
            acc(local, before, *a, |d| {
                d.iter_mut().zip(g).zip(vb).for_each(|((d, g), y)| *d += g * y)
            });
            acc(local, before, *b, |d| {
                d.iter_mut().zip(g).zip(va).for_each(|((d, g), x)| *d += g * x)
            });
        }
        Op::MatMul(a, b) => {
            let (m, k) = (before[*a].shape.rows, before[*a].shape.cols);
            let n = before[*b].shape.cols;
            if before[*a].requires_grad {
                let vb = &before[*b].value;
                // dA (m x k) += G (m x n) * B^T (n x k)
                acc(local, before, *a, |d| {
                    gemm_acc(m, n, k, g, n as isize, 1, vb, 1, n as isize, d, 1.0)
                });
            }
            if before[*b].requires_grad {
                let va = &before[*a].value;
                // dB (k x n) += A^T (k x m) * G (m x n)
                acc(local, before, *b, |d| {
                    gemm_acc(k, m, n, va, 1, k as isize, g, n as isize, 1, d, 1.0)
                });
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (before[*a].shape.rows, before[*a].shape.cols);
            acc(local, before, *a, |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Scale(a, c) => {
            acc(local, before, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c));
        }
        Op::AddScalar(a) => {
            acc(local, before, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::Sum(a) => {
            acc(local, before, *a, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean(a) => {
            let n = before[*a].value.len() as f64;
            acc(local, before, *a, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
        }
        Op::SumAxis(a, axis) => {
            let c = before[*a].shape.cols;
            let axis = *axis;
            acc(local, before, *a, |d| {
                for (idx, d) in d.iter_mut().enumerate() {
                    let (i, j) = (idx / c, idx % c);
                    *d += match axis {
                        Axis::Rows => g[j],
                        Axis::Cols => g[i],
                    };
                }
            });
        }
        Op::Square(a) => {
            let x = &before[*a].value;
            acc(local, before, *a, |d| {
                d.iter_mut().zip(g).zip(x).for_each(|((d, g), x)| *d += 2.0 * x * g)
            });
        }
        Op::AbsPow(a, p) => {
            let x = &before[*a].value;
            let p = *p;
            acc(local, before, *a, |d| {
                for ((d, g), &x) in d.iter_mut().zip(g).zip(x) {
                    if x != 0.0 {
                        let dx = if p == 2.0 {
                            2.0 * x
                        } else {
                            p * x.abs().powf(p - 1.0) * x.signum()
                        };
                        *d += g * dx;
                    }
                }
            });
        }
        Op::Log(a) => {
            let x = &before[*a].value;
            acc(local, before, *a, |d| {
                d.iter_mut().zip(g).zip(x).for_each(|((d, g), x)| *d += g / x)
            });
        }
        Op::Exp(a) => {
            acc(local, before, *a, |d| {
                d.iter_mut().zip(g).zip(y).for_each(|((d, g), y)| *d += g * y)
            });
        }
        Op::Sqrt(a) => {
            acc(local, before, *a, |d| {
                d.iter_mut().zip(g).zip(y).for_each(|((d, g), y)| *d += 0.5 * g / y)
            });
        }
        Op::Tanh(a) => {
            acc(local, before, *a, |d| {
                d.iter_mut()
                    .zip(g)
                    .zip(y)
                    .for_each(|((d, g), y)| *d += g * (1.0 - y * y))
            });
        }
        Op::LeakyRelu(a, slope) => {
            let x = &before[*a].value;
            let slope = *slope;
            acc(local, before, *a, |d| {
                for ((d, g), &x) in d.iter_mut().zip(g).zip(x) {
                    *d += if x > 0.0 { *g } else { slope * g };
                }
            });
        }
        Op::Concat(ids, axis) => {
            let rows = node.shape.rows;
            let total_cols = node.shape.cols;
            let mut offset = 0;
            for &id in ids {
                let s = before[id].shape;
                match axis {
                    Axis::Rows => {
                        let span = &g[offset * total_cols..(offset + s.rows) * total_cols];
                        acc(local, before, id, |d| d.iter_mut().zip(span).for_each(|(d, g)| *d += g));
                        offset += s.rows;
                    }
                    Axis::Cols => {
                        acc(local, before, id, |d| {
                            for i in 0..rows {
                                let src = &g[i * total_cols + offset..i * total_cols + offset + s.cols];
                                d[i * s.cols..(i + 1) * s.cols]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, g)| *d += g);
                            }
                        });
                        offset += s.cols;
                    }
                }
            }
        }
        Op::Slice { src, axis, start } => {
            let c = before[*src].shape.cols;
            let out = node.shape;
            let (axis, start) = (*axis, *start);
            acc(local, before, *src, |d| match axis {
                Axis::Rows => d[start * c..(start + out.rows) * c]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, g)| *d += g),
                Axis::Cols => {
                    for i in 0..out.rows {
                        d[i * c + start..i * c + start + out.cols]
                            .iter_mut()
                            .zip(&g[i * out.cols..(i + 1) * out.cols])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            });
        }
        Op::Broadcast(a) => {
            let s = before[*a].shape;
            let out = node.shape;
            acc(local, before, *a, |d| {
                for i in 0..out.rows {
                    let si = if s.rows == 1 { 0 } else { i };
                    for j in 0..out.cols {
                        let sj = if s.cols == 1 { 0 } else { j };
                        d[si * s.cols + sj] += g[i * out.cols + j];
                    }
                }
            });
        }
        Op::RowNorm(a) => {
            let x = &before[*a].value;
            let c = before[*a].shape.cols;
            acc(local, before, *a, |d| {
                for (i, (&gi, &ni)) in g.iter().zip(y).enumerate() {
                    if ni > 0.0 {
                        for j in 0..c {
                            d[i * c + j] += gi * x[i * c + j] / ni;
                        }
                    }
                }
            });
        }
    }
}

/// Maximum over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
///
/// `f` must build a scalar from its input on the given tape. A NaN anywhere
/// makes the result NaN.
pub fn grad_check<F>(f: F, x: &[f64], shape: Shape, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Tensor) -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            reason: format!("step must be positive, got {h}"),
        });
    }
    let eval = |point: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let t = tape.constant(shape.rows, shape.cols, point)?;
        let out = f(&mut tape, t)?;
        Ok(tape.item(out))
    };
    let mut tape = Tape::new();
    let t = tape.param(shape.rows, shape.cols, x.to_vec())?;
    let out = f(&mut tape, t)?;
    tape.backward(out)?;
    let analytic = tape.grad(t);

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if err.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn square_forward_and_backward() {
        let mut t = Tape::new();
        let x = t.param(1, 1, vec![3.0]).unwrap();
        let y = t.square(x).unwrap();
        assert_eq!(t.item(y), 9.0);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x), vec![6.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let eye = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = t.constant(2, 1, vec![-1.5, 4.25]).unwrap();
        let out = t.matmul(eye, v).unwrap();
        assert_eq!(t.value(out), &[-1.5, 4.25]);
    }

    #[test]
    fn abs_pow_unit_deviation() {
        let mut t = Tape::new();
        let a = t.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let b = t.constant(1, 2, vec![1.0, 3.0]).unwrap();
        let d = t.sub(a, b).unwrap();
        let p = t.abs_pow(d, 2.0).unwrap();
        let s = t.sum(p).unwrap();
        assert_eq!(t.item(s), 1.0);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.param(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let xx = t.mul(x, x).unwrap();
        let s = t.sum(xx).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), vec![2.0, 4.0, 6.0]);

        let mut t = Tape::new();
        let x = t.param(1, 4, vec![1.0, -2.0, 0.5, 9.0]).unwrap();
        let m = t.mean(x).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(x), vec![0.25; 4]);

        let mut t = Tape::new();
        let x = t.param(1, 1, vec![0.0]).unwrap();
        let y = t.tanh(x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x), vec![1.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t = Tape::new();
        let x = t.param(1, 1, vec![2.0]).unwrap();
        let y = t.square(x).unwrap();
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x), vec![8.0]);
        t.zero_grad();
        assert_eq!(t.grad(x), vec![0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.param(1, 2, vec![1.0, 2.0]).unwrap();
        let y = t.square(x).unwrap();
        assert_eq!(t.backward(y), Err(AutodiffError::NonScalarRoot(Shape::new(1, 2))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = t.constant(3, 2, vec![0.0; 6]).unwrap();
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(t.matmul(a, a).is_err());
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let a = t.constant(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(t.log(a), Err(AutodiffError::Domain { index: 1, .. })));
        assert!(matches!(t.sqrt(a), Err(AutodiffError::Domain { .. })));
        assert!(matches!(t.abs_pow(a, 0.5), Err(AutodiffError::Domain { .. })));
        assert!(t.abs_pow(a, 1.0).is_ok());
        assert!(t.abs_pow(a, 0.0).is_err());
    }

    #[test]
    fn abs_pow_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.param(1, 2, vec![0.0, -2.0]).unwrap();
        let y = t.abs_pow(x, 3.0).unwrap();
        let y1 = t.abs_pow(x, 1.0).unwrap();
        let s = t.add(y, y1).unwrap();
        let s = t.sum(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), vec![0.0, -13.0]);
    }

    #[test]
    fn constant_subgraph_leaves_zero_grad() {
        let mut t = Tape::new();
        let c = t.param(1, 2, vec![1.0, 2.0]).unwrap();
        let x = t.param(1, 2, vec![3.0, 4.0]).unwrap();
        // Unused branch on c.
        let _ = t.exp(c).unwrap();
        let zero = t.scale(c, 0.0).unwrap();
        let xx = t.square(x).unwrap();
        let y = t.add(xx, zero).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(c), vec![0.0, 0.0]);
        assert_eq!(t.grad(x), vec![6.0, 8.0]);
    }

    #[test]
    fn constants_have_no_grad() {
        let mut t = Tape::new();
        let c = t.constant(1, 1, vec![5.0]).unwrap();
        let x = t.param(1, 1, vec![2.0]).unwrap();
        let y = t.mul(c, x).unwrap();
        t.backward(y).unwrap();
        assert!(!t.requires_grad(c));
        assert_eq!(t.grad(c), vec![0.0]);
        assert_eq!(t.grad(x), vec![5.0]);
    }

    #[test]
    fn grad_check_examples() {
        let sq = |t: &mut Tape, x: Tensor| t.square(x).and_then(|y| t.sum(y));
        let e = grad_check(sq, &[3.0], Shape::SCALAR, 1e-3).unwrap();
        assert!(e < 1e-6, "{e}");
        let ex = |t: &mut Tape, x: Tensor| t.exp(x).and_then(|y| t.sum(y));
        let e = grad_check(ex, &[0.0], Shape::SCALAR, 1e-3).unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn grad_check_propagates_nan() {
        let f = |t: &mut Tape, x: Tensor| t.scale(x, f64::NAN).and_then(|y| t.sum(y));
        assert!(grad_check(f, &[1.0], Shape::SCALAR, 1e-3).unwrap().is_nan());
    }

    #[test]
    fn concat_slice_broadcast_roundtrip() {
        let mut t = Tape::new();
        let a = t.param(2, 1, vec![1.0, 2.0]).unwrap();
        let b = t.param(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = t.concat(&[a, b], Axis::Cols).unwrap();
        assert_eq!(t.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = t.slice(c, Axis::Cols, 1, 2).unwrap();
        assert_eq!(t.value(s), t.value(b).to_vec().as_slice());
        let r = t.concat(&[b, b], Axis::Rows).unwrap();
        assert_eq!(r.shape(), Shape::new(4, 2));
        let bias = t.param(1, 2, vec![10.0, 20.0]).unwrap();
        let bb = t.broadcast(bias, 3, 2).unwrap();
        assert_eq!(t.value(bb), &[10.0, 20.0, 10.0, 20.0, 10.0, 20.0]);
        let tot = t.sum(bb).unwrap();
        t.backward(tot).unwrap();
        assert_eq!(t.grad(bias), vec![3.0, 3.0]);
        assert!(t.broadcast(b, 3, 2).is_err());
    }

    #[test]
    fn row_norm_zero_row_has_zero_grad() {
        let mut t = Tape::new();
        let x = t.param(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let n = t.row_norm(x).unwrap();
        assert_eq!(t.value(n), &[5.0, 0.0]);
        let s = t.sum(n).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(x);
        assert!(approx(g[0], 0.6, 1e-15) && approx(g[1], 0.8, 1e-15));
        assert_eq!(&g[2..], &[0.0, 0.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_values() {
        let mut t = Tape::new();
        let a = t.param(1, 2, vec![1.0, 2.0]).unwrap();
        let b = t.param(2, 1, vec![3.0, 4.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.item(c), 11.0);
        t.backward(c).unwrap();
        assert_eq!(t.grad(a), vec![3.0, 4.0]);
        assert_eq!(t.grad(b), vec![1.0, 2.0]);
    }
}
