//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its value; `backward` walks the
//! nodes in reverse creation order and pushes gradients into the inputs.
//! A tape is built for one mini-batch and then dropped.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Shape;
use crate::scalar::Scalar;

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Rows whose L2 norm falls below this are normalized to the zero vector.
pub const NORM_EPSILON: f64 = 1e-12;

// rows of the similarity matrix materialized at once by `lse_products`
const LSE_CHUNK_ROWS: usize = 256;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: dimension mismatch between {left} and {right}")]
    Dimension {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: invalid axis {axis} for shape {shape}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Shape,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type GraphResult<T> = Result<T, GraphError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise activation applied by [`Tape::dense`] and [`Tape::activate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    #[serde(alias = "identity")]
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    Log,
    Exp,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    AddRow(Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, S),
    Clamp { x: Var, lo: S, hi: S },
    Sum { x: Var, axis: Option<usize>, mean: bool },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Gather { table: Var, rows: Vec<usize> },
    PairProduct { x: Var, fields: usize, dim: usize, inner: bool },
    Dense { x: Var, weight: Var, bias: Var, act: Activation },
    NormalizeRows { x: Var, norms: Vec<S> },
    LseProducts { a: Var, b: Var, scale: S },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Unary(UnaryOp::LeakyRelu, _) => "leaky_relu",
            Op::Unary(UnaryOp::Relu, _) => "relu",
            Op::Unary(UnaryOp::Tanh, _) => "tanh",
            Op::Unary(UnaryOp::Sigmoid, _) => "sigmoid",
            Op::Unary(UnaryOp::Log, _) => "log",
            Op::Unary(UnaryOp::Exp, _) => "exp",
            Op::Scale(..) => "scale",
            Op::Clamp { .. } => "clamp",
            Op::Sum { mean: false, .. } => "sum",
            Op::Sum { mean: true, .. } => "mean",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::PairProduct { inner: false, .. } => "pair_hadamard",
            Op::PairProduct { inner: true, .. } => "pair_inner",
            Op::Dense { .. } => "dense",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::LseProducts { .. } => "lse_products",
        }
    }
}

struct Node<S> {
    shape: Shape,
    value: Vec<S>,
    // empty until the first gradient contribution arrives
    grad: Vec<S>,
    op: Op<S>,
}

/// Reverse-mode computation graph over dense `S` arrays.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
    retain_grads: bool,
    leaky_backward_slope: S,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
            retain_grads: true,
            leaky_backward_slope: S::lit(LEAKY_RELU_SLOPE),
        }
    }

    /// When disabled, gradients of interior nodes are released as soon as
    /// they have been propagated. Leaf gradients are always kept.
    pub fn set_retain_grads(&mut self, retain: bool) {
        self.retain_grads = retain;
    }

    /// Makes the leaky-ReLU backward rule use `slope` while the forward pass
    /// keeps the real one. Only useful as a negative control for gradient checks.
    #[doc(hidden)]
    pub fn corrupt_leaky_relu_backward(&mut self, slope: f64) {
        self.leaky_backward_slope = S::lit(slope);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    /// First element of `v`; the value itself when `v` is scalar-shaped.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the backward root with respect to `v` (zeros if `v` was
    /// never reached or backward has not run yet).
    pub fn grad(&self, v: Var) -> Cow<'_, [S]> {
        let node = &self.nodes[v.0];
        if node.grad.is_empty() {
            Cow::Owned(vec![S::zero(); node.value.len()])
        } else {
            Cow::Borrowed(&node.grad)
        }
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn is_finite(&self, v: Var) -> bool {
        self.nodes[v.0].value.iter().all(|x| x.is_finite())
    }

    fn push(&mut self, shape: Shape, value: Vec<S>, op: Op<S>) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: Vec::new(),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameters, inputs and constants all enter the tape as leaves.
    pub fn leaf(&mut self, shape: Shape, value: Vec<S>) -> GraphResult<Var> {
        if shape.numel() != value.len() {
            return Err(GraphError::Contract(format!(
                "leaf of shape {shape} given {} values",
                value.len()
            )));
        }
        Ok(self.push(shape, value, Op::Leaf))
    }

    pub fn scalar_leaf(&mut self, x: S) -> Var {
        self.push(Shape::scalar(), vec![x], Op::Leaf)
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> GraphResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 2 || sb.rank() != 2 || sa.cols() != sb.rows() {
            return Err(GraphError::Dimension {
                op: "matmul",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let (m, k, n) = (sa.rows(), sa.cols(), sb.cols());
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), self.value(a), false, self.value(b), false, S::zero(), &mut out);
        Ok(self.push(Shape::matrix(m, n), out, Op::MatMul(a, b)))
    }

    /// `x [m x n] + row [n]`, the row repeated for every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> GraphResult<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sx.rank() != 2 || sr.numel() != sx.cols() || sr.rows() != 1 {
            return Err(GraphError::Dimension {
                op: "add_row",
                left: sx.clone(),
                right: sr.clone(),
            });
        }
        let shape = sx.clone();
        let n = shape.cols();
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|xs| xs.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        Ok(self.push(shape, out, Op::AddRow(x, row)))
    }

    /// Fully connected layer `act(x W + b)` recorded as one node.
    ///
    /// `x [m x in]`, `W [in x out]`, `b [out]`. Equivalent to
    /// `matmul` + `add_row` + the activation, with a third of the memory.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var, act: Activation) -> GraphResult<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(weight), self.shape(bias));
        if sx.rank() != 2 || sw.rank() != 2 || sx.cols() != sw.rows() {
            return Err(GraphError::Dimension {
                op: "dense",
                left: sx.clone(),
                right: sw.clone(),
            });
        }
        if sb.numel() != sw.cols() {
            return Err(GraphError::Dimension {
                op: "dense",
                left: sw.clone(),
                right: sb.clone(),
            });
        }
        let (m, k, n) = (sx.rows(), sx.cols(), sw.cols());
        let b = self.value(bias);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(b);
        }
        S::gemm(m, k, n, S::one(), self.value(x), false, self.value(weight), false, S::one(), &mut out);
        let slope = S::lit(LEAKY_RELU_SLOPE);
        for v in out.iter_mut() {
            *v = activate(act, *v, slope);
        }
        Ok(self.push(Shape::matrix(m, n), out, Op::Dense { x, weight, bias, act }))
    }

    // ------------------------------------------------------------ elementwise

    fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> GraphResult<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = if sa == sb || sb.is_scalar() {
            sa.clone()
        } else if sa.is_scalar() {
            sb.clone()
        } else {
            return Err(GraphError::Dimension {
                op: Op::<S>::Binary(kind, a, b).name(),
                left: sa.clone(),
                right: sb.clone(),
            });
        };
        let (va, vb) = (self.value(a), self.value(b));
        let n = shape.numel();
        let pick = |v: &[S], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let out = (0..n)
            .map(|i| {
                let (x, y) = (pick(va, i), pick(vb, i));
                match kind {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                }
            })
            .collect();
        Ok(self.push(shape, out, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> GraphResult<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> GraphResult<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> GraphResult<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, x: Var) -> GraphResult<Var> {
        let slope = S::lit(LEAKY_RELU_SLOPE);
        let xs = self.value(x);
        if kind == UnaryOp::Log {
            if let Some(bad) = xs.iter().find(|v| !(**v > S::zero())) {
                return Err(GraphError::Domain {
                    op: "log",
                    detail: format!("non-positive argument {bad}"),
                });
            }
        }
        let out = xs
            .iter()
            .map(|&v| match kind {
                UnaryOp::LeakyRelu => activate(Activation::LeakyRelu, v, slope),
                UnaryOp::Relu => activate(Activation::Relu, v, slope),
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Sigmoid => sigmoid(v),
                UnaryOp::Log => v.ln(),
                UnaryOp::Exp => v.exp(),
            })
            .collect();
        let shape = self.shape(x).clone();
        Ok(self.push(shape, out, Op::Unary(kind, x)))
    }

    pub fn leaky_relu(&mut self, x: Var) -> GraphResult<Var> {
        self.unary(UnaryOp::LeakyRelu, x)
    }

    pub fn relu(&mut self, x: Var) -> GraphResult<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> GraphResult<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> GraphResult<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> GraphResult<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> GraphResult<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    /// Applies `act`; `Activation::None` returns `x` unchanged.
    pub fn activate(&mut self, act: Activation, x: Var) -> GraphResult<Var> {
        match act {
            Activation::LeakyRelu => self.leaky_relu(x),
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::None => Ok(x),
        }
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).clone();
        self.push(shape, out, Op::Scale(x, c))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        let shape = self.shape(x).clone();
        self.push(shape, out, Op::Clamp { x, lo, hi })
    }

    // ------------------------------------------------------------- reductions

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> GraphResult<Var> {
        let shape = self.shape(x).clone();
        let op = if mean { "mean" } else { "sum" };
        let xs = self.value(x);
        let (out_shape, out): (Shape, Vec<S>) = match (axis, shape.rank()) {
            (None, _) => {
                let total: S = xs.iter().copied().sum();
                let n = S::from_usize(xs.len()).unwrap();
                (Shape::scalar(), vec![if mean { total / n } else { total }])
            }
            (Some(0), 1) => {
                let total: S = xs.iter().copied().sum();
                let n = S::from_usize(xs.len()).unwrap();
                (Shape::scalar(), vec![if mean { total / n } else { total }])
            }
            (Some(0), 2) => {
                let (m, n) = (shape.rows(), shape.cols());
                let mut acc = vec![S::zero(); n];
                for row in xs.chunks(n) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                if mean {
                    let d = S::from_usize(m).unwrap();
                    acc.iter_mut().for_each(|a| *a /= d);
                }
                (Shape::vector(n), acc)
            }
            (Some(1), 2) => {
                let n = shape.cols();
                let d = S::from_usize(n).unwrap();
                let acc = xs
                    .chunks(n)
                    .map(|row| {
                        let s: S = row.iter().copied().sum();
                        if mean {
                            s / d
                        } else {
                            s
                        }
                    })
                    .collect::<Vec<_>>();
                (Shape::vector(shape.rows()), acc)
            }
            (Some(axis), _) => return Err(GraphError::Axis { op, axis, shape }),
        };
        Ok(self.push(out_shape, out, Op::Sum { x, axis, mean }))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> GraphResult<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> GraphResult<Var> {
        self.reduce(x, axis, true)
    }

    // -------------------------------------------------------------- structure

    /// Concatenates along `axis` (0 = rows, 1 = columns for matrices).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> GraphResult<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).clone(),
            None => return Err(GraphError::Contract("concat of zero parts".into())),
        };
        if axis >= first.rank() {
            return Err(GraphError::Axis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        for &p in &parts[1..] {
            let s = self.shape(p);
            let agrees = s.rank() == first.rank()
                && s.dims()
                    .iter()
                    .zip(first.dims())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !agrees {
                return Err(GraphError::Dimension {
                    op: "concat",
                    left: first,
                    right: s.clone(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).dims()[axis]).sum();
        let (shape, out) = if first.rank() == 1 || axis == 0 {
            let mut out = Vec::new();
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
            let shape = if first.rank() == 1 {
                Shape::vector(total)
            } else {
                Shape::matrix(total, first.cols())
            };
            (shape, out)
        } else {
            let m = first.rows();
            let mut out = Vec::with_capacity(m * total);
            for r in 0..m {
                for &p in parts {
                    let c = self.shape(p).cols();
                    out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
                }
            }
            (Shape::matrix(m, total), out)
        };
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> GraphResult<Var> {
        if shape.numel() != self.shape(x).numel() {
            return Err(GraphError::Dimension {
                op: "reshape",
                left: self.shape(x).clone(),
                right: shape,
            });
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x)))
    }

    /// Row gather from `table [R x d]`. `rows` holds `batch * f` row ids in
    /// instance-major order; the result is `[batch x f*d]`, each output row
    /// the concatenation of its `f` table rows.
    pub fn gather(&mut self, table: Var, rows: &[usize], batch: usize) -> GraphResult<Var> {
        let st = self.shape(table).clone();
        if st.rank() != 2 || batch == 0 || rows.is_empty() || rows.len() % batch != 0 {
            return Err(GraphError::Contract(format!(
                "gather of {} rows into a batch of {batch} from table {st}",
                rows.len()
            )));
        }
        let (r, d) = (st.rows(), st.cols());
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(GraphError::Contract(format!(
                "gather index {bad} out of range for table {st}"
            )));
        }
        let f = rows.len() / batch;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Shape::matrix(batch, f * d),
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    fn pair_product(&mut self, x: Var, fields: usize, dim: usize, inner: bool) -> GraphResult<Var> {
        let sx = self.shape(x).clone();
        if sx.rank() != 2 || fields == 0 || dim == 0 || sx.cols() != fields * dim {
            return Err(GraphError::Contract(format!(
                "pairwise product expects [B x {fields}*{dim}], got {sx}"
            )));
        }
        let b = sx.rows();
        let pairs = fields * (fields + 1) / 2;
        let width = if inner { pairs } else { pairs * dim };
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * width);
        for row in xv.chunks(fields * dim) {
            for i in 0..fields {
                let ei = &row[i * dim..(i + 1) * dim];
                for j in i..fields {
                    let ej = &row[j * dim..(j + 1) * dim];
                    if inner {
                        out.push(ei.iter().zip(ej).map(|(&a, &c)| a * c).sum());
                    } else {
                        out.extend(ei.iter().zip(ej).map(|(&a, &c)| a * c));
                    }
                }
            }
        }
        Ok(self.push(
            Shape::matrix(b, width),
            out,
            Op::PairProduct {
                x,
                fields,
                dim,
                inner,
            },
        ))
    }

    /// Hadamard products `e_i * e_j` for all field pairs `i <= j`
    /// (lexicographic pair order), concatenated per row.
    pub fn pair_hadamard(&mut self, x: Var, fields: usize, dim: usize) -> GraphResult<Var> {
        self.pair_product(x, fields, dim, false)
    }

    /// Inner products `<e_i, e_j>` for all field pairs `i <= j`, same order
    /// as [`Tape::pair_hadamard`].
    pub fn pair_inner(&mut self, x: Var, fields: usize, dim: usize) -> GraphResult<Var> {
        self.pair_product(x, fields, dim, true)
    }

    /// Scales every row to unit L2 norm. Rows with norm below
    /// [`NORM_EPSILON`] map to zero and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> GraphResult<Var> {
        let sx = self.shape(x).clone();
        if sx.rank() != 2 {
            return Err(GraphError::Contract(format!("normalize_rows expects a matrix, got {sx}")));
        }
        let n = sx.cols();
        let eps = S::lit(NORM_EPSILON);
        let mut norms = Vec::with_capacity(sx.rows());
        let mut out = Vec::with_capacity(sx.numel());
        for row in self.value(x).chunks(n) {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm < eps {
                norms.push(S::zero());
                out.extend(std::iter::repeat(S::zero()).take(n));
            } else {
                norms.push(norm);
                out.extend(row.iter().map(|&v| v / norm));
            }
        }
        Ok(self.push(sx, out, Op::NormalizeRows { x, norms }))
    }

    /// `out_i = log sum_j exp(scale * <a_i, b_j>)` for `a [m x d]`, `b [n x d]`.
    ///
    /// Stabilized by subtracting the row maximum; the `m x n` product matrix
    /// is only materialized a block of rows at a time.
    pub fn lse_products(&mut self, a: Var, b: Var, scale: S) -> GraphResult<Var> {
        let (sa, sb) = (self.shape(a).clone(), self.shape(b).clone());
        if sa.rank() != 2 || sb.rank() != 2 || sa.cols() != sb.cols() {
            return Err(GraphError::Dimension {
                op: "lse_products",
                left: sa,
                right: sb,
            });
        }
        let (m, d, n) = (sa.rows(), sa.cols(), sb.rows());
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m);
        let mut block = vec![S::zero(); LSE_CHUNK_ROWS.min(m) * n];
        for start in (0..m).step_by(LSE_CHUNK_ROWS) {
            let rows = LSE_CHUNK_ROWS.min(m - start);
            let blk = &mut block[..rows * n];
            S::gemm(rows, d, n, scale, &av[start * d..(start + rows) * d], false, bv, true, S::zero(), blk);
            for row in blk.chunks(n) {
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let s: S = row.iter().map(|&v| (v - max).exp()).sum();
                out.push(max + s.ln());
            }
        }
        Ok(self.push(Shape::vector(m), out, Op::LseProducts { a, b, scale }))
    }

    // --------------------------------------------------------------- backward

    /// Accumulates `d root / d node` into every node reachable from `root`.
    ///
    /// `root` must be scalar-shaped, and a tape supports a single backward pass.
    pub fn backward(&mut self, root: Var) -> GraphResult<()> {
        if self.backward_done {
            return Err(GraphError::Contract(
                "backward already ran on this tape; build a fresh tape per pass".into(),
            ));
        }
        if !self.shape(root).is_scalar() {
            return Err(GraphError::Contract(format!(
                "backward root must be scalar, got shape {}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        self.nodes[root.0].grad = vec![S::one()];
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if node.grad.is_empty() || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut node.grad);
            propagate(before, &rest[0], &g, self.leaky_backward_slope);
            if self.retain_grads {
                rest[0].grad = g;
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ helpers

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn activate<S: Scalar>(act: Activation, x: S, slope: S) -> S {
    match act {
        Activation::LeakyRelu => {
            if x > S::zero() {
                x
            } else {
                x * slope
            }
        }
        Activation::Relu => {
            if x > S::zero() {
                x
            } else {
                S::zero()
            }
        }
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => sigmoid(x),
        Activation::None => x,
    }
}

/// Derivative of `act` expressed through its output `y`.
fn activation_slope<S: Scalar>(act: Activation, y: S, leaky_slope: S) -> S {
    match act {
        Activation::LeakyRelu => {
            if y > S::zero() {
                S::one()
            } else {
                leaky_slope
            }
        }
        Activation::Relu => {
            if y > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
        Activation::Tanh => S::one() - y * y,
        Activation::Sigmoid => y * (S::one() - y),
        Activation::None => S::one(),
    }
}

fn accumulate<S: Scalar>(nodes: &mut [Node<S>], v: Var, contrib: &[S]) {
    let node = &mut nodes[v.0];
    if node.grad.is_empty() {
        node.grad = contrib.to_vec();
    } else {
        for (g, &c) in node.grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }
}

fn grad_slot<S: Scalar>(nodes: &mut [Node<S>], v: Var) -> &mut [S] {
    let node = &mut nodes[v.0];
    if node.grad.is_empty() {
        node.grad = vec![S::zero(); node.value.len()];
    }
    &mut node.grad
}

/// Reduces a full-size contribution onto a possibly scalar-broadcast operand.
fn accumulate_broadcast<S: Scalar>(nodes: &mut [Node<S>], v: Var, contrib: Vec<S>) {
    if nodes[v.0].value.len() == 1 && contrib.len() != 1 {
        let total: S = contrib.into_iter().sum();
        accumulate(nodes, v, &[total]);
    } else {
        accumulate(nodes, v, &contrib);
    }
}

fn propagate<S: Scalar>(inputs: &mut [Node<S>], node: &Node<S>, g: &[S], leaky_slope: S) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (inputs[a.0].shape.rows(), inputs[a.0].shape.cols());
            let n = inputs[b.0].shape.cols();
            let mut ga = vec![S::zero(); m * k];
            S::gemm(m, n, k, S::one(), g, false, &inputs[b.0].value, true, S::zero(), &mut ga);
            let mut gb = vec![S::zero(); k * n];
            S::gemm(k, m, n, S::one(), &inputs[a.0].value, true, g, false, S::zero(), &mut gb);
            accumulate(inputs, *a, &ga);
            accumulate(inputs, *b, &gb);
        }
        Op::Binary(kind, a, b) => {
            let pick = |v: &[S], i: usize| if v.len() == 1 { v[0] } else { v[i] };
            let (ga, gb): (Vec<S>, Vec<S>) = {
                let (va, vb) = (&inputs[a.0].value, &inputs[b.0].value);
                match kind {
                    BinaryOp::Add => (g.to_vec(), g.to_vec()),
                    BinaryOp::Sub => (g.to_vec(), g.iter().map(|&x| -x).collect()),
                    BinaryOp::Mul => (
                        g.iter().enumerate().map(|(i, &gi)| gi * pick(vb, i)).collect(),
                        g.iter().enumerate().map(|(i, &gi)| gi * pick(va, i)).collect(),
                    ),
                }
            };
            accumulate_broadcast(inputs, *a, ga);
            accumulate_broadcast(inputs, *b, gb);
        }
        Op::AddRow(x, row) => {
            let n = node.shape.cols();
            let mut gr = vec![S::zero(); n];
            for chunk in g.chunks(n) {
                for (acc, &v) in gr.iter_mut().zip(chunk) {
                    *acc += v;
                }
            }
            accumulate(inputs, *x, g);
            accumulate(inputs, *row, &gr);
        }
        Op::Unary(kind, x) => {
            let xv = &inputs[x.0].value;
            let gx: Vec<S> = g
                .iter()
                .zip(xv)
                .zip(y)
                .map(|((&gi, &xi), &yi)| {
                    gi * match kind {
                        UnaryOp::LeakyRelu => {
                            if xi > S::zero() {
                                S::one()
                            } else {
                                leaky_slope
                            }
                        }
                        UnaryOp::Relu => {
                            if xi > S::zero() {
                                S::one()
                            } else {
                                S::zero()
                            }
                        }
                        UnaryOp::Tanh => S::one() - yi * yi,
                        UnaryOp::Sigmoid => yi * (S::one() - yi),
                        UnaryOp::Log => S::one() / xi,
                        UnaryOp::Exp => yi,
                    }
                })
                .collect();
            accumulate(inputs, *x, &gx);
        }
        Op::Scale(x, c) => {
            let gx: Vec<S> = g.iter().map(|&v| v * *c).collect();
            accumulate(inputs, *x, &gx);
        }
        Op::Clamp { x, lo, hi } => {
            let xv = &inputs[x.0].value;
            let gx: Vec<S> = g
                .iter()
                .zip(xv)
                .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { S::zero() })
                .collect();
            accumulate(inputs, *x, &gx);
        }
        Op::Sum { x, axis, mean } => {
            let shape = inputs[x.0].shape.clone();
            let count = match (axis, shape.rank()) {
                (None, _) | (Some(0), 1) => shape.numel(),
                (Some(0), _) => shape.rows(),
                _ => shape.cols(),
            };
            let factor = if *mean {
                S::one() / S::from_usize(count).unwrap()
            } else {
                S::one()
            };
            let gx: Vec<S> = match (axis, shape.rank()) {
                (None, _) | (Some(0), 1) => vec![g[0] * factor; shape.numel()],
                (Some(0), _) => {
                    let n = shape.cols();
                    (0..shape.numel()).map(|i| g[i % n] * factor).collect()
                }
                _ => {
                    let n = shape.cols();
                    (0..shape.numel()).map(|i| g[i / n] * factor).collect()
                }
            };
            accumulate(inputs, *x, &gx);
        }
        Op::Concat { parts, axis } => {
            if node.shape.rank() == 1 || *axis == 0 {
                let mut offset = 0;
                for &p in parts {
                    let len = inputs[p.0].value.len();
                    accumulate(inputs, p, &g[offset..offset + len]);
                    offset += len;
                }
            } else {
                let total = node.shape.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = inputs[p.0].shape.cols();
                    let gp: Vec<S> = g
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + c].iter().copied())
                        .collect();
                    accumulate(inputs, p, &gp);
                    offset += c;
                }
            }
        }
        Op::Reshape(x) => accumulate(inputs, *x, g),
        Op::Gather { table, rows } => {
            let d = inputs[table.0].shape.cols();
            let slot = grad_slot(inputs, *table);
            for (k, &r) in rows.iter().enumerate() {
                let src = &g[k * d..(k + 1) * d];
                for (dst, &v) in slot[r * d..(r + 1) * d].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        Op::PairProduct {
            x,
            fields,
            dim,
            inner,
        } => {
            let (f, d) = (*fields, *dim);
            let xv = &inputs[x.0].value;
            let width = node.shape.cols();
            let mut gx = vec![S::zero(); xv.len()];
            for ((row, grow), gout) in xv.chunks(f * d).zip(gx.chunks_mut(f * d)).zip(g.chunks(width)) {
                let mut p = 0;
                for i in 0..f {
                    for j in i..f {
                        for t in 0..d {
                            let gp = if *inner { gout[p] } else { gout[p * d + t] };
                            let (xi, xj) = (row[i * d + t], row[j * d + t]);
                            grow[i * d + t] += gp * xj;
                            grow[j * d + t] += gp * xi;
                        }
                        p += 1;
                    }
                }
            }
            accumulate(inputs, *x, &gx);
        }
        Op::Dense { x, weight, bias, act } => {
            let (m, k) = (inputs[x.0].shape.rows(), inputs[x.0].shape.cols());
            let n = node.shape.cols();
            let gpre: Vec<S> = g
                .iter()
                .zip(y)
                .map(|(&gi, &yi)| gi * activation_slope(*act, yi, leaky_slope))
                .collect();
            let mut gx = vec![S::zero(); m * k];
            S::gemm(m, n, k, S::one(), &gpre, false, &inputs[weight.0].value, true, S::zero(), &mut gx);
            let mut gw = vec![S::zero(); k * n];
            S::gemm(k, m, n, S::one(), &inputs[x.0].value, true, &gpre, false, S::zero(), &mut gw);
            let mut gb = vec![S::zero(); n];
            for row in gpre.chunks(n) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            accumulate(inputs, *x, &gx);
            accumulate(inputs, *weight, &gw);
            accumulate(inputs, *bias, &gb);
        }
        Op::NormalizeRows { x, norms } => {
            let n = node.shape.cols();
            let mut gx = vec![S::zero(); y.len()];
            for (r, &norm) in norms.iter().enumerate() {
                if norm == S::zero() {
                    continue;
                }
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for t in 0..n {
                    gx[r * n + t] = (gr[t] - yr[t] * dot) / norm;
                }
            }
            accumulate(inputs, *x, &gx);
        }
        Op::LseProducts { a, b, scale } => {
            let (m, d) = (inputs[a.0].shape.rows(), inputs[a.0].shape.cols());
            let n = inputs[b.0].shape.rows();
            let mut ga = vec![S::zero(); m * d];
            let mut gb = vec![S::zero(); n * d];
            {
                let (av, bv) = (&inputs[a.0].value, &inputs[b.0].value);
                let mut block = vec![S::zero(); LSE_CHUNK_ROWS.min(m) * n];
                for start in (0..m).step_by(LSE_CHUNK_ROWS) {
                    let rows = LSE_CHUNK_ROWS.min(m - start);
                    let blk = &mut block[..rows * n];
                    let a_blk = &av[start * d..(start + rows) * d];
                    S::gemm(rows, d, n, *scale, a_blk, false, bv, true, S::zero(), blk);
                    // softmax weights times the upstream gradient and the scale
                    for (r, row) in blk.chunks_mut(n).enumerate() {
                        let lse = y[start + r];
                        let w = g[start + r] * *scale;
                        for v in row.iter_mut() {
                            *v = (*v - lse).exp() * w;
                        }
                    }
                    S::gemm(rows, n, d, S::one(), blk, false, bv, false, S::zero(), &mut ga[start * d..(start + rows) * d]);
                    S::gemm(n, rows, d, S::one(), blk, true, a_blk, false, S::one(), &mut gb);
                }
            }
            accumulate(inputs, *a, &ga);
            accumulate(inputs, *b, &gb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_row_times_column() {
        let mut t = Tape::<f64>::new();
        let i = t.leaf(Shape::matrix(2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = t.leaf(Shape::matrix(2, 1), vec![3.0, 4.0]).unwrap();
        let out = t.matmul(i, v).unwrap();
        assert_eq!(t.value(out), &[3.0, 4.0]);
        let r = t.leaf(Shape::matrix(1, 2), vec![1.0, 2.0]).unwrap();
        let out = t.matmul(r, v).unwrap();
        assert_eq!(t.value(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Shape::matrix(2, 3), vec![0.0; 6]).unwrap();
        let b = t.leaf(Shape::matrix(2, 3), vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2x3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn leaky_relu_and_sigmoid_values() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Shape::vector(3), vec![-1.0, 0.0, 2.0]).unwrap();
        let y = t.leaky_relu(x).unwrap();
        assert_eq!(t.value(y), &[-0.01, 0.0, 2.0]);
        let z = t.scalar_leaf(0.0);
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.scalar(s), 0.5);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Shape::vector(2), vec![1.0, 0.0]).unwrap();
        assert!(matches!(t.log(x), Err(GraphError::Domain { op: "log", .. })));
    }

    #[test]
    fn binary_requires_equal_shapes_or_scalar() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Shape::vector(3), vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.leaf(Shape::vector(2), vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.add(a, b), Err(GraphError::Dimension { .. })));
        let c = t.scalar_leaf(2.0);
        let prod = t.mul(a, c).unwrap();
        assert_eq!(t.value(prod), &[2.0, 4.0, 6.0]);
        let diff = t.sub(c, a).unwrap();
        assert_eq!(t.value(diff), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn reductions() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Shape::vector(3), vec![1.0, 2.0, 3.0]).unwrap();
        let s = t.sum(x, None).unwrap();
        assert_eq!(t.scalar(s), 6.0);
        let y = t.leaf(Shape::vector(2), vec![2.0, 4.0]).unwrap();
        let m = t.mean(y, None).unwrap();
        assert_eq!(t.scalar(m), 3.0);
        t.backward(m).unwrap();
        assert_eq!(t.grad(y).as_ref(), &[0.5, 0.5]);
    }

    #[test]
    fn axis_reductions_on_matrix() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Shape::matrix(2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let cols = t.sum(x, Some(0)).unwrap();
        assert_eq!(t.value(cols), &[5.0, 7.0, 9.0]);
        let rows = t.mean(x, Some(1)).unwrap();
        assert_eq!(t.value(rows), &[2.0, 5.0]);
        assert!(matches!(t.sum(x, Some(2)), Err(GraphError::Axis { axis: 2, .. })));
    }

    #[test]
    fn concat_columns_and_gradient_slices() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Shape::matrix(1, 2), vec![1.0, 2.0]).unwrap();
        let b = t.leaf(Shape::matrix(1, 1), vec![3.0]).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0]);
        assert_eq!(t.shape(c), &Shape::matrix(1, 3));
        let w = t.leaf(Shape::matrix(1, 3), vec![10.0, 20.0, 30.0]).unwrap();
        let p = t.mul(c, w).unwrap();
        let s = t.sum(p, None).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).as_ref(), &[10.0, 20.0]);
        assert_eq!(t.grad(b).as_ref(), &[30.0]);
    }

    #[test]
    fn concat_of_pair_vectors_has_expected_length() {
        // f = 3 gives 6 ordered pairs; with d = 4 that is 24 entries
        let mut t = Tape::<f64>::new();
        let parts: Vec<Var> = (0..6).map(|_| t.leaf(Shape::vector(4), vec![1.0; 4]).unwrap()).collect();
        let c = t.concat(&parts, 0).unwrap();
        assert_eq!(t.shape(c).numel(), 24);
    }

    #[test]
    fn concat_mismatch_is_dimension_error() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Shape::matrix(2, 2), vec![0.0; 4]).unwrap();
        let b = t.leaf(Shape::matrix(3, 1), vec![0.0; 3]).unwrap();
        assert!(matches!(t.concat(&[a, b], 1), Err(GraphError::Dimension { .. })));
    }

    #[test]
    fn backward_root_identity_and_product_rule() {
        let mut t = Tape::<f64>::new();
        let x = t.scalar_leaf(5.0);
        t.backward(x).unwrap();
        assert_eq!(t.grad(x).as_ref(), &[1.0]);

        let mut t = Tape::<f64>::new();
        let x = t.scalar_leaf(2.0);
        let y = t.scalar_leaf(3.0);
        let p = t.mul(x, y).unwrap();
        t.backward(p).unwrap();
        assert_eq!(t.grad(x).as_ref(), &[3.0]);
        assert_eq!(t.grad(y).as_ref(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root_and_second_call() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Shape::vector(2), vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(x), Err(GraphError::Contract(_))));
        let s = t.sum(x, None).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(GraphError::Contract(_))));
    }

    #[test]
    fn self_product_accumulates_both_paths() {
        let mut t = Tape::<f64>::new();
        let x = t.scalar_leaf(1.5);
        let sq = t.mul(x, x).unwrap();
        t.backward(sq).unwrap();
        assert_eq!(t.grad(x).as_ref(), &[3.0]);
    }

    #[test]
    fn gather_accumulates_duplicate_rows() {
        let mut t = Tape::<f64>::new();
        let table = t.leaf(Shape::matrix(3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = t.gather(table, &[2, 0, 2, 2], 2).unwrap();
        assert_eq!(t.shape(out), &Shape::matrix(2, 4));
        assert_eq!(t.value(out), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0, 5.0, 6.0]);
        let s = t.sum(out, None).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(table).as_ref(), &[1.0, 1.0, 0.0, 0.0, 3.0, 3.0]);
        assert!(t.gather(table, &[3], 1).is_err());
    }

    #[test]
    fn dense_matches_primitive_composition() {
        let xs = vec![0.3, -1.2, 0.8, 0.5, -0.7, 1.1];
        let ws = vec![0.2, -0.4, 0.6, 0.1, -0.3, 0.9];
        let bs = vec![0.05, -0.02];
        for act in [
            Activation::LeakyRelu,
            Activation::Relu,
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::None,
        ] {
            let mut fused = Tape::<f64>::new();
            let x = fused.leaf(Shape::matrix(2, 3), xs.clone()).unwrap();
            let w = fused.leaf(Shape::matrix(3, 2), ws.clone()).unwrap();
            let b = fused.leaf(Shape::vector(2), bs.clone()).unwrap();
            let y = fused.dense(x, w, b, act).unwrap();
            let s = fused.sum(y, None).unwrap();
            fused.backward(s).unwrap();

            let mut prim = Tape::<f64>::new();
            let x2 = prim.leaf(Shape::matrix(2, 3), xs.clone()).unwrap();
            let w2 = prim.leaf(Shape::matrix(3, 2), ws.clone()).unwrap();
            let b2 = prim.leaf(Shape::vector(2), bs.clone()).unwrap();
            let h = prim.matmul(x2, w2).unwrap();
            let h = prim.add_row(h, b2).unwrap();
            let y2 = prim.activate(act, h).unwrap();
            let s2 = prim.sum(y2, None).unwrap();
            prim.backward(s2).unwrap();

            for (a, b) in fused.value(y).iter().zip(prim.value(y2)) {
                assert!(close(*a, *b, 1e-14), "{act:?}");
            }
            for (va, vb) in [(x, x2), (w, w2), (b, b2)] {
                for (a, b) in fused.grad(va).iter().zip(prim.grad(vb).iter()) {
                    assert!(close(*a, *b, 1e-14), "{act:?}");
                }
            }
        }
    }

    #[test]
    fn normalize_rows_zero_row_passes_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Shape::matrix(2, 2), vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let y = t.normalize_rows(x).unwrap();
        assert_eq!(t.value(y), &[0.6, 0.8, 0.0, 0.0]);
        let s = t.sum(y, None).unwrap();
        t.backward(s).unwrap();
        assert_eq!(&t.grad(x)[2..], &[0.0, 0.0]);
    }

    #[test]
    fn lse_products_matches_direct_evaluation() {
        let a: Vec<f64> = (0..600).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let b: Vec<f64> = (0..900).map(|i| ((i * 53 % 97) as f64 / 48.0) - 1.0).collect();
        // 300 rows exercises more than one block
        let (m, n, d) = (300, 450, 2);
        let mut t = Tape::<f64>::new();
        let va = t.leaf(Shape::matrix(m, d), a.clone()).unwrap();
        let vb = t.leaf(Shape::matrix(n, d), b.clone()).unwrap();
        let out = t.lse_products(va, vb, 5.0).unwrap();
        for i in [0, 17, 255, 256, 299] {
            let direct: f64 = (0..n)
                .map(|j| (5.0 * (a[i * d] * b[j * d] + a[i * d + 1] * b[j * d + 1])).exp())
                .sum::<f64>()
                .ln();
            assert!(close(t.value(out)[i], direct, 1e-10));
        }
    }

    #[test]
    fn released_grads_still_leave_leaf_grads() {
        let mut t = Tape::<f64>::new();
        t.set_retain_grads(false);
        let x = t.scalar_leaf(2.0);
        let y = t.exp(x).unwrap();
        let z = t.scale(y, 3.0);
        t.backward(z).unwrap();
        assert!(close(t.grad(x)[0], 3.0 * 2f64.exp(), 1e-12));
        assert_eq!(t.grad(y).as_ref(), &[0.0]);
    }
}
