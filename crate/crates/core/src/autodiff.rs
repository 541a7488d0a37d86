//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. Nodes are appended in evaluation order, so walking the node
//! list backwards is a reverse topological order and each node is visited
//! exactly once by [`Var::backward`].
//!
//! Tapes are built fresh for every forward pass and are single-threaded
//! (`Rc` based). Node values are `Arc<Tensor>` so frozen parameters can be
//! shared with a tape without copying.
//!
//! Matrix-shaped ops view a tensor as `rows × cols` over its last dimension.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_ex, Tensor};

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

struct TapeInner {
    nodes: Vec<Node>,
    grad_scale: f64,
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, transpose_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    AddBias { x: usize, bias: usize },
    Scale { x: usize, factor: f64 },
    MulScalar { x: usize, s: usize },
    DivScalar { x: usize, s: usize },
    OneMinus(usize),
    Exp(usize),
    Sigmoid(usize),
    /// Keeps the inner `tanh` values for the reverse pass.
    Gelu { x: usize, t: Vec<f64> },
    Softmax(usize),
    Transpose(usize),
    Reshape(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows { x: usize, indices: Vec<usize> },
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Element { x: usize, index: usize },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    StraightThrough(usize),
    Attention(Box<AttentionOp>),
}

/// Saved state of a fused multi-head attention node.
struct AttentionOp {
    qkv: usize,
    tau: Option<usize>,
    batch: usize,
    heads: usize,
    scale: f64,
    /// Scaled logits `[B, h, T, T]` (after division by the temperature).
    logits: Vec<f64>,
    /// Row-wise softmax of `logits`.
    probs: Vec<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grad_scale: if cfg!(feature = "inject-grad-bug") { 1.1 } else { 1.0 },
            })),
        }
    }

    /// A leaf node. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        self.push(value.into(), requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiplies every reported leaf gradient by `scale`. Only used to build
    /// negative controls for gradient checking.
    pub fn inject_grad_scale(&self, scale: f64) {
        self.inner.borrow_mut().grad_scale = scale;
    }

    fn push(&self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// The value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn check_tape(&self, other: &Var) -> Result<()> {
        if self.tape.same(&other.tape) {
            Ok(())
        } else {
            Err(Error::State("operands live on different tapes".into()))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad();
        self.tape.push(Arc::new(value), rg, op)
    }

    fn binary(&self, other: &Var, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(Arc::new(value), rg, op)
    }

    fn scalar_operand(s: &Var, op: &'static str) -> Result<f64> {
        let v = s.value();
        if v.len() != 1 {
            return Err(Error::Shape {
                op,
                lhs: v.shape().to_vec(),
                rhs: vec![1],
            });
        }
        Ok(v.item())
    }

    fn matmul_impl(&self, other: &Var, transpose_b: bool) -> Result<Var> {
        self.check_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let name = if transpose_b { "matmul_nt" } else { "matmul" };
        let mismatch = || Error::Shape {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (n, kb) = if transpose_b {
            (b.shape()[0], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[0])
        };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        let bstride = if transpose_b { (1, k) } else { (n, 1) };
        gemm(m, k, n, a.data(), (k, 1), b.data(), bstride, &mut out, false);
        Ok(self.binary(
            other,
            Tensor::new([m, n], out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                transpose_b,
            },
        ))
    }

    /// `self [m×k] · other [k×n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.matmul_impl(other, false)
    }

    /// `self [m×k] · otherᵀ` where `other` is `[n×k]`.
    pub fn matmul_nt(&self, other: &Var) -> Result<Var> {
        self.matmul_impl(other, true)
    }

    fn zip_same(&self, other: &Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape(), data)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Adds a `[cols]` bias to every row.
    pub fn add_bias(&self, bias: &Var) -> Result<Var> {
        self.check_tape(bias)?;
        let (x, b) = (self.value(), bias.value());
        if b.len() != x.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(x.cols()) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
        Ok(self.binary(
            bias,
            Tensor::new(x.shape(), data)?,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    /// Multiplies by a constant.
    pub fn scale(&self, factor: f64) -> Result<Var> {
        let x = self.value();
        let data = x.data().iter().map(|v| v * factor).collect();
        Ok(self.unary(
            Tensor::new(x.shape(), data)?,
            Op::Scale { x: self.id, factor },
        ))
    }

    /// Multiplies every element by the one-element node `s`.
    pub fn mul_scalar(&self, s: &Var) -> Result<Var> {
        self.check_tape(s)?;
        let sv = Self::scalar_operand(s, "mul_scalar")?;
        let x = self.value();
        let data = x.data().iter().map(|v| v * sv).collect();
        Ok(self.binary(
            s,
            Tensor::new(x.shape(), data)?,
            Op::MulScalar { x: self.id, s: s.id },
        ))
    }

    /// Divides every element by the one-element node `s`.
    pub fn div_scalar(&self, s: &Var) -> Result<Var> {
        self.check_tape(s)?;
        let sv = Self::scalar_operand(s, "div_scalar")?;
        let x = self.value();
        let data = x.data().iter().map(|v| v / sv).collect();
        Ok(self.binary(
            s,
            Tensor::new(x.shape(), data)?,
            Op::DivScalar { x: self.id, s: s.id },
        ))
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&self) -> Result<Var> {
        let x = self.value();
        let data = x.data().iter().map(|v| 1.0 - v).collect();
        Ok(self.unary(Tensor::new(x.shape(), data)?, Op::OneMinus(self.id)))
    }

    pub fn exp(&self) -> Result<Var> {
        let x = self.value();
        let data = x.data().iter().map(|v| v.exp()).collect();
        Ok(self.unary(Tensor::new(x.shape(), data)?, Op::Exp(self.id)))
    }

    pub fn sigmoid(&self) -> Result<Var> {
        let x = self.value();
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        Ok(self.unary(Tensor::new(x.shape(), data)?, Op::Sigmoid(self.id)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var> {
        let x = self.value();
        let t: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| fast_tanh(GELU_K * (v + GELU_C * v * v * v)))
            .collect();
        let data = x.data().iter().zip(&t).map(|(v, t)| 0.5 * v * (1.0 + t)).collect();
        let t = if self.requires_grad() { t } else { Vec::new() };
        Ok(self.unary(Tensor::new(x.shape(), data)?, Op::Gelu { x: self.id, t }))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&self) -> Result<Var> {
        let x = self.value();
        x.ensure_finite("softmax logits")?;
        let c = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.unary(Tensor::new(x.shape(), out)?, Op::Softmax(self.id)))
    }

    /// Row-wise `softmax(self / tau)` for a positive one-element `tau`.
    pub fn softmax_temp(&self, tau: &Var) -> Result<Var> {
        let t = Self::scalar_operand(tau, "softmax_temp")?;
        if !(t > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {t}")));
        }
        self.value().ensure_finite("softmax logits")?;
        self.div_scalar(tau)?.softmax()
    }

    /// Per-row normalization over the last dimension followed by an affine map.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        self.check_tape(gamma)?;
        self.check_tape(beta)?;
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let d = x.cols();
        if g.len() != d || b.len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            Arc::new(Tensor::new(x.shape(), out)?),
            rg,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Transposes a 2-D node.
    pub fn transpose(&self) -> Result<Var> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        Ok(self.unary(Tensor::new([c, r], out)?, Op::Transpose(self.id)))
    }

    /// Reinterprets the buffer with a new shape of equal size.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    /// Selects rows (possibly repeated) by index; the output has
    /// `indices.len()` rows of the same width.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var> {
        let x = self.value();
        let (rows, c) = (x.rows(), x.cols());
        if indices.is_empty() {
            return Err(Error::Config("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= rows {
                return Err(Error::OutOfBounds {
                    what: "rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(x.row(i));
        }
        Ok(self.unary(
            Tensor::new([indices.len(), c], out)?,
            Op::GatherRows {
                x: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Contiguous row range `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        let rows = self.value().rows();
        if len == 0 || start + len > rows {
            return Err(Error::OutOfBounds {
                what: "rows",
                index: start + len,
                len: rows,
            });
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&idx)
    }

    /// Stacks nodes of equal width vertically.
    pub fn concat_rows(parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat_rows of nothing".into()))?;
        let c = first.value().cols();
        let mut out = Vec::new();
        let mut rg = false;
        for p in parts {
            first.check_tape(p)?;
            let v = p.value();
            if v.cols() != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: v.shape().to_vec(),
                });
            }
            out.extend_from_slice(v.data());
            rg |= p.requires_grad();
        }
        let rows = out.len() / c;
        Ok(first.tape.push(
            Arc::new(Tensor::new([rows, c], out)?),
            rg,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Column range `[start, start + width)` of a matrix view.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var> {
        let x = self.value();
        let c = x.cols();
        if width == 0 || start + width > c {
            return Err(Error::OutOfBounds {
                what: "columns",
                index: start + width,
                len: c,
            });
        }
        let mut out = Vec::with_capacity(x.rows() * width);
        for r in 0..x.rows() {
            out.extend_from_slice(&x.row(r)[start..start + width]);
        }
        Ok(self.unary(
            Tensor::new([x.rows(), width], out)?,
            Op::SliceCols { x: self.id, start },
        ))
    }

    /// Places nodes with equal row counts side by side.
    pub fn concat_cols(parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat_cols of nothing".into()))?;
        let rows = first.value().rows();
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut rg = false;
        for (p, v) in parts.iter().zip(&vals) {
            first.check_tape(p)?;
            if v.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: v.shape().to_vec(),
                });
            }
            rg |= p.requires_grad();
        }
        let width: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        Ok(first.tape.push(
            Arc::new(Tensor::new([rows, width], out)?),
            rg,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// One element of the flattened buffer as a `[1]` node.
    pub fn element(&self, index: usize) -> Result<Var> {
        let x = self.value();
        if index >= x.len() {
            return Err(Error::OutOfBounds {
                what: "elements",
                index,
                len: x.len(),
            });
        }
        Ok(self.unary(
            Tensor::scalar(x.data()[index]),
            Op::Element { x: self.id, index },
        ))
    }

    pub fn sum(&self) -> Result<Var> {
        let s = self.value().data().iter().sum();
        Ok(self.unary(Tensor::scalar(s), Op::Sum(self.id)))
    }

    /// Mean softmax cross-entropy of `[batch × classes]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var> {
        let x = self.value();
        let (b, c) = (x.rows(), x.cols());
        if labels.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        x.ensure_finite("cross_entropy logits")?;
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::OutOfBounds {
                    what: "classes",
                    index: y,
                    len: c,
                });
            }
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[y];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        Ok(self.unary(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Forward value `hard`, backward identity into `self`.
    /// Fused multi-head self-attention over `batch` stacked sequences.
    ///
    /// `self` is the `[B·T × 3D]` output of the query/key/value projection,
    /// columns ordered `q | k | v` with heads contiguous inside each part. For
    /// every sample and head the node computes
    /// `softmax(q·kᵀ·scale / τ)·v`; the result is `[B·T × D]` with heads
    /// concatenated along columns. Without `tau` no division takes place.
    pub fn multi_head_attention(&self, batch: usize, heads: usize, scale: f64, tau: Option<&Var>) -> Result<Var> {
        let x = self.value();
        let bad = || Error::Shape {
            op: "multi_head_attention",
            lhs: x.shape().to_vec(),
            rhs: vec![batch, heads],
        };
        if x.shape().len() != 2 || batch == 0 || heads == 0 {
            return Err(bad());
        }
        let (rows, cols) = (x.rows(), x.cols());
        if rows % batch != 0 || cols % (3 * heads) != 0 {
            return Err(bad());
        }
        let t = rows / batch;
        let d = cols / 3;
        let dh = d / heads;
        let alpha = match tau {
            Some(tv) => {
                self.check_tape(tv)?;
                let tv = Self::scalar_operand(tv, "multi_head_attention")?;
                if !(tv > 0.0) {
                    return Err(Error::Domain(format!("temperature must be positive, got {tv}")));
                }
                scale / tv
            }
            None => scale,
        };
        x.ensure_finite("attention inputs")?;
        let xd = x.data();
        let mut logits = vec![0.0; batch * heads * t * t];
        let mut out = vec![0.0; rows * d];
        for s in 0..batch {
            let base = s * t * cols;
            for h in 0..heads {
                let z = &mut logits[(s * heads + h) * t * t..][..t * t];
                let q = &xd[base + h * dh..];
                let k = &xd[base + d + h * dh..];
                gemm_ex(t, dh, t, alpha, q, (cols, 1), k, (1, cols), z, t, 0.0);
            }
        }
        let mut probs = logits.clone();
        for row in probs.chunks_mut(t) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        for s in 0..batch {
            let base = s * t * cols;
            for h in 0..heads {
                let p = &probs[(s * heads + h) * t * t..][..t * t];
                let v = &xd[base + 2 * d + h * dh..];
                let o = &mut out[s * t * d + h * dh..];
                gemm_ex(t, t, dh, 1.0, p, (t, 1), v, (cols, 1), o, d, 0.0);
            }
        }
        let rg = self.requires_grad() || tau.is_some_and(Var::requires_grad);
        let op = Op::Attention(Box::new(AttentionOp {
            qkv: self.id,
            tau: tau.map(|v| v.id),
            batch,
            heads,
            scale,
            logits,
            probs,
        }));
        Ok(self.tape.push(Arc::new(Tensor::new([rows, d], out)?), rg, op))
    }

    /// Attention probabilities `[B, h, T, T]` of a node built by
    /// [`Var::multi_head_attention`].
    pub fn attention_probs(&self) -> Option<Vec<f64>> {
        match &self.tape.inner.borrow().nodes[self.id].op {
            Op::Attention(a) => Some(a.probs.clone()),
            _ => None,
        }
    }

    pub fn straight_through(&self, hard: Tensor) -> Result<Var> {
        let x = self.value();
        if hard.shape() != x.shape() {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: x.shape().to_vec(),
                rhs: hard.shape().to_vec(),
            });
        }
        Ok(self.unary(hard, Op::StraightThrough(self.id)))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self) -> Result<Gradients> {
        let inner = self.tape.inner.borrow();
        let root = &inner.nodes[self.id];
        if root.value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: root.value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        if !root.requires_grad {
            return Err(Error::State(
                "backward on a value with no path to any trainable leaf".into(),
            ));
        }
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        let mut visited = 0;
        for i in (0..=self.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            visited += 1;
            propagate(nodes, i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(g);
            }
        }
        let scale = inner.grad_scale;
        if scale != 1.0 {
            for g in leaf_grads.iter_mut().flatten() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
        let shapes = nodes[..=self.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads: leaf_grads,
            shapes,
            visited,
        })
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the leaf does not require grad or is
    /// unreachable from the loss.
    pub fn get(&self, leaf: &Var) -> Option<Tensor> {
        let g = self.grads.get(leaf.id)?.as_ref()?;
        Tensor::new(self.shapes[leaf.id].clone(), g.clone()).ok()
    }

    /// Number of nodes whose gradient was propagated.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], p: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[p].requires_grad {
        return None;
    }
    let len = nodes[p].value.len();
    Some(grads[p].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, transpose_b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = out.shape()[1];
            if let Some(da) = acc(grads, nodes, *a) {
                if *transpose_b {
                    // dA = G · B, B is [n×k]
                    gemm(m, n, k, g, (n, 1), bv.data(), (k, 1), da, true);
                } else {
                    // dA = G · Bᵀ, B is [k×n]
                    gemm(m, n, k, g, (n, 1), bv.data(), (1, n), da, true);
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                if *transpose_b {
                    // dB = Gᵀ · A  -> [n×k]
                    gemm(n, m, k, g, (1, n), av.data(), (k, 1), db, true);
                } else {
                    // dB = Aᵀ · G  -> [k×n]
                    gemm(k, m, n, av.data(), (1, k), g, (n, 1), db, true);
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = acc(grads, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = acc(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = acc(grads, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::AddBias { x, bias } => {
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = acc(grads, nodes, *bias) {
                let c = d.len();
                for row in g.chunks(c) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g);
            }
        }
        Op::MulScalar { x, s } => {
            let sv = nodes[*s].value.item();
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += sv * g);
            }
            if let Some(d) = acc(grads, nodes, *s) {
                let xv = nodes[*x].value.data();
                d[0] += xv.iter().zip(g).map(|(x, g)| x * g).sum::<f64>();
            }
        }
        Op::DivScalar { x, s } => {
            let sv = nodes[*s].value.item();
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g / sv);
            }
            if let Some(d) = acc(grads, nodes, *s) {
                let y = out.data();
                d[0] -= y.iter().zip(g).map(|(y, g)| y * g).sum::<f64>() / sv;
            }
        }
        Op::OneMinus(x) => {
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Exp(x) => {
            if let Some(d) = acc(grads, nodes, *x) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += g * y;
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(d) = acc(grads, nodes, *x) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        Op::Gelu { x, t } => {
            let xv = nodes[*x].value.clone();
            if let Some(d) = acc(grads, nodes, *x) {
                for (((d, g), &v), &t) in d.iter_mut().zip(g).zip(xv.data()).zip(t) {
                    let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                    *d += g * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
        }
        Op::Softmax(x) => {
            if let Some(d) = acc(grads, nodes, *x) {
                let c = out.cols();
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = nodes[*gamma].value.clone();
            let c = gv.len();
            if let Some(d) = acc(grads, nodes, *gamma) {
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        d[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(d) = acc(grads, nodes, *beta) {
                for grow in g.chunks(c) {
                    d.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            }
            if let Some(d) = acc(grads, nodes, *x) {
                let mut dh = vec![0.0; c];
                for (r, ((drow, grow), hrow)) in d
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(xhat.chunks(c))
                    .enumerate()
                {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        dh[j] = grow[j] * gv.data()[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * hrow[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        drow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            }
        }
        Op::Transpose(x) => {
            if let Some(d) = acc(grads, nodes, *x) {
                // out is [c×r]; d is [r×c]
                let (c, r) = (out.shape()[0], out.shape()[1]);
                for j in 0..c {
                    for i in 0..r {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::GatherRows { x, indices } => {
            if let Some(d) = acc(grads, nodes, *x) {
                let c = out.cols();
                for (r, &src) in indices.iter().enumerate() {
                    let dst = &mut d[src * c..(src + 1) * c];
                    dst.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(d) = acc(grads, nodes, p) {
                    d.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, g)| *d += g);
                }
                offset += len;
            }
        }
        Op::SliceCols { x, start } => {
            let w = out.cols();
            if let Some(d) = acc(grads, nodes, *x) {
                let c = nodes[*x].value.cols();
                for (r, grow) in g.chunks(w).enumerate() {
                    let drow = &mut d[r * c + start..r * c + start + w];
                    drow.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let width = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(d) = acc(grads, nodes, p) {
                    for (r, grow) in g.chunks(width).enumerate() {
                        let drow = &mut d[r * w..(r + 1) * w];
                        drow.iter_mut()
                            .zip(&grow[offset..offset + w])
                            .for_each(|(d, g)| *d += g);
                    }
                }
                offset += w;
            }
        }
        Op::Element { x, index } => {
            if let Some(d) = acc(grads, nodes, *x) {
                d[*index] += g[0];
            }
        }
        Op::Sum(x) => {
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if let Some(d) = acc(grads, nodes, *logits) {
                let b = labels.len();
                let c = probs.len() / b;
                let w = g[0] / b as f64;
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == y { 1.0 } else { 0.0 };
                        d[r * c + j] += w * (probs[r * c + j] - target);
                    }
                }
            }
        }
        Op::StraightThrough(x) => {
            if let Some(d) = acc(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::Attention(a) => attention_backward(nodes, a, g, grads),
    }
}

fn attention_backward(nodes: &[Node], a: &AttentionOp, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let x = nodes[a.qkv].value.clone();
    let (rows, cols) = (x.rows(), x.cols());
    let (b, heads) = (a.batch, a.heads);
    let t = rows / b;
    let d = cols / 3;
    let dh = d / heads;
    let tau = a.tau.map(|i| nodes[i].value.item());
    let alpha = match tau {
        Some(tv) => a.scale / tv,
        None => a.scale,
    };
    let xd = x.data();
    // dS = P ⊙ (dP − rowdot(dP, P)) for every (sample, head), with dP = dO·vᵀ.
    let mut ds = vec![0.0; b * heads * t * t];
    for s in 0..b {
        let base = s * t * cols;
        for h in 0..heads {
            let off = (s * heads + h) * t * t;
            let p = &a.probs[off..off + t * t];
            let dp = &mut ds[off..off + t * t];
            let go = &g[s * t * d + h * dh..];
            let v = &xd[base + 2 * d + h * dh..];
            gemm_ex(t, dh, t, 1.0, go, (d, 1), v, (1, cols), dp, t, 0.0);
            for (drow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                let dot: f64 = drow.iter().zip(prow).map(|(d, p)| d * p).sum();
                for (dv, pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot);
                }
            }
        }
    }
    if let Some(dx) = acc(grads, nodes, a.qkv) {
        for s in 0..b {
            let base = s * t * cols;
            for h in 0..heads {
                let off = (s * heads + h) * t * t;
                let p = &a.probs[off..off + t * t];
                let dsm = &ds[off..off + t * t];
                let go = &g[s * t * d + h * dh..];
                let q = &xd[base + h * dh..];
                let k = &xd[base + d + h * dh..];
                // dV += Pᵀ·dO
                gemm_ex(t, t, dh, 1.0, p, (1, t), go, (d, 1), &mut dx[base + 2 * d + h * dh..], cols, 1.0);
                // dQ += alpha·dS·K
                gemm_ex(t, t, dh, alpha, dsm, (t, 1), k, (cols, 1), &mut dx[base + h * dh..], cols, 1.0);
                // dK += alpha·dSᵀ·Q
                gemm_ex(t, t, dh, alpha, dsm, (1, t), q, (cols, 1), &mut dx[base + d + h * dh..], cols, 1.0);
            }
        }
    }
    if let (Some(ti), Some(tv)) = (a.tau, tau) {
        if let Some(dt) = acc(grads, nodes, ti) {
            // S = z/τ, so ∂S/∂τ = −S/τ.
            let total: f64 = ds.iter().zip(&a.logits).map(|(d, s)| d * s).sum();
            dt[0] -= total / tv;
        }
    }
}

/// `tanh` through a single `exp`; several times faster than the libm
/// routine and accurate to a few ulps of absolute error.
fn fast_tanh(y: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * y).exp() + 1.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
