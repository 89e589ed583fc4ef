//! Tape-based reverse-mode automatic differentiation over dense row-major
//! tensors.
//!
//! A [`Tape`] is an append-only arena of [`Tensor`] nodes. Forward operations
//! push a node recording the operation and its input ids; [`Tape::backward`]
//! walks the arena once in reverse creation order (which is a valid reverse
//! topological order, since inputs always precede outputs) and accumulates
//! gradients additively into `Tensor::grad`. Nodes whose `requires_grad`
//! flag is false — frozen parameters and everything derived solely from
//! them — are skipped entirely, so freezing weights genuinely removes their
//! gradient cost rather than merely discarding the result.
//!
//! Everything is generic over [`Scalar`] so the same graph code runs in f32
//! for training and in f64 where finite-difference verification needs the
//! extra precision.
//!
//! Every forward op validates operand shapes and scans its output for
//! NaN/Inf, failing fast with [`Error::NonFinite`] rather than letting a
//! poisoned value propagate into a checkpoint.

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Element type for tensors: f32 in training, f64 for high-precision
/// gradient verification.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Row-major `[m×k] · [k×n]` into zeroed `out`. Implementations must
    /// compute every output element as an ascending-k fused multiply-add
    /// chain from a zero accumulator (see [`matmul_raw`]), so overrides may
    /// change speed but never results.
    fn matmul_into(a: &[Self], b: &[Self], m: usize, k: usize, n: usize, out: &mut [Self]) {
        matmul_tiled(a, b, m, k, n, out);
    }

    /// `Aᵀ · B` for row-major `a: [m×k]`, `b: [m×n]` into zeroed
    /// `out: [k×n]`, reading `a` in place instead of materializing the
    /// transpose. Must produce bit-identical results to
    /// `matmul_into(transpose(a), b, ..)`: the same ascending-m chain per
    /// element.
    fn matmul_tn_into(a: &[Self], b: &[Self], m: usize, k: usize, n: usize, out: &mut [Self]) {
        matmul_tn_tiled(a, b, m, k, n, out);
    }

    /// `A · Bᵀ` for row-major `a: [m×k]`, `b: [n×k]` into zeroed
    /// `out: [m×n]`: contraction along the contiguous axis of both
    /// operands. Overrides may reassociate each element's dot product, but
    /// the chosen order must be a function of `k` alone — never of `m`, `n`
    /// or the element's position — so that a given pair of rows yields the
    /// same bits in any enclosing shape (attention scores rely on this the
    /// same way [`matmul_into`] callers rely on row independence).
    fn matmul_nt_into(a: &[Self], b: &[Self], m: usize, k: usize, n: usize, out: &mut [Self]) {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                let mut acc = Self::zero();
                for t in 0..k {
                    acc = ar[t].mul_add(br[t], acc);
                }
                out[i * n + j] = acc;
            }
        }
    }
}

impl Scalar for f32 {
    // 256-bit on purpose even where wider registers exist: 512-bit loads
    // downclock the sustained core frequency on the Xeons this targets,
    // which measured slower end to end.
    #[cfg(all(target_arch = "x86_64", target_feature = "avx", target_feature = "fma"))]
    fn matmul_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
        matmul_f32_fma(a, b, m, k, n, out);
    }

    #[cfg(all(target_arch = "x86_64", target_feature = "avx", target_feature = "fma"))]
    fn matmul_tn_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
        matmul_tn_f32_fma(a, b, m, k, n, out);
    }

    #[cfg(all(target_arch = "x86_64", target_feature = "avx", target_feature = "fma"))]
    fn matmul_nt_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
        matmul_nt_f32_fma(a, b, m, k, n, out);
    }
}

impl Scalar for f64 {}

/// Shorthand for converting an f64 literal into the active scalar type.
#[inline]
pub fn s<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("f64 -> Scalar conversion cannot fail for f32/f64")
}

/// Additive pre-softmax penalty for masked attention entries. Large enough
/// that `exp(score + MASKED_BIAS - row_max)` underflows to exactly 0.0 in
/// f32, yet small enough that the sum `score + MASKED_BIAS` stays finite.
/// At this magnitude the f32 spacing is 64, so adding any plausible
/// attention score (|score| < 32) rounds back to exactly this constant —
/// masked positions behave identically no matter what score they carried.
pub const MASKED_BIAS: f64 = -1e9;

/// Dense row-major tensor of rank 1 or 2. The gradient buffer is allocated
/// lazily by the first backward pass that reaches the node.
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("rank must be 1 or 2, got shape {shape:?}"),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![S::zero(); numel])
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// Builder-style marker used when constructing trainable leaves.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// (rows, cols) view: rank-1 tensors are treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }

    /// Element-wise conversion to another scalar type. Gradients are not
    /// carried over; the result is a fresh leaf value.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Handle into a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation for one tape node. Input handles always refer to
/// earlier nodes, so a reverse scan of the arena is reverse-topological.
#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Matmul(TensorId, TensorId),
    MatmulNT(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    AddRow(TensorId, TensorId),
    AddScalar(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MulScalar(TensorId, TensorId),
    Scale(TensorId, S),
    Gelu(TensorId),
    Exp(TensorId),
    SoftmaxRows(TensorId),
    LogSumExpRows(TensorId),
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: S },
    L2NormalizeRows { x: TensorId, eps: S },
    GatherRows { x: TensorId, indices: Vec<usize> },
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    Reshape(TensorId),
    SumAll(TensorId),
    MeanRows(TensorId),
    Diag(TensorId),
}

struct Node<S> {
    tensor: Tensor<S>,
    op: Op<S>,
}

/// Append-only autodiff arena. See module docs.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Mounts a tensor as a leaf (parameter or constant input).
    pub fn leaf(&mut self, tensor: Tensor<S>) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Convenience: non-differentiable leaf from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].tensor.data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    /// Value of a single-element node.
    pub fn value(&self, id: TensorId) -> Result<S> {
        let t = &self.nodes[id.0].tensor;
        if !t.is_scalar() {
            return Err(Error::Contract(format!(
                "value() needs a single-element node, shape is {:?}",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    /// Drops all accumulated gradients, keeping values.
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn check_id(&self, id: TensorId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Index { what: op, index: id.0, limit: self.nodes.len() });
        }
        Ok(())
    }

    fn push(&mut self, tensor: Tensor<S>, op: Op<S>) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    /// Validates ids, runs the NaN/Inf scan and pushes the result node with
    /// `requires_grad` inherited from any input.
    fn push_checked(
        &mut self,
        op_name: &'static str,
        inputs: &[TensorId],
        shape: Vec<usize>,
        data: Vec<S>,
        op: Op<S>,
    ) -> Result<TensorId> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name, context: Some(format!("value {bad}")) });
        }
        let mut tensor = Tensor::new(shape, data)?;
        tensor.requires_grad = inputs.iter().any(|&id| self.nodes[id.0].tensor.requires_grad);
        Ok(self.push(tensor, op))
    }

    fn t(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].tensor
    }

    // ---- forward operations ----

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a, "matmul lhs")?;
        self.check_id(b, "matmul rhs")?;
        let (m, ka) = self.t(a).dims2();
        let (kb, n) = self.t(b).dims2();
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner dims differ: {:?} x {:?}", self.t(a).shape, self.t(b).shape),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_raw(&self.t(a).data, &self.t(b).data, m, ka, n, &mut out);
        self.push_checked("matmul", &[a, b], vec![m, n], out, Op::Matmul(a, b))
    }

    /// `[m×k] · [n×k]ᵀ -> [m×n]`: every output element is the dot product
    /// of one row of `a` with one row of `b`, so it depends on nothing but
    /// that pair of rows — the same row-independence [`Tape::matmul`]
    /// guarantees, without materializing the transpose.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a, "matmul_nt lhs")?;
        self.check_id(b, "matmul_nt rhs")?;
        let (m, ka) = self.t(a).dims2();
        let (n, kb) = self.t(b).dims2();
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul_nt",
                detail: format!("trailing dims differ: {:?} x {:?}", self.t(a).shape, self.t(b).shape),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt_raw(&self.t(a).data, &self.t(b).data, m, ka, n, &mut out);
        self.push_checked("matmul_nt", &[a, b], vec![m, n], out, Op::MatmulNT(a, b))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "transpose")?;
        let (r, c) = self.t(x).dims2();
        let out = transpose_raw(&self.t(x).data, r, c);
        self.push_checked("transpose", &[x], vec![c, r], out, Op::Transpose(x))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn elementwise_pair(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<TensorId> {
        self.check_id(a, name)?;
        self.check_id(b, name)?;
        if self.t(a).shape != self.t(b).shape {
            return Err(Error::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", self.t(a).shape, self.t(b).shape),
            });
        }
        let data: Vec<S> =
            self.t(a).data.iter().zip(&self.t(b).data).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.t(a).shape.clone();
        self.push_checked(name, &[a, b], shape, data, op)
    }

    /// Adds a length-C row vector to every row of an `[R×C]` matrix.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        self.check_id(x, "add_row")?;
        self.check_id(row, "add_row bias")?;
        let (r, c) = self.t(x).dims2();
        let (br, bc) = self.t(row).dims2();
        if br != 1 || bc != c {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("bias {:?} does not match row width {c}", self.t(row).shape),
            });
        }
        let mut data = self.t(x).data.clone();
        let bias = &self.t(row).data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bias[j];
            }
        }
        let shape = self.t(x).shape.clone();
        self.push_checked("add_row", &[x, row], shape, data, Op::AddRow(x, row))
    }

    /// Adds a single-element node to every entry.
    pub fn add_scalar(&mut self, x: TensorId, scalar: TensorId) -> Result<TensorId> {
        self.check_id(x, "add_scalar")?;
        self.check_id(scalar, "add_scalar rhs")?;
        if !self.t(scalar).is_scalar() {
            return Err(Error::Shape {
                op: "add_scalar",
                detail: format!("rhs must be a single element, got {:?}", self.t(scalar).shape),
            });
        }
        let v = self.t(scalar).data[0];
        let data: Vec<S> = self.t(x).data.iter().map(|&e| e + v).collect();
        let shape = self.t(x).shape.clone();
        self.push_checked("add_scalar", &[x, scalar], shape, data, Op::AddScalar(x, scalar))
    }

    /// Multiplies every entry by a single-element node (e.g. a learnable
    /// temperature).
    pub fn mul_scalar(&mut self, x: TensorId, scalar: TensorId) -> Result<TensorId> {
        self.check_id(x, "mul_scalar")?;
        self.check_id(scalar, "mul_scalar rhs")?;
        if !self.t(scalar).is_scalar() {
            return Err(Error::Shape {
                op: "mul_scalar",
                detail: format!("rhs must be a single element, got {:?}", self.t(scalar).shape),
            });
        }
        let v = self.t(scalar).data[0];
        let data: Vec<S> = self.t(x).data.iter().map(|&e| e * v).collect();
        let shape = self.t(x).shape.clone();
        self.push_checked("mul_scalar", &[x, scalar], shape, data, Op::MulScalar(x, scalar))
    }

    /// Multiplies by a compile-time constant; the constant gets no gradient.
    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        self.check_id(x, "scale")?;
        let cv = s::<S>(c);
        let data: Vec<S> = self.t(x).data.iter().map(|&e| e * cv).collect();
        let shape = self.t(x).shape.clone();
        self.push_checked("scale", &[x], shape, data, Op::Scale(x, cv))
    }

    /// Gaussian error linear unit, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "gelu")?;
        let data: Vec<S> = self.t(x).data.iter().map(|&v| gelu_value(v)).collect();
        let shape = self.t(x).shape.clone();
        self.push_checked("gelu", &[x], shape, data, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "exp")?;
        let data: Vec<S> = self.t(x).data.iter().map(|&v| v.exp()).collect();
        let shape = self.t(x).shape.clone();
        self.push_checked("exp", &[x], shape, data, Op::Exp(x))
    }

    /// Row-wise softmax with the usual max-subtraction for stability.
    /// Entries at or below [`MASKED_BIAS`] come out exactly 0.0 in f32.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "softmax_rows")?;
        let (r, c) = self.t(x).dims2();
        let xd = &self.t(x).data;
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            let inv = S::one() / sum;
            for j in 0..c {
                data[i * c + j] *= inv;
            }
        }
        let shape = self.t(x).shape.clone();
        self.push_checked("softmax_rows", &[x], shape, data, Op::SoftmaxRows(x))
    }

    /// Row-wise `ln Σ exp`, returned as an `[R×1]` column.
    pub fn logsumexp_rows(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "logsumexp_rows")?;
        let (r, c) = self.t(x).dims2();
        let xd = &self.t(x).data;
        let mut data = vec![S::zero(); r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for &v in row {
                sum += (v - max).exp();
            }
            data[i] = max + sum.ln();
        }
        self.push_checked("logsumexp_rows", &[x], vec![r, 1], data, Op::LogSumExpRows(x))
    }

    /// Row-wise layer normalization with learnable gain and bias (both
    /// length-C vectors): `gain ⊙ (x − μ)/√(σ² + eps) + bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        self.check_id(x, "layer_norm")?;
        self.check_id(gain, "layer_norm gain")?;
        self.check_id(bias, "layer_norm bias")?;
        let (r, c) = self.t(x).dims2();
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.t(id).numel() != c || self.t(id).dims2().0 != 1 {
                return Err(Error::Shape {
                    op: "layer_norm",
                    detail: format!("{name} {:?} does not match width {c}", self.t(id).shape),
                });
            }
        }
        let epsv = s::<S>(eps);
        let xd = &self.t(x).data;
        let g = &self.t(gain).data;
        let b = &self.t(bias).data;
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let (mean, inv_std) = row_moments(row, epsv);
            for j in 0..c {
                data[i * c + j] = g[j] * ((row[j] - mean) * inv_std) + b[j];
            }
        }
        let shape = self.t(x).shape.clone();
        self.push_checked(
            "layer_norm",
            &[x, gain, bias],
            shape,
            data,
            Op::LayerNorm { x, gain, bias, eps: epsv },
        )
    }

    /// Scales each row to unit Euclidean norm: `x / √(‖x‖² + eps)`. The tiny
    /// eps keeps the op differentiable at the origin.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "l2_normalize_rows")?;
        let eps = s::<S>(1e-12);
        let (r, c) = self.t(x).dims2();
        let xd = &self.t(x).data;
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let norm = row.iter().map(|&v| v * v).fold(S::zero(), |a, v| a + v);
            let inv = S::one() / (norm + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = row[j] * inv;
            }
        }
        let shape = self.t(x).shape.clone();
        self.push_checked(
            "l2_normalize_rows",
            &[x],
            shape,
            data,
            Op::L2NormalizeRows { x, eps },
        )
    }

    /// Selects rows by index (duplicates allowed; gradients accumulate).
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        self.check_id(x, "gather_rows")?;
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows with empty index list".into()));
        }
        let (r, c) = self.t(x).dims2();
        for &idx in indices {
            if idx >= r {
                return Err(Error::Index { what: "gather_rows row", index: idx, limit: r });
            }
        }
        let xd = &self.t(x).data;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &idx in indices {
            data.extend_from_slice(&xd[idx * c..(idx + 1) * c]);
        }
        self.push_checked(
            "gather_rows",
            &[x],
            vec![indices.len(), c],
            data,
            Op::GatherRows { x, indices: indices.to_vec() },
        )
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check_id(x, "slice_rows")?;
        let (r, c) = self.t(x).dims2();
        if len == 0 || start + len > r {
            return Err(Error::Index { what: "slice_rows end", index: start + len, limit: r });
        }
        let data = self.t(x).data[start * c..(start + len) * c].to_vec();
        self.push_checked("slice_rows", &[x], vec![len, c], data, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check_id(x, "slice_cols")?;
        let (r, c) = self.t(x).dims2();
        if len == 0 || start + len > c {
            return Err(Error::Index { what: "slice_cols end", index: start + len, limit: c });
        }
        let xd = &self.t(x).data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        self.push_checked("slice_cols", &[x], vec![r, len], data, Op::SliceCols { x, start })
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        for &x in xs {
            self.check_id(x, "concat_rows")?;
        }
        let c = self.t(xs[0]).dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, cx) = self.t(x).dims2();
            if cx != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column counts differ: {c} vs {cx}"),
                });
            }
            rows += r;
            data.extend_from_slice(&self.t(x).data);
        }
        self.push_checked("concat_rows", xs, vec![rows, c], data, Op::ConcatRows(xs.to_vec()))
    }

    /// Stacks matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        for &x in xs {
            self.check_id(x, "concat_cols")?;
        }
        let r = self.t(xs[0]).dims2().0;
        let mut total_c = 0;
        for &x in xs {
            let (rx, cx) = self.t(x).dims2();
            if rx != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row counts differ: {r} vs {rx}"),
                });
            }
            total_c += cx;
        }
        let mut data = vec![S::zero(); r * total_c];
        let mut offset = 0;
        for &x in xs {
            let (_, cx) = self.t(x).dims2();
            let xd = &self.t(x).data;
            for i in 0..r {
                data[i * total_c + offset..i * total_c + offset + cx]
                    .copy_from_slice(&xd[i * cx..(i + 1) * cx]);
            }
            offset += cx;
        }
        self.push_checked("concat_cols", xs, vec![r, total_c], data, Op::ConcatCols(xs.to_vec()))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        self.check_id(x, "reshape")?;
        let numel: usize = shape.iter().product();
        if numel != self.t(x).numel() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.t(x).shape),
            });
        }
        let data = self.t(x).data.clone();
        self.push_checked("reshape", &[x], shape, data, Op::Reshape(x))
    }

    /// Sum of all entries, as a single-element node.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "sum_all")?;
        let total = self.t(x).data.iter().fold(S::zero(), |a, &v| a + v);
        self.push_checked("sum_all", &[x], vec![1], vec![total], Op::SumAll(x))
    }

    /// Column means: `[R×C] -> [1×C]`.
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "mean_rows")?;
        let (r, c) = self.t(x).dims2();
        let xd = &self.t(x).data;
        let inv = S::one() / s::<S>(r as f64);
        let mut data = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                data[j] += xd[i * c + j];
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        self.push_checked("mean_rows", &[x], vec![1, c], data, Op::MeanRows(x))
    }

    /// Main diagonal of a square matrix, as an `[n×1]` column.
    pub fn diag(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x, "diag")?;
        let (r, c) = self.t(x).dims2();
        if r != c {
            return Err(Error::Shape {
                op: "diag",
                detail: format!("matrix must be square, got {:?}", self.t(x).shape),
            });
        }
        let xd = &self.t(x).data;
        let data: Vec<S> = (0..r).map(|i| xd[i * c + i]).collect();
        self.push_checked("diag", &[x], vec![r, 1], data, Op::Diag(x))
    }

    // ---- backward ----

    /// Accumulates `d root / d node` into the gradient buffer of every leaf
    /// that requires gradients. `root` must be a single element. Leaf
    /// gradients add up across calls (backward twice doubles them);
    /// intermediate nodes hold the gradients of the most recent call only.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        self.check_id(root, "backward root")?;
        if !self.t(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a single-element root, shape is {:?}",
                self.t(root).shape
            )));
        }
        if !self.t(root).requires_grad {
            return Err(Error::Contract(
                "backward root does not depend on any differentiable leaf".into(),
            ));
        }
        // Only this call's seed may flow: drop interior gradients left over
        // from earlier backward passes, keep leaf accumulators.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.tensor.grad = None;
            }
        }
        grad_slot(&mut self.nodes[root.0])[0] += S::one();

        for i in (0..=root.0).rev() {
            if self.nodes[i].tensor.grad.is_none() || !self.nodes[i].tensor.requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            // The node's inputs all live strictly before it on the tape, so
            // splitting gives simultaneous access to the node (read) and its
            // inputs (write).
            let (inputs, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = node.tensor.grad.as_deref().expect("checked above");
            backprop_node(node, g, inputs)?;
        }
        Ok(())
    }
}

/// Lazily allocates and returns the gradient buffer of a node.
fn grad_slot<S: Scalar>(node: &mut Node<S>) -> &mut [S] {
    let n = node.tensor.data.len();
    node.tensor.grad.get_or_insert_with(|| vec![S::zero(); n])
}

/// Adds `delta` into the gradient of `inputs[id]` if that node wants one.
/// The first contribution becomes the buffer outright instead of being added
/// to a fresh zero fill; most interior nodes have exactly one consumer, so
/// this skips a memset and a read-add pass over the whole buffer.
fn accumulate<S: Scalar>(inputs: &mut [Node<S>], id: TensorId, delta: &[S]) {
    let node = &mut inputs[id.index()];
    if !node.tensor.requires_grad {
        return;
    }
    debug_assert_eq!(node.tensor.data.len(), delta.len());
    match &mut node.tensor.grad {
        Some(slot) => {
            for (dst, &d) in slot.iter_mut().zip(delta) {
                *dst += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// [`accumulate`] for deltas the caller already owns: the first contribution
/// is moved into the gradient slot without any copy at all.
fn accumulate_owned<S: Scalar>(inputs: &mut [Node<S>], id: TensorId, delta: Vec<S>) {
    let node = &mut inputs[id.index()];
    if !node.tensor.requires_grad {
        return;
    }
    debug_assert_eq!(node.tensor.data.len(), delta.len());
    match &mut node.tensor.grad {
        Some(slot) => {
            for (dst, &d) in slot.iter_mut().zip(&delta) {
                *dst += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn wants_grad<S: Scalar>(inputs: &[Node<S>], id: TensorId) -> bool {
    inputs[id.index()].tensor.requires_grad
}

/// Distributes the output gradient `g` of one node into its inputs.
/// Contributions for inputs with `requires_grad == false` are skipped
/// before they are computed, which is what makes frozen layers cheap.
fn backprop_node<S: Scalar>(node: &Node<S>, g: &[S], inputs: &mut [Node<S>]) -> Result<()> {
    let out = &node.tensor;
    match &node.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, k) = inputs[a.index()].tensor.dims2();
            let n = inputs[b.index()].tensor.dims2().1;
            if wants_grad(inputs, *a) {
                // dA = dC · Bᵀ, contracting along the stored rows of B
                let mut da = vec![S::zero(); m * k];
                matmul_nt_raw(g, &inputs[b.index()].tensor.data, m, n, k, &mut da);
                accumulate_owned(inputs, *a, da);
            }
            if wants_grad(inputs, *b) {
                // dB = Aᵀ · dC, contracting down the stored rows of A
                let mut db = vec![S::zero(); k * n];
                matmul_tn_raw(&inputs[a.index()].tensor.data, g, m, k, n, &mut db);
                accumulate_owned(inputs, *b, db);
            }
        }
        Op::MatmulNT(a, b) => {
            // out = A·Bᵀ with a: [m×k], b: [n×k], g: [m×n]
            let (m, k) = inputs[a.index()].tensor.dims2();
            let n = inputs[b.index()].tensor.dims2().0;
            if wants_grad(inputs, *a) {
                // dA = dC · B
                let mut da = vec![S::zero(); m * k];
                matmul_raw(g, &inputs[b.index()].tensor.data, m, n, k, &mut da);
                accumulate_owned(inputs, *a, da);
            }
            if wants_grad(inputs, *b) {
                // dB = dCᵀ · A, contracting down the stored rows of dC
                let mut db = vec![S::zero(); n * k];
                matmul_tn_raw(g, &inputs[a.index()].tensor.data, m, n, k, &mut db);
                accumulate_owned(inputs, *b, db);
            }
        }
        Op::Transpose(x) => {
            let (c, r) = out.dims2(); // out is [c×r] for input [r×c]
            let delta = transpose_raw(g, c, r);
            accumulate_owned(inputs, *x, delta);
        }
        Op::Add(a, b) => {
            accumulate(inputs, *a, g);
            accumulate(inputs, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(inputs, *a, g);
            if wants_grad(inputs, *b) {
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                accumulate_owned(inputs, *b, neg);
            }
        }
        Op::Mul(a, b) => {
            if wants_grad(inputs, *a) {
                let bd = &inputs[b.index()].tensor.data;
                let da: Vec<S> = g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect();
                accumulate_owned(inputs, *a, da);
            }
            if wants_grad(inputs, *b) {
                let ad = &inputs[a.index()].tensor.data;
                let db: Vec<S> = g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect();
                accumulate_owned(inputs, *b, db);
            }
        }
        Op::AddRow(x, row) => {
            accumulate(inputs, *x, g);
            if wants_grad(inputs, *row) {
                let (r, c) = out.dims2();
                let mut db = vec![S::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                accumulate_owned(inputs, *row, db);
            }
        }
        Op::AddScalar(x, sc) => {
            accumulate(inputs, *x, g);
            if wants_grad(inputs, *sc) {
                let total = g.iter().fold(S::zero(), |a, &v| a + v);
                accumulate(inputs, *sc, &[total]);
            }
        }
        Op::MulScalar(x, sc) => {
            if wants_grad(inputs, *x) {
                let v = inputs[sc.index()].tensor.data[0];
                let dx: Vec<S> = g.iter().map(|&gv| gv * v).collect();
                accumulate_owned(inputs, *x, dx);
            }
            if wants_grad(inputs, *sc) {
                let xd = &inputs[x.index()].tensor.data;
                let total = g.iter().zip(xd).map(|(&gv, &xv)| gv * xv).fold(S::zero(), |a, v| a + v);
                accumulate(inputs, *sc, &[total]);
            }
        }
        Op::Scale(x, c) => {
            if wants_grad(inputs, *x) {
                let dx: Vec<S> = g.iter().map(|&gv| gv * *c).collect();
                accumulate_owned(inputs, *x, dx);
            }
        }
        Op::Gelu(x) => {
            if wants_grad(inputs, *x) {
                let xd = &inputs[x.index()].tensor.data;
                let dx: Vec<S> = g.iter().zip(xd).map(|(&gv, &xv)| gv * gelu_derivative(xv)).collect();
                accumulate_owned(inputs, *x, dx);
            }
        }
        Op::Exp(x) => {
            if wants_grad(inputs, *x) {
                let dx: Vec<S> = g.iter().zip(&out.data).map(|(&gv, &yv)| gv * yv).collect();
                accumulate_owned(inputs, *x, dx);
            }
        }
        Op::SoftmaxRows(x) => {
            if wants_grad(inputs, *x) {
                let (r, c) = out.dims2();
                let sm = &out.data;
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let srow = &sm[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let dot = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).fold(S::zero(), |a, v| a + v);
                    for j in 0..c {
                        dx[i * c + j] = srow[j] * (grow[j] - dot);
                    }
                }
                accumulate_owned(inputs, *x, dx);
            }
        }
        Op::LogSumExpRows(x) => {
            if wants_grad(inputs, *x) {
                let xd = &inputs[x.index()].tensor.data;
                let (r, c) = inputs[x.index()].tensor.dims2();
                let lse = &out.data;
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[i] * (xd[i * c + j] - lse[i]).exp();
                    }
                }
                accumulate_owned(inputs, *x, dx);
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let (r, c) = inputs[x.index()].tensor.dims2();
            let cs = s::<S>(c as f64);
            let (mut dx, mut dg) = (None, None);
            {
                let xd = &inputs[x.index()].tensor.data;
                let gd = &inputs[gain.index()].tensor.data;
                if wants_grad(inputs, *x) {
                    let mut delta = vec![S::zero(); r * c];
                    for i in 0..r {
                        let row = &xd[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let (mean, inv_std) = row_moments(row, *eps);
                        // dxhat_j = g_j * gain_j; standard layer-norm backward:
                        // dx = inv_std/C * (C*dxhat − Σdxhat − xhat*Σ(dxhat*xhat))
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = grow[j] * gd[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = grow[j] * gd[j];
                            delta[i * c + j] =
                                inv_std / cs * (cs * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                    dx = Some(delta);
                }
                if wants_grad(inputs, *gain) {
                    let mut delta = vec![S::zero(); c];
                    for i in 0..r {
                        let row = &xd[i * c..(i + 1) * c];
                        let (mean, inv_std) = row_moments(row, *eps);
                        for j in 0..c {
                            delta[j] += g[i * c + j] * ((row[j] - mean) * inv_std);
                        }
                    }
                    dg = Some(delta);
                }
            }
            if let Some(delta) = dx {
                accumulate_owned(inputs, *x, delta);
            }
            if let Some(delta) = dg {
                accumulate_owned(inputs, *gain, delta);
            }
            if wants_grad(inputs, *bias) {
                let mut db = vec![S::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                accumulate_owned(inputs, *bias, db);
            }
        }
        Op::L2NormalizeRows { x, eps } => {
            if wants_grad(inputs, *x) {
                let xd = &inputs[x.index()].tensor.data;
                let (r, c) = inputs[x.index()].tensor.dims2();
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let norm_sq = row.iter().map(|&v| v * v).fold(S::zero(), |a, v| a + v) + *eps;
                    let norm = norm_sq.sqrt();
                    let dot = row.iter().zip(grow).map(|(&xv, &gv)| xv * gv).fold(S::zero(), |a, v| a + v);
                    for j in 0..c {
                        dx[i * c + j] = grow[j] / norm - row[j] * dot / (norm_sq * norm);
                    }
                }
                accumulate_owned(inputs, *x, dx);
            }
        }
        Op::GatherRows { x, indices } => {
            if wants_grad(inputs, *x) {
                let (r, c) = inputs[x.index()].tensor.dims2();
                let mut dx = vec![S::zero(); r * c];
                for (gi, &idx) in indices.iter().enumerate() {
                    for j in 0..c {
                        dx[idx * c + j] += g[gi * c + j];
                    }
                }
                accumulate_owned(inputs, *x, dx);
            }
        }
        Op::SliceRows { x, start } => {
            if wants_grad(inputs, *x) {
                let (r, c) = inputs[x.index()].tensor.dims2();
                let (out_r, _) = out.dims2();
                let mut dx = vec![S::zero(); r * c];
                dx[start * c..(start + out_r) * c].copy_from_slice(g);
                accumulate_owned(inputs, *x, dx);
            }
        }
        Op::SliceCols { x, start } => {
            if wants_grad(inputs, *x) {
                let (r, c) = inputs[x.index()].tensor.dims2();
                let (_, out_c) = out.dims2();
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..out_c {
                        dx[i * c + start + j] = g[i * out_c + j];
                    }
                }
                accumulate_owned(inputs, *x, dx);
            }
        }
        Op::ConcatRows(xs) => {
            let xs = xs.clone();
            let c = out.dims2().1;
            let mut row_offset = 0;
            for x in xs {
                let r = inputs[x.index()].tensor.dims2().0;
                if wants_grad(inputs, x) {
                    let delta = g[row_offset * c..(row_offset + r) * c].to_vec();
                    accumulate_owned(inputs, x, delta);
                }
                row_offset += r;
            }
        }
        Op::ConcatCols(xs) => {
            let xs = xs.clone();
            let (r, total_c) = out.dims2();
            let mut col_offset = 0;
            for x in xs {
                let cx = inputs[x.index()].tensor.dims2().1;
                if wants_grad(inputs, x) {
                    let mut delta = vec![S::zero(); r * cx];
                    for i in 0..r {
                        delta[i * cx..(i + 1) * cx]
                            .copy_from_slice(&g[i * total_c + col_offset..i * total_c + col_offset + cx]);
                    }
                    accumulate_owned(inputs, x, delta);
                }
                col_offset += cx;
            }
        }
        Op::Reshape(x) => {
            accumulate(inputs, *x, g);
        }
        Op::SumAll(x) => {
            if wants_grad(inputs, *x) {
                let n = inputs[x.index()].tensor.numel();
                let delta = vec![g[0]; n];
                accumulate_owned(inputs, *x, delta);
            }
        }
        Op::MeanRows(x) => {
            if wants_grad(inputs, *x) {
                let (r, c) = inputs[x.index()].tensor.dims2();
                let inv = S::one() / s::<S>(r as f64);
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j] * inv;
                    }
                }
                accumulate_owned(inputs, *x, dx);
            }
        }
        Op::Diag(x) => {
            if wants_grad(inputs, *x) {
                let (r, c) = inputs[x.index()].tensor.dims2();
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    dx[i * c + i] = g[i];
                }
                accumulate_owned(inputs, *x, dx);
            }
        }
    }
    Ok(())
}

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = s::<S>(row.len() as f64);
    let mean = row.iter().fold(S::zero(), |a, &v| a + v) / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).fold(S::zero(), |a, v| a + v) / n;
    (mean, S::one() / (var + eps).sqrt())
}

const GELU_COEFF: f64 = 0.044715;

/// `tanh u = 1 − 2/(e²ᵘ + 1)`, an exact identity evaluated through one
/// `exp`, which costs a fraction of a libm `tanh` call and dominates GELU
/// throughput. The subtraction cancels near u = 0, so the *relative* error
/// there is poor while the *absolute* error stays at a couple of ULP of 1 —
/// fine for GELU, where the result only ever enters as `1 + tanh` or
/// `1 − tanh²`. Saturates to exactly ±1 like libm. Not suitable as a
/// general tanh for small arguments.
fn tanh_for_gelu<S: Scalar>(u: S) -> S {
    let two = s::<S>(2.0);
    S::one() - two / ((two * u).exp() + S::one())
}

fn gelu_value<S: Scalar>(x: S) -> S {
    // sqrt(2/π)
    let k = s::<S>(0.7978845608028654);
    let c = s::<S>(GELU_COEFF);
    let half = s::<S>(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (S::one() + tanh_for_gelu(u))
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let k = s::<S>(0.7978845608028654);
    let c = s::<S>(GELU_COEFF);
    let half = s::<S>(0.5);
    let three = s::<S>(3.0);
    let u = k * (x + c * x * x * x);
    let t = tanh_for_gelu(u);
    let sech_sq = S::one() - t * t;
    half * (S::one() + t) + half * x * sech_sq * k * (S::one() + three * c * x * x)
}

/// Row-major `[m×k] · [k×n]` into `out`, which must be zeroed.
///
/// The kernel walks 4-row × 16-column output tiles with the reduction loop
/// innermost, accumulating with fused multiply-add. Per output element the
/// arithmetic is always "ascending-k fused multiply-add into a zeroed
/// accumulator" regardless of which tile or tail path computes it, so the
/// result for a given (row, column) never depends on the surrounding matrix
/// dimensions — sequences encoded alone or batched produce bit-identical
/// rows. Column tails are padded into a 16-wide scratch block (padding
/// contributes exact zeros) to keep the inner loop width fixed.
///
/// Dispatches through [`Scalar::matmul_into`]: on x86-64 with AVX and FMA
/// enabled the f32 path runs a hand-vectorized version of the identical
/// tiling (same chains, packed eight-wide), elsewhere the portable tile.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    S::matmul_into(a, b, m, k, n, out);
}

fn matmul_tiled<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    const TJ: usize = 16;
    const TI: usize = 4;
    let mut scratch: Vec<S> = Vec::new();
    let mut j0 = 0;
    while j0 < n {
        let w = TJ.min(n - j0);
        // Tail column blocks: copy into a zero-padded k×16 scratch so the
        // inner loop can always run at full width.
        let (bblock, bstride): (&[S], usize) = if w == TJ {
            (&b[j0..], n)
        } else {
            scratch.clear();
            scratch.resize(k * TJ, S::zero());
            for kk in 0..k {
                scratch[kk * TJ..kk * TJ + w].copy_from_slice(&b[kk * n + j0..kk * n + j0 + w]);
            }
            (&scratch[..], TJ)
        };
        let mut i0 = 0;
        while i0 < m {
            let rows = TI.min(m - i0);
            let mut acc = [[S::zero(); TJ]; TI];
            if rows == TI {
                for kk in 0..k {
                    let brow = &bblock[kk * bstride..kk * bstride + TJ];
                    for r in 0..TI {
                        let av = a[(i0 + r) * k + kk];
                        for t in 0..TJ {
                            acc[r][t] = av.mul_add(brow[t], acc[r][t]);
                        }
                    }
                }
            } else {
                for kk in 0..k {
                    let brow = &bblock[kk * bstride..kk * bstride + TJ];
                    for r in 0..rows {
                        let av = a[(i0 + r) * k + kk];
                        for t in 0..TJ {
                            acc[r][t] = av.mul_add(brow[t], acc[r][t]);
                        }
                    }
                }
            }
            for r in 0..rows {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + w].copy_from_slice(&acc[r][..w]);
            }
            i0 += TI;
        }
        j0 += TJ;
    }
}

/// The f32 tile from [`matmul_tiled`] with the 16 column lanes held in two
/// packed 8-wide registers. Per output element the operation sequence is
/// exactly the portable kernel's (zero accumulator, ascending-k fused
/// multiply-add, zero-padded column tails), so the two paths are
/// bit-identical; packing only removes the scalar-FMA latency chain the
/// autovectorizer fails to break up.
#[cfg(all(target_arch = "x86_64", target_feature = "avx", target_feature = "fma"))]
fn matmul_f32_fma(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    use std::arch::x86_64::{
        _mm256_fmadd_ps, _mm256_loadu_ps, _mm256_set1_ps, _mm256_setzero_ps, _mm256_storeu_ps,
    };
    const TJ: usize = 16;
    const TI: usize = 4;
    let mut scratch: Vec<f32> = Vec::new();
    let mut j0 = 0;
    while j0 < n {
        let w = TJ.min(n - j0);
        let (bptr, bstride) = if w == TJ {
            (b[j0..].as_ptr(), n)
        } else {
            scratch.clear();
            scratch.resize(k * TJ, 0.0);
            for kk in 0..k {
                scratch[kk * TJ..kk * TJ + w].copy_from_slice(&b[kk * n + j0..kk * n + j0 + w]);
            }
            (scratch.as_ptr(), TJ)
        };
        let mut i0 = 0;
        while i0 < m {
            let rows = TI.min(m - i0);
            // Safety: every pointer stays inside `a`, the selected b block
            // (full-width blocks have at least TJ readable columns per row;
            // tails read the k×TJ scratch) or the 16-float spill buffer.
            unsafe {
                let mut acc = [[_mm256_setzero_ps(); 2]; TI];
                if rows == TI {
                    // Constant trip count so the row loop fully unrolls and
                    // the eight accumulators stay pinned in registers.
                    for kk in 0..k {
                        let bp = bptr.add(kk * bstride);
                        let blo = _mm256_loadu_ps(bp);
                        let bhi = _mm256_loadu_ps(bp.add(8));
                        let ap = a.as_ptr().add(i0 * k + kk);
                        for r in 0..TI {
                            let av = _mm256_set1_ps(*ap.add(r * k));
                            acc[r][0] = _mm256_fmadd_ps(av, blo, acc[r][0]);
                            acc[r][1] = _mm256_fmadd_ps(av, bhi, acc[r][1]);
                        }
                    }
                } else {
                    for kk in 0..k {
                        let bp = bptr.add(kk * bstride);
                        let blo = _mm256_loadu_ps(bp);
                        let bhi = _mm256_loadu_ps(bp.add(8));
                        for r in 0..rows {
                            let av = _mm256_set1_ps(*a.get_unchecked((i0 + r) * k + kk));
                            acc[r][0] = _mm256_fmadd_ps(av, blo, acc[r][0]);
                            acc[r][1] = _mm256_fmadd_ps(av, bhi, acc[r][1]);
                        }
                    }
                }
                let mut spill = [0f32; TJ];
                for r in 0..rows {
                    _mm256_storeu_ps(spill.as_mut_ptr(), acc[r][0]);
                    _mm256_storeu_ps(spill.as_mut_ptr().add(8), acc[r][1]);
                    out[(i0 + r) * n + j0..(i0 + r) * n + j0 + w].copy_from_slice(&spill[..w]);
                }
            }
            i0 += TI;
        }
        j0 += TJ;
    }
}

/// Portable `Aᵀ·B` kernel: [`matmul_tiled`]'s tiling with the contraction
/// running down the rows of both operands, so `a`'s transpose never has to
/// exist in memory. Per output element the chain is identical to
/// `matmul_tiled(transpose(a), b, ..)`.
fn matmul_tn_tiled<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    const TJ: usize = 16;
    const TI: usize = 4;
    let mut scratch: Vec<S> = Vec::new();
    let mut j0 = 0;
    while j0 < n {
        let w = TJ.min(n - j0);
        let (bblock, bstride): (&[S], usize) = if w == TJ {
            (&b[j0..], n)
        } else {
            scratch.clear();
            scratch.resize(m * TJ, S::zero());
            for mm in 0..m {
                scratch[mm * TJ..mm * TJ + w].copy_from_slice(&b[mm * n + j0..mm * n + j0 + w]);
            }
            (&scratch[..], TJ)
        };
        let mut i0 = 0;
        while i0 < k {
            let rows = TI.min(k - i0);
            let mut acc = [[S::zero(); TJ]; TI];
            for mm in 0..m {
                let brow = &bblock[mm * bstride..mm * bstride + TJ];
                for r in 0..rows {
                    let av = a[mm * k + i0 + r];
                    for t in 0..TJ {
                        acc[r][t] = av.mul_add(brow[t], acc[r][t]);
                    }
                }
            }
            for r in 0..rows {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + w].copy_from_slice(&acc[r][..w]);
            }
            i0 += TI;
        }
        j0 += TJ;
    }
}

/// [`matmul_tn_tiled`] with the 16 column lanes in two packed 8-wide
/// registers; bit-identical per element for the same reason as
/// [`matmul_f32_fma`].
#[cfg(all(target_arch = "x86_64", target_feature = "avx", target_feature = "fma"))]
fn matmul_tn_f32_fma(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    use std::arch::x86_64::{
        _mm256_fmadd_ps, _mm256_loadu_ps, _mm256_set1_ps, _mm256_setzero_ps, _mm256_storeu_ps,
    };
    const TJ: usize = 16;
    const TI: usize = 4;
    let mut scratch: Vec<f32> = Vec::new();
    let mut j0 = 0;
    while j0 < n {
        let w = TJ.min(n - j0);
        let (bptr, bstride) = if w == TJ {
            (b[j0..].as_ptr(), n)
        } else {
            scratch.clear();
            scratch.resize(m * TJ, 0.0);
            for mm in 0..m {
                scratch[mm * TJ..mm * TJ + w].copy_from_slice(&b[mm * n + j0..mm * n + j0 + w]);
            }
            (scratch.as_ptr(), TJ)
        };
        let mut i0 = 0;
        while i0 < k {
            let rows = TI.min(k - i0);
            // Safety: identical bounds reasoning to `matmul_f32_fma`, with
            // `a` reads at `mm*k + i` for `i < k`. The four a-values per
            // step are adjacent, which is the point of this layout.
            unsafe {
                let mut acc = [[_mm256_setzero_ps(); 2]; TI];
                if rows == TI {
                    for mm in 0..m {
                        let bp = bptr.add(mm * bstride);
                        let blo = _mm256_loadu_ps(bp);
                        let bhi = _mm256_loadu_ps(bp.add(8));
                        let ap = a.as_ptr().add(mm * k + i0);
                        for r in 0..TI {
                            let av = _mm256_set1_ps(*ap.add(r));
                            acc[r][0] = _mm256_fmadd_ps(av, blo, acc[r][0]);
                            acc[r][1] = _mm256_fmadd_ps(av, bhi, acc[r][1]);
                        }
                    }
                } else {
                    for mm in 0..m {
                        let bp = bptr.add(mm * bstride);
                        let blo = _mm256_loadu_ps(bp);
                        let bhi = _mm256_loadu_ps(bp.add(8));
                        for r in 0..rows {
                            let av = _mm256_set1_ps(*a.get_unchecked(mm * k + i0 + r));
                            acc[r][0] = _mm256_fmadd_ps(av, blo, acc[r][0]);
                            acc[r][1] = _mm256_fmadd_ps(av, bhi, acc[r][1]);
                        }
                    }
                }
                let mut spill = [0f32; TJ];
                for r in 0..rows {
                    _mm256_storeu_ps(spill.as_mut_ptr(), acc[r][0]);
                    _mm256_storeu_ps(spill.as_mut_ptr().add(8), acc[r][1]);
                    out[(i0 + r) * n + j0..(i0 + r) * n + j0 + w].copy_from_slice(&spill[..w]);
                }
            }
            i0 += TI;
        }
        j0 += TJ;
    }
}

/// `Aᵀ · B` without materializing the transpose; see
/// [`Scalar::matmul_tn_into`] for the layout contract.
pub fn matmul_tn_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    S::matmul_tn_into(a, b, m, k, n, out);
}

/// `A · Bᵀ` without materializing the transpose; see
/// [`Scalar::matmul_nt_into`] for the layout contract and the (gradients
/// only) reassociation caveat.
pub fn matmul_nt_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    S::matmul_nt_into(a, b, m, k, n, out);
}

/// [`Scalar::matmul_nt_into`]'s f32 override: 2×4 output blocks, eight-lane
/// fused multiply-adds down the shared contiguous axis, lane sums folded at
/// the end (plus a scalar tail when 8 ∤ k). Every element — tail or not —
/// gets exactly this vector-chain-then-fold order, so a given pair of rows
/// produces the same dot product whatever the surrounding matrix shapes
/// are. The order does differ from the portable version's scalar chain
/// (acceptable: builds never mix kernels).
#[cfg(all(target_arch = "x86_64", target_feature = "avx", target_feature = "fma"))]
fn matmul_nt_f32_fma(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    use std::arch::x86_64::{
        __m256, _mm256_castps256_ps128, _mm256_extractf128_ps, _mm256_fmadd_ps, _mm256_loadu_ps,
        _mm256_setzero_ps, _mm_add_ps, _mm_add_ss, _mm_cvtss_f32, _mm_movehl_ps, _mm_shuffle_ps,
    };
    #[inline(always)]
    unsafe fn hsum(v: __m256) -> f32 {
        let q = _mm_add_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps(v, 1));
        let d = _mm_add_ps(q, _mm_movehl_ps(q, q));
        _mm_cvtss_f32(_mm_add_ss(d, _mm_shuffle_ps(d, d, 0x55)))
    }
    /// One element in the identical order the blocked path uses.
    ///
    /// Safety: caller guarantees `k` readable floats at both pointers and
    /// `kv = k − k % 8`.
    #[inline(always)]
    unsafe fn dot_one(ar: *const f32, br: *const f32, k: usize, kv: usize) -> f32 {
        let mut acc = _mm256_setzero_ps();
        let mut kk = 0;
        while kk < kv {
            acc = _mm256_fmadd_ps(_mm256_loadu_ps(ar.add(kk)), _mm256_loadu_ps(br.add(kk)), acc);
            kk += 8;
        }
        let mut sum = hsum(acc);
        for t in kv..k {
            sum = (*ar.add(t)).mul_add(*br.add(t), sum);
        }
        sum
    }
    const TI: usize = 2;
    const TJ: usize = 4;
    let kv = k - k % 8;
    let mut i0 = 0;
    while i0 + TI <= m {
        let mut j0 = 0;
        while j0 + TJ <= n {
            // Safety: all loads stay within rows of `a` and `b`; `kk + 8 ≤
            // kv ≤ k` bounds every eight-float load.
            unsafe {
                let mut acc = [[_mm256_setzero_ps(); TJ]; TI];
                let mut kk = 0;
                while kk < kv {
                    let a0 = _mm256_loadu_ps(a.as_ptr().add(i0 * k + kk));
                    let a1 = _mm256_loadu_ps(a.as_ptr().add((i0 + 1) * k + kk));
                    for jj in 0..TJ {
                        let bv = _mm256_loadu_ps(b.as_ptr().add((j0 + jj) * k + kk));
                        acc[0][jj] = _mm256_fmadd_ps(a0, bv, acc[0][jj]);
                        acc[1][jj] = _mm256_fmadd_ps(a1, bv, acc[1][jj]);
                    }
                    kk += 8;
                }
                for r in 0..TI {
                    for jj in 0..TJ {
                        let mut sum = hsum(acc[r][jj]);
                        let i = i0 + r;
                        let j = j0 + jj;
                        for t in kv..k {
                            sum = a[i * k + t].mul_add(b[j * k + t], sum);
                        }
                        out[i * n + j] = sum;
                    }
                }
            }
            j0 += TJ;
        }
        // Column tail: whole rows of b against the current pair of a rows.
        for j in j0..n {
            for r in 0..TI {
                let i = i0 + r;
                out[i * n + j] =
                    unsafe { dot_one(a.as_ptr().add(i * k), b.as_ptr().add(j * k), k, kv) };
            }
        }
        i0 += TI;
    }
    // Row tail.
    for i in i0..m {
        for j in 0..n {
            out[i * n + j] =
                unsafe { dot_one(a.as_ptr().add(i * k), b.as_ptr().add(j * k), k, kv) };
        }
    }
}

/// Row-major transpose, walked in square blocks so both the reads and the
/// strided writes stay within a handful of cache lines at a time.
pub fn transpose_raw<S: Scalar>(x: &[S], r: usize, c: usize) -> Vec<S> {
    const BLK: usize = 16;
    let mut out = vec![S::zero(); r * c];
    let mut i0 = 0;
    while i0 < r {
        let i1 = r.min(i0 + BLK);
        let mut j0 = 0;
        while j0 < c {
            let j1 = c.min(j0 + BLK);
            for i in i0..i1 {
                for j in j0..j1 {
                    out[j * r + i] = x[i * c + j];
                }
            }
            j0 = j1;
        }
        i0 = i1;
    }
    out
}

/// Central-difference gradient of a scalar-valued function at `x`:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate. This is the
/// independent oracle the analytic backward pass is checked against.
pub fn finite_diff_grad<S: Scalar, F>(mut f: F, x: &Tensor<S>, h: S) -> Result<Tensor<S>>
where
    F: FnMut(&Tensor<S>) -> Result<S>,
{
    if h <= S::zero() {
        return Err(Error::Contract("finite_diff_grad needs h > 0".into()));
    }
    let mut probe = x.clone();
    let mut grad = vec![S::zero(); x.numel()];
    let two_h = s::<S>(2.0) * h;
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe)?;
        probe.data[i] = orig - h;
        let fm = f(&probe)?;
        probe.data[i] = orig;
        grad[i] = (fp - fm) / two_h;
    }
    Tensor::new(x.shape.clone(), grad)
}
