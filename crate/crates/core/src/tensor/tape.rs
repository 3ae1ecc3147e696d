use std::collections::HashMap;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Admissibility pattern applied inside a row softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Lower-triangular mask: row `i` may attend to columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|k| k % n <= k / n).collect();
        Self { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.n..(i + 1) * self.n]
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddTiled(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    PrependToken {
        x: Var,
        token: Var,
        seq_len: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddTiled(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Slice { x, .. } | Op::Gather { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::PrependToken { x, token, .. } => vec![*x, *token],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { qkv, .. } => vec![*qkv],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracks: bool,
    grad: Option<Vec<T>>,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// Nodes are appended as operations run, so the record is topologically
/// ordered by construction. Model parameters are registered with
/// [`Tape::param`], keyed by the address of the owning [`Tensor`]; the
/// model must not move between the forward pass and gradient collection.
///
/// Every floating-point multiply-accumulate performed by a matrix product
/// or by attention is counted (see [`Tape::macs`]).
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    grad_enabled: bool,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            macs: 0,
        }
    }

    /// A tape that never tracks gradients (evaluation mode).
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matrix products and attention so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a tracked leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a parameter registered with [`Tape::param`].
    pub fn param_grad(&self, p: &Tensor<T>) -> Option<&[T]> {
        self.params
            .get(&(p as *const Tensor<T> as usize))
            .and_then(|&v| self.grad(v))
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let tracks = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracks,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter tensor; repeated calls with the same tensor
    /// return the same node.
    pub fn param(&mut self, p: &Tensor<T>) -> Var {
        let key = p as *const Tensor<T> as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let mut value = p.clone();
        value.zero_grad();
        let v = self.leaf(value, p.requires_grad());
        self.params.insert(key, v);
        v
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, inner: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let tracks = self.grad_enabled && inner.inputs().iter().any(|i| self.nodes[i.0].tracks);
        // Saved intermediates are only needed when gradients flow.
        let inner = if tracks { inner } else { strip(inner) };
        self.nodes.push(Node {
            value,
            op: inner,
            tracks,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tensor(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("kernel output shape")
    }

    fn as_matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_matrix(a, "matmul")?;
        let (k2, n) = self.as_matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.macs += (m * k * n) as u64;
        self.push("matmul", Self::tensor(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.as_matrix(x, "transpose")?;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.push("transpose", Self::tensor(vec![n, m], out), Op::Transpose(x))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        node: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.value(a), self.value(b));
        let shape = if sa.shape() == sb.shape() || sb.numel() == 1 {
            sa.shape().to_vec()
        } else if sa.numel() == 1 {
            sb.shape().to_vec()
        } else {
            return Err(Error::Dimension {
                op,
                lhs: sa.shape().to_vec(),
                rhs: sb.shape().to_vec(),
            });
        };
        let n: usize = shape.iter().product();
        let (da, db) = (sa.data(), sb.data());
        let pick = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let out = (0..n).map(|i| f(pick(da, i), pick(db, i))).collect();
        self.push(op, Self::tensor(shape, out), node)
    }

    /// Elementwise sum; `b` may also be a one-element tensor (or vice versa).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s))
    }

    /// `x + tile(b)`: `b` repeats along the leading axis to cover `x`.
    /// Covers bias rows (`b: [C]`) and per-position tables (`b: [N, C]`
    /// added to `N`-token sequences stacked in `x`).
    pub fn add_tiled(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let m = vb.numel();
        let trailing_ok = vx.shape().ends_with(vb.shape())
            || (vb.rank() == 2 && vx.rank() == 2 && vb.last_dim() == vx.last_dim());
        if !trailing_ok || vx.numel() % m != 0 {
            return Err(Error::Dimension {
                op: "add_tiled",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let bd = vb.data();
        let out = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % m])
            .collect();
        let shape = vx.shape().to_vec();
        self.push("add_tiled", Self::tensor(shape, out), Op::AddTiled(x, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        self.push("gelu", out, Op::Gelu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax_impl(x, None)
    }

    /// Softmax over the last axis of a square `[N×N]` score matrix; disallowed
    /// entries are treated as −∞ and come out exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &AttentionMask) -> Result<Var> {
        let (r, c) = self.as_matrix(x, "masked_softmax")?;
        if r != mask.len() || c != mask.len() {
            return Err(Error::Dimension {
                op: "masked_softmax",
                lhs: vec![r, c],
                rhs: vec![mask.len(), mask.len()],
            });
        }
        self.masked_softmax_impl(x, Some(mask))
    }

    fn masked_softmax_impl(&mut self, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.zero_grad();
        let c = out.last_dim();
        for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
            kernels::softmax_row(row, mask.map(|m| m.row(r)));
        }
        self.push("softmax", out, Op::Softmax(x))
    }

    /// Normalizes each last-axis row to zero mean and unit population
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let c = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [c] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if eps < T::zero() {
            return Err(Error::Contract("layer_norm eps must be ≥ 0".into()));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let (mean, var) = kernels::mean_var(row);
            let denom = var + eps;
            if denom <= T::zero() {
                return Err(Error::Degenerate {
                    op: "layer_norm",
                    detail: "zero variance row with eps = 0".into(),
                });
            }
            let is = T::one() / denom.sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            "layer_norm",
            Self::tensor(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank ≥ 1") = width;
        let mut out = Vec::with_capacity(xv.rows() * width);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..start + width]);
        }
        self.push("split_last", Self::tensor(shape, out), Op::Slice { x, start })
    }

    /// Splits the last axis into consecutive parts of the given widths.
    pub fn split_last(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.value(x).last_dim();
        if self.value(x).rank() == 0 {
            return Err(Error::Contract("split_last on a scalar".into()));
        }
        let total: usize = sizes.iter().sum();
        if total != c || sizes.contains(&0) {
            return Err(Error::Partition {
                op: "split_last",
                expected: c,
                got: total,
            });
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &w in sizes {
            parts.push(self.slice_last(x, start, w)?);
            start += w;
        }
        Ok(parts)
    }

    /// Concatenates along the last axis; all other extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_last of zero parts".into()))?;
        let lead = self.value(first).shape();
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension {
                    op: "concat_last",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            width += s[s.len() - 1];
        }
        let rows = self.value(first).rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        self.push(
            "concat_last",
            Self::tensor(shape, out),
            Op::Concat(parts.to_vec()),
        )
    }

    /// Selects rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.as_matrix(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Range {
                what: "row index",
                value: bad,
                limit: r,
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(xv.row(i));
        }
        self.push(
            "gather_rows",
            Self::tensor(vec![rows.len(), c], out),
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Inserts a learned `[1×C]` token before every `seq_len`-row sequence of `x`.
    pub fn prepend_token(&mut self, x: Var, token: Var, seq_len: usize) -> Result<Var> {
        let (r, c) = self.as_matrix(x, "prepend_token")?;
        if self.shape(token) != [1, c] || seq_len == 0 || r % seq_len != 0 {
            return Err(Error::Dimension {
                op: "prepend_token",
                lhs: vec![r, c],
                rhs: self.shape(token).to_vec(),
            });
        }
        let batch = r / seq_len;
        let (xv, tv) = (self.value(x), self.value(token));
        let mut out = Vec::with_capacity((r + batch) * c);
        for b in 0..batch {
            out.extend_from_slice(tv.data());
            out.extend_from_slice(&xv.data()[b * seq_len * c..(b + 1) * seq_len * c]);
        }
        self.push(
            "prepend_token",
            Self::tensor(vec![r + batch, c], out),
            Op::PrependToken { x, token, seq_len },
        )
    }

    /// Looks up rows of an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.as_matrix(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Range {
                what: "token id",
                value: bad,
                limit: v,
            });
        }
        if ids.is_empty() {
            return Err(Error::Contract("embedding of zero ids".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        self.push(
            "embedding",
            Self::tensor(vec![ids.len(), c], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product attention over a fused `[R×3C]`
    /// query/key/value projection, `R` = sequences × `seq_len`.
    ///
    /// Scores are scaled by `1/√(C/heads)`. Counts `2·seq_len²·C`
    /// multiply-accumulates per sequence (the full score matrix, even when
    /// causal).
    pub fn attention(
        &mut self,
        qkv: Var,
        heads: usize,
        seq_len: usize,
        causal: bool,
    ) -> Result<Var> {
        let (r, c3) = self.as_matrix(qkv, "attention")?;
        if c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 || seq_len == 0 || r % seq_len != 0
        {
            return Err(Error::Dimension {
                op: "attention",
                lhs: vec![r, c3],
                rhs: vec![heads, seq_len],
            });
        }
        let c = c3 / 3;
        let dh = c / heads;
        let n = seq_len;
        let batch = r / n;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mask = causal.then(|| AttentionMask::causal(n));
        let q = self.value(qkv).data();
        let mut probs = vec![T::zero(); batch * heads * n * n];
        let mut out = vec![T::zero(); r * c];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                let qoff = h * dh;
                let koff = c + h * dh;
                let voff = 2 * c + h * dh;
                for i in 0..n {
                    let qi = &q[(b * n + i) * c3 + qoff..(b * n + i) * c3 + qoff + dh];
                    for j in 0..n {
                        let kj = &q[(b * n + j) * c3 + koff..(b * n + j) * c3 + koff + dh];
                        p[i * n + j] = kernels::dot(qi, kj) * scale;
                    }
                    kernels::softmax_row(&mut p[i * n..(i + 1) * n], mask.as_ref().map(|m| m.row(i)));
                    let orow = &mut out[(b * n + i) * c + qoff..(b * n + i) * c + qoff + dh];
                    for j in 0..n {
                        let pij = p[i * n + j];
                        let vj = &q[(b * n + j) * c3 + voff..(b * n + j) * c3 + voff + dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
            }
        }
        self.macs += (2 * batch * n * n * c) as u64;
        self.push(
            "attention",
            Self::tensor(vec![r, c], out),
            Op::Attention {
                qkv,
                heads,
                seq_len,
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean softmax cross-entropy of `logits[R×V]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, v) = self.as_matrix(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![r, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Range {
                what: "class id",
                value: bad,
                limit: v,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
            kernels::softmax_row(row, None);
        }
        loss /= T::of(r as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from a one-element `loss`, adding into the gradient of
    /// every tracked leaf. Calling it again without [`Tape::zero_grad`]
    /// accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].tracks {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracks {
                continue;
            }
            if let Op::Leaf = node.op {
                let n = &mut self.nodes[i];
                match &mut n.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &v)| *b += v),
                    None => n.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let tracks = |v: Var| self.nodes[v.0].tracks;
        // Adds `delta` into the adjoint buffer of `v`.
        let acc = |adj: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].tracks {
                return;
            }
            match &mut adj[v.0] {
                Some(buf) => buf.iter_mut().zip(&delta).for_each(|(b, &d)| *b += d),
                slot @ None => *slot = Some(delta),
            }
        };
        // Reduces a gradient to the shape of a possibly-broadcast operand.
        let reduce = |v: Var, full: Vec<T>| -> Vec<T> {
            if val(v).numel() == 1 && full.len() != 1 {
                vec![full.into_iter().sum()]
            } else {
                full
            }
        };
        let expand = |n: usize| -> Vec<T> {
            if g.len() == 1 && n != 1 {
                vec![g[0]; n]
            } else {
                g.to_vec()
            }
        };
        let pick = |d: &[T], k: usize| if d.len() == 1 { d[0] } else { d[k] };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if tracks(*a) {
                    acc(adj, *a, kernels::matmul_nt(g, val(*b).data(), m, n, k));
                }
                if tracks(*b) {
                    acc(adj, *b, kernels::matmul_tn(val(*a).data(), g, m, k, n));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut out = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = g[j * m + i];
                    }
                }
                acc(adj, *x, out);
            }
            Op::Add(a, b) => {
                let n = node.value.numel();
                acc(adj, *a, reduce(*a, expand(n)));
                acc(adj, *b, reduce(*b, expand(n)));
            }
            Op::Sub(a, b) => {
                let n = node.value.numel();
                acc(adj, *a, reduce(*a, expand(n)));
                acc(adj, *b, reduce(*b, expand(n).into_iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let n = node.value.numel();
                let (da, db) = (val(*a).data(), val(*b).data());
                if tracks(*a) {
                    let ga = (0..n).map(|k| g[k] * pick(db, k)).collect();
                    acc(adj, *a, reduce(*a, ga));
                }
                if tracks(*b) {
                    let gb = (0..n).map(|k| g[k] * pick(da, k)).collect();
                    acc(adj, *b, reduce(*b, gb));
                }
            }
            Op::Scale(x, s) => acc(adj, *x, g.iter().map(|&v| v * *s).collect()),
            Op::AddTiled(x, b) => {
                acc(adj, *x, g.to_vec());
                if tracks(*b) {
                    let m = val(*b).numel();
                    let mut gb = vec![T::zero(); m];
                    for (k, &v) in g.iter().enumerate() {
                        gb[k % m] += v;
                    }
                    acc(adj, *b, gb);
                }
            }
            Op::Relu(x) => {
                let d = val(*x).data();
                let out = g
                    .iter()
                    .zip(d)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(adj, *x, out);
            }
            Op::Gelu(x) => {
                let d = val(*x).data();
                let out = g
                    .iter()
                    .zip(d)
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                acc(adj, *x, out);
            }
            Op::Softmax(x) => {
                let c = node.value.last_dim();
                let mut out = vec![T::zero(); g.len()];
                for ((p, gr), o) in node
                    .value
                    .data()
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(out.chunks_mut(c))
                {
                    kernels::softmax_row_grad(p, gr, o);
                }
                acc(adj, *x, out);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.last_dim();
                let gn = val(*gain).data();
                if tracks(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let cf = T::of(c as f64);
                    for (r, ((gr, hr), dr)) in g
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(dx.chunks_mut(c))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gn[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        for j in 0..c {
                            dr[j] = inv_std[r] * (gr[j] * gn[j] - m1 - hr[j] * m2);
                        }
                    }
                    acc(adj, *x, dx);
                }
                if tracks(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    acc(adj, *gain, dg);
                }
                if tracks(*bias) {
                    let mut db = vec![T::zero(); c];
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            db[j] += gr[j];
                        }
                    }
                    acc(adj, *bias, db);
                }
            }
            Op::Slice { x, start } => {
                let c = val(*x).last_dim();
                let w = node.value.last_dim();
                let mut out = vec![T::zero(); val(*x).numel()];
                for (orow, grow) in out.chunks_mut(c).zip(g.chunks(w)) {
                    orow[*start..*start + w].copy_from_slice(grow);
                }
                acc(adj, *x, out);
            }
            Op::Concat(parts) => {
                let c = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).last_dim();
                    if tracks(p) {
                        let mut out = Vec::with_capacity(val(p).numel());
                        for grow in g.chunks(c) {
                            out.extend_from_slice(&grow[offset..offset + w]);
                        }
                        acc(adj, p, out);
                    }
                    offset += w;
                }
            }
            Op::Gather { x, rows } => {
                let c = node.value.last_dim();
                let mut out = vec![T::zero(); val(*x).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        out[r * c + j] += g[k * c + j];
                    }
                }
                acc(adj, *x, out);
            }
            Op::PrependToken { x, token, seq_len } => {
                let c = node.value.last_dim();
                let block = (seq_len + 1) * c;
                let mut gx = Vec::with_capacity(val(*x).numel());
                let mut gt = vec![T::zero(); c];
                for chunk in g.chunks(block) {
                    for j in 0..c {
                        gt[j] += chunk[j];
                    }
                    gx.extend_from_slice(&chunk[c..]);
                }
                acc(adj, *x, gx);
                acc(adj, *token, gt);
            }
            Op::Embedding { table, ids } => {
                let c = node.value.last_dim();
                let mut out = vec![T::zero(); val(*table).numel()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        out[id * c + j] += g[k * c + j];
                    }
                }
                acc(adj, *table, out);
            }
            Op::Attention {
                qkv,
                heads,
                seq_len,
                probs,
            } => {
                acc(adj, *qkv, self.attention_backward(*qkv, *heads, *seq_len, probs, g));
            }
            Op::Sum(x) => acc(adj, *x, vec![g[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                acc(adj, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = val(*logits).last_dim();
                let scale = g[0] / T::of(targets.len() as f64);
                let mut out = probs.clone();
                for (row, &t) in out.chunks_mut(v).zip(targets) {
                    row[t] -= T::one();
                    row.iter_mut().for_each(|e| *e *= scale);
                }
                acc(adj, *logits, out);
            }
        }
    }

    fn attention_backward(
        &self,
        qkv: Var,
        heads: usize,
        n: usize,
        probs: &[T],
        g: &[T],
    ) -> Vec<T> {
        let q = self.nodes[qkv.0].value.data();
        let c3 = self.nodes[qkv.0].value.last_dim();
        let c = c3 / 3;
        let dh = c / heads;
        let batch = q.len() / c3 / n;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = vec![T::zero(); q.len()];
        let mut dp = vec![T::zero(); n * n];
        let mut ds = vec![T::zero(); n];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                let (qoff, koff, voff) = (h * dh, c + h * dh, 2 * c + h * dh);
                let row = |t: usize, off: usize| (b * n + t) * c3 + off;
                let grow = |t: usize| (b * n + t) * c + qoff;
                // dP = dO · Vᵀ, dV = Pᵀ · dO
                for i in 0..n {
                    let go = &g[grow(i)..grow(i) + dh];
                    for j in 0..n {
                        let vj = &q[row(j, voff)..row(j, voff) + dh];
                        dp[i * n + j] = kernels::dot(go, vj);
                        let pij = p[i * n + j];
                        if pij != T::zero() {
                            for d in 0..dh {
                                dq[row(j, voff) + d] += pij * go[d];
                            }
                        }
                    }
                }
                // dS = P ⊙ (dP − rowsum(P ⊙ dP)), then dQ, dK
                for i in 0..n {
                    ds.iter_mut().for_each(|v| *v = T::zero());
                    kernels::softmax_row_grad(&p[i * n..(i + 1) * n], &dp[i * n..(i + 1) * n], &mut ds);
                    for j in 0..n {
                        let s = ds[j] * scale;
                        if s == T::zero() {
                            continue;
                        }
                        for d in 0..dh {
                            let kj = q[row(j, koff) + d];
                            let qi = q[row(i, qoff) + d];
                            dq[row(i, qoff) + d] += s * kj;
                            dq[row(j, koff) + d] += s * qi;
                        }
                    }
                }
            }
        }
        dq
    }
}

fn strip<T>(op: Op<T>) -> Op<T> {
    match op {
        Op::LayerNorm { x, gain, bias, .. } => Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: Vec::new(),
            inv_std: Vec::new(),
        },
        Op::Attention {
            qkv,
            heads,
            seq_len,
            ..
        } => Op::Attention {
            qkv,
            heads,
            seq_len,
            probs: Vec::new(),
        },
        Op::CrossEntropy {
            logits, targets, ..
        } => Op::CrossEntropy {
            logits,
            targets,
            probs: Vec::new(),
        },
        other => other,
    }
}
