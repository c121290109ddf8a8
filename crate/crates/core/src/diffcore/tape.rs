//! Reverse-mode differentiation tape.
//!
//! Operations are recorded in forward order into an arena of nodes; the
//! backward pass replays them in reverse, accumulating vector-Jacobian
//! products. Every primitive validates its output for non-finite values and
//! fails with an error naming the primitive rather than propagating NaN/Inf.

use crate::diffcore::linalg::{gemm, permute_raw};
use crate::diffcore::tensor::Tensor;
use crate::error::{CmcError, Result};
use crate::scalar::Scalar;

pub type NodeId = usize;

/// Forward/eval switch for dropout and batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<E> {
    Leaf {
        param: bool,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: NodeId,
        b: NodeId,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: E,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
        rows: usize,
        n: usize,
    },
    Relu {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<E>,
    },
    SumAxis {
        x: NodeId,
        axis: usize,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    L2NormalizeRows {
        x: NodeId,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
        sizes: Vec<usize>,
    },
    SliceAxis {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    SoftmaxLast {
        x: NodeId,
    },
    LogSoftmaxLast {
        x: NodeId,
    },
    SumSq {
        x: NodeId,
    },
    CrossEntropyMean {
        logits: NodeId,
        labels: Vec<usize>,
        classes: usize,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        kernel: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<E>,
        var: Vec<E>,
        train: bool,
        eps: E,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: E,
    },
    ScaleRows {
        x: NodeId,
        w: NodeId,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct Node<E> {
    pub value: Tensor<E>,
    pub op: Op<E>,
}

/// Batch statistics reported by a train-mode batchnorm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    /// Biased variance (used for normalization).
    pub var: Vec<E>,
    /// Unbiased variance (used for the running estimate).
    pub var_unbiased: Vec<E>,
}

/// Gradients produced by a backward pass, indexed by node.
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of the given shape if nothing flowed to it.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: &[usize]) -> Tensor<E> {
        match self.grads.get_mut(id).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(shape.to_vec()),
        }
    }

    pub(crate) fn from_raw(grads: Vec<Option<Tensor<E>>>) -> Self {
        Gradients { grads }
    }
}

/// Counter-based dropout key: masks depend only on (seed, step, call index).
#[derive(Clone, Copy, Debug, Default)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Tape<E> {
    pub(crate) nodes: Vec<Node<E>>,
    dropout_key: DropoutKey,
    dropout_calls: u64,
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), dropout_key: DropoutKey::default(), dropout_calls: 0 }
    }

    pub fn with_dropout_key(key: DropoutKey) -> Self {
        Tape { nodes: Vec::new(), dropout_key: key, dropout_calls: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of leaves registered as trainable parameters.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf { param: true }))
            .count()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Register a constant/input leaf.
    pub fn input(&mut self, value: Tensor<E>) -> NodeId {
        self.push_unchecked(value, Op::Leaf { param: false })
    }

    /// Register a trainable-parameter leaf.
    pub fn param(&mut self, value: Tensor<E>) -> NodeId {
        self.push_unchecked(value, Op::Leaf { param: true })
    }

    fn push_unchecked(&mut self, value: Tensor<E>, op: Op<E>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        id
    }

    fn push(&mut self, name: &'static str, value: Tensor<E>, op: Op<E>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(CmcError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op))
    }

    fn shape_err(op: &'static str, detail: String) -> CmcError {
        CmcError::Shape { op, detail }
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// `a [m,k] @ b [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::ZERO; m * n];
        gemm(self.nodes[a].value.data(), self.nodes[b].value.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n })
    }

    /// Batched matmul: `a [g,m,k] @ b [g,k,n] -> [g,m,n]`
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Self::shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![E::ZERO; g * m * n];
        for gi in 0..g {
            gemm(
                &self.nodes[a].value.data()[gi * m * k..(gi + 1) * m * k],
                &self.nodes[b].value.data()[gi * k * n..(gi + 1) * k * n],
                &mut out[gi * m * n..(gi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push("bmm", Tensor::new(vec![g, m, n], out)?, Op::Bmm { a, b, g, m, k, n })
    }

    /// Axis permutation; `axes` must be a permutation of `0..rank`.
    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let in_shape = self.shape(x).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Self::shape_err("permute", format!("axes {axes:?} for shape {in_shape:?}")));
        }
        let (out_shape, out) = permute_raw(&in_shape, self.nodes[x].value.data(), axes);
        self.push("permute", Tensor::new(out_shape, out)?, Op::Permute { x, axes: axes.to_vec() })
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.nodes[x].value.reshaped(shape)?;
        self.push("reshape", t, Op::Reshape { x })
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn zip_ew(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<E> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, t, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_ew("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_ew("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_ew("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: E) -> Result<NodeId> {
        let t = self.nodes[x].value.map(|v| v * c);
        self.push("scale", t, Op::Scale { x, c })
    }

    /// Broadcast-add a `[n]` bias over the trailing axis of `x [..., n]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = self.shape(bias).iter().product::<usize>();
        let xs = self.shape(x).to_vec();
        if self.shape(bias).len() != 1 || xs.last() != Some(&n) {
            return Err(Self::shape_err("add_bias", format!("{xs:?} + bias {:?}", self.shape(bias))));
        }
        let rows = self.nodes[x].value.numel() / n;
        let bd = self.nodes[bias].value.data().to_vec();
        let mut out = self.nodes[x].value.data().to_vec();
        for r in 0..rows {
            for j in 0..n {
                out[r * n + j] += bd[j];
            }
        }
        self.push("add_bias", Tensor::new(xs, out)?, Op::AddBias { x, bias, rows, n })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.nodes[x].value.map(|v| v.maximum(E::ZERO));
        self.push("relu", t, Op::Relu { x })
    }

    /// Inverted dropout. Identity in eval mode; in train mode the keep mask is
    /// drawn from a counter-based stream keyed by (seed, step, call index).
    pub fn dropout(&mut self, x: NodeId, p: f64, mode: Mode) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(CmcError::Domain(format!("dropout rate {p} outside [0,1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let layer = self.dropout_calls;
        self.dropout_calls += 1;
        let mut state = self
            .dropout_key
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.dropout_key.step)
            .rotate_left(17)
            .wrapping_add(layer.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let keep_scale = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..self.nodes[x].value.numel())
            .map(|_| {
                let u = (splitmix64(&mut state) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                if u < p {
                    E::ZERO
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<E> = self.nodes[x]
            .value
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("dropout", t, Op::Dropout { x, mask })
    }

    // ── Reductions ───────────────────────────────────────────────────

    fn reduce_axis(
        &mut self,
        name: &'static str,
        x: NodeId,
        axis: usize,
        mean: bool,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Self::shape_err(name, format!("axis {axis} for shape {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let mid = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out_shape = xs.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let data = self.nodes[x].value.data();
        let mut out = vec![E::ZERO; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        if mean {
            let inv = E::from_f64(1.0 / mid as f64);
            for v in &mut out {
                *v *= inv;
            }
        }
        let op = if mean { Op::MeanAxis { x, axis } } else { Op::SumAxis { x, axis } };
        self.push(name, Tensor::new(out_shape, out)?, op)
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].value.numel();
        let flat = self.reshape(x, vec![n])?;
        self.sum_axis(flat, 0)
    }

    /// Squared L2 norm of all elements, as a `[1]` scalar.
    pub fn sum_sq(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[x].value.data().iter().map(|v| v.to_f64() * v.to_f64()).sum();
        self.push("sum_sq", Tensor::scalar(E::from_f64(s)), Op::SumSq { x })
    }

    // ── Normalization ────────────────────────────────────────────────

    /// L2-normalize each row (trailing axis). Rows with norm below 1e-12 get
    /// 1e-12 added to the denominator; the quotient is undefined at zero.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| Self::shape_err("l2_normalize", "rank 0".into()))?;
        let rows = self.nodes[x].value.numel() / n;
        let data = self.nodes[x].value.data();
        let mut out = vec![E::ZERO; data.len()];
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            let denom = l2_denom(row);
            for j in 0..n {
                out[r * n + j] = row[j] / denom;
            }
        }
        self.push("l2_normalize", Tensor::new(xs, out)?, Op::L2NormalizeRows { x })
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Self::shape_err("concat", "no inputs".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Self::shape_err("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        let mut total = 0usize;
        for &id in xs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Self::shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            sizes.push(s[axis]);
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![E::ZERO; outer * total * inner];
        for o in 0..outer {
            let mut off = 0usize;
            for (xi, &id) in xs.iter().enumerate() {
                let mid = sizes[xi];
                let src = self.nodes[id].value.data();
                let src_base = o * mid * inner;
                let dst_base = (o * total + off) * inner;
                out[dst_base..dst_base + mid * inner]
                    .copy_from_slice(&src[src_base..src_base + mid * inner]);
                off += mid;
            }
        }
        self.push(
            "concat",
            Tensor::new(out_shape, out)?,
            Op::Concat { xs: xs.to_vec(), axis, sizes },
        )
    }

    pub fn slice_axis(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Self::shape_err(
                "slice_axis",
                format!("[{start}..{}] on axis {axis} of {xs:?}", start + len),
            ));
        }
        let outer: usize = xs[..axis].iter().product();
        let mid = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out_shape = xs.clone();
        out_shape[axis] = len;
        let data = self.nodes[x].value.data();
        let mut out = vec![E::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&data[src..src + len * inner]);
        }
        self.push("slice_axis", Tensor::new(out_shape, out)?, Op::SliceAxis { x, axis, start, len })
    }

    // ── Softmax family ───────────────────────────────────────────────

    /// Row-wise softmax over the trailing axis, log-sum-exp shifted.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| Self::shape_err("softmax", "rank 0".into()))?;
        let rows = self.nodes[x].value.numel() / n;
        let data = self.nodes[x].value.data();
        let mut out = vec![E::ZERO; data.len()];
        for r in 0..rows {
            softmax_row(&data[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        self.push("softmax", Tensor::new(xs, out)?, Op::SoftmaxLast { x })
    }

    /// Row-wise log-softmax over the trailing axis.
    pub fn log_softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| Self::shape_err("log_softmax", "rank 0".into()))?;
        let rows = self.nodes[x].value.numel() / n;
        let data = self.nodes[x].value.data();
        let mut out = vec![E::ZERO; data.len()];
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            for j in 0..n {
                out[r * n + j] = row[j] - lse;
            }
        }
        self.push("log_softmax", Tensor::new(xs, out)?, Op::LogSoftmaxLast { x })
    }

    /// Mean cross-entropy of `logits [B,c]` against integer labels, fused with
    /// the log-sum-exp shift. Adjoint is `(softmax - onehot) / B`.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let xs = self.shape(logits).to_vec();
        if xs.len() != 2 {
            return Err(Self::shape_err("cross_entropy", format!("logits {xs:?}")));
        }
        let (b, c) = (xs[0], xs[1]);
        if labels.len() != b {
            return Err(Self::shape_err(
                "cross_entropy",
                format!("{} labels for batch {b}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(CmcError::Domain(format!("label {bad} out of range for {c} classes")));
        }
        let data = self.nodes[logits].value.data();
        let mut total = 0.0f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = &data[r * c..(r + 1) * c];
            total += log_sum_exp(row).to_f64() - row[y].to_f64();
        }
        let value = Tensor::scalar(E::from_f64(total / b as f64));
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropyMean { logits, labels: labels.to_vec(), classes: c },
        )
    }

    // ── Structured layers ────────────────────────────────────────────

    /// Valid 1-D convolution over time: `x [l,B,din]`, `w [dout,din,kernel]`,
    /// `bias [dout]` -> `[l-kernel+1, B, dout]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 {
            return Err(Self::shape_err("conv1d", format!("x {xs:?} w {ws:?} bias {bs:?}")));
        }
        let (l, b, din) = (xs[0], xs[1], xs[2]);
        let (dout, wdin, kernel) = (ws[0], ws[1], ws[2]);
        if wdin != din || bs[0] != dout || kernel == 0 || kernel > l {
            return Err(Self::shape_err("conv1d", format!("x {xs:?} w {ws:?} bias {bs:?}")));
        }
        let lo = l - kernel + 1;
        let xd = self.nodes[x].value.data();
        let wd = self.nodes[w].value.data();
        let bd = self.nodes[bias].value.data();
        let mut out = vec![E::ZERO; lo * b * dout];
        for t in 0..lo {
            for bi in 0..b {
                let out_row = &mut out[(t * b + bi) * dout..(t * b + bi + 1) * dout];
                out_row.copy_from_slice(bd);
                for u in 0..kernel {
                    let x_row = &xd[((t + u) * b + bi) * din..((t + u) * b + bi + 1) * din];
                    for (o, slot) in out_row.iter_mut().enumerate() {
                        let w_row = &wd[(o * din) * kernel + u..];
                        // w[o, i, u] strided by kernel over i
                        let mut s = E::ZERO;
                        for i in 0..din {
                            s += x_row[i] * w_row[i * kernel];
                        }
                        *slot += s;
                    }
                }
            }
        }
        self.push(
            "conv1d",
            Tensor::new(vec![lo, b, dout], out)?,
            Op::Conv1d { x, w, bias, kernel },
        )
    }

    /// 1-D batch normalization over features: `x [l,B,c]` normalized per
    /// channel over all (l,B) positions. In train mode batch statistics are
    /// computed here and reported for running updates; in eval mode the caller
    /// supplies running statistics. Train mode requires B >= 2.
    pub fn batchnorm1d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[E], &[E])>,
        mode: Mode,
        eps: E,
    ) -> Result<(NodeId, Option<BatchStats<E>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Self::shape_err("batchnorm1d", format!("x {xs:?}")));
        }
        let (l, b, c) = (xs[0], xs[1], xs[2]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Self::shape_err("batchnorm1d", format!("affine dims for {c} channels")));
        }
        let data = self.nodes[x].value.data();
        let n = l * b;
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(CmcError::Config(
                        "batchnorm in train mode requires batch size >= 2".into(),
                    ));
                }
                let mut mean = vec![E::ZERO; c];
                let mut var = vec![E::ZERO; c];
                for row in 0..n {
                    for j in 0..c {
                        mean[j] += data[row * c + j];
                    }
                }
                let inv_n = E::from_f64(1.0 / n as f64);
                for j in 0..c {
                    mean[j] *= inv_n;
                }
                for row in 0..n {
                    for j in 0..c {
                        let d = data[row * c + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                for j in 0..c {
                    var[j] *= inv_n;
                }
                let unbias = E::from_f64(n as f64 / (n as f64 - 1.0));
                let var_unbiased: Vec<E> = var.iter().map(|&v| v * unbias).collect();
                let stats =
                    BatchStats { mean: mean.clone(), var: var.clone(), var_unbiased };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    CmcError::Config("batchnorm eval mode requires running statistics".into())
                })?;
                if rm.len() != c || rv.len() != c {
                    return Err(Self::shape_err("batchnorm1d", "running stat dims".into()));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let gd = self.nodes[gamma].value.data().to_vec();
        let bd = self.nodes[beta].value.data().to_vec();
        let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
        let mut out = vec![E::ZERO; data.len()];
        for row in 0..n {
            for j in 0..c {
                out[row * c + j] = gd[j] * (data[row * c + j] - mean[j]) * inv_std[j] + bd[j];
            }
        }
        let id = self.push(
            "batchnorm1d",
            Tensor::new(xs, out)?,
            Op::BatchNorm { x, gamma, beta, mean, var, train: mode == Mode::Train, eps },
        )?;
        Ok((id, stats))
    }

    /// Layer normalization over the trailing axis with affine parameters.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: E) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Self::shape_err("layernorm", "rank 0".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Self::shape_err("layernorm", format!("affine dims for width {d}")));
        }
        let rows = self.nodes[x].value.numel() / d;
        let data = self.nodes[x].value.data();
        let gd = self.nodes[gamma].value.data().to_vec();
        let bd = self.nodes[beta].value.data().to_vec();
        let mut out = vec![E::ZERO; data.len()];
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let (mean, var) = row_moments(row);
            let inv_std = E::ONE / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = gd[j] * (row[j] - mean) * inv_std + bd[j];
            }
        }
        self.push("layernorm", Tensor::new(xs, out)?, Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Scale each leading-axis slice of `x [r, ...]` by `w [r]`.
    pub fn scale_rows(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let r = xs[0];
        if self.shape(w) != [r] {
            return Err(Self::shape_err(
                "scale_rows",
                format!("x {xs:?} vs weights {:?}", self.shape(w)),
            ));
        }
        let inner = self.nodes[x].value.numel() / r;
        let wd = self.nodes[w].value.data().to_vec();
        let data = self.nodes[x].value.data();
        let mut out = vec![E::ZERO; data.len()];
        for i in 0..r {
            for j in 0..inner {
                out[i * inner + j] = data[i * inner + j] * wd[i];
            }
        }
        self.push("scale_rows", Tensor::new(xs, out)?, Op::ScaleRows { x, w })
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

// ── Shared row kernels ───────────────────────────────────────────────

pub(crate) fn l2_denom<E: Scalar>(row: &[E]) -> E {
    let mut s = E::ZERO;
    for &v in row {
        s += v * v;
    }
    let norm = s.sqrt();
    let guard = E::from_f64(1e-12);
    if norm < guard {
        norm + guard
    } else {
        norm
    }
}

pub(crate) fn softmax_row<E: Scalar>(row: &[E], out: &mut [E]) {
    let mut max = row[0];
    for &v in &row[1..] {
        max = max.maximum(v);
    }
    let mut sum = E::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

pub(crate) fn log_sum_exp<E: Scalar>(row: &[E]) -> E {
    let mut max = row[0];
    for &v in &row[1..] {
        max = max.maximum(v);
    }
    let mut sum = E::ZERO;
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

pub(crate) fn row_moments<E: Scalar>(row: &[E]) -> (E, E) {
    let inv = E::from_f64(1.0 / row.len() as f64);
    let mut mean = E::ZERO;
    for &v in row {
        mean += v;
    }
    mean *= inv;
    let mut var = E::ZERO;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var *= inv;
    (mean, var)
}
