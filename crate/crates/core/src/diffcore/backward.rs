//! Reverse sweep: vector-Jacobian products for every tape primitive.

use crate::diffcore::linalg::{gemm_nt, gemm_tn, permute_raw};
use crate::diffcore::tape::{l2_denom, row_moments, softmax_row, Gradients, NodeId, Op, Tape};
use crate::diffcore::tensor::Tensor;
use crate::error::{CmcError, Result};
use crate::scalar::Scalar;

impl<E: Scalar> Tape<E> {
    /// Run the backward pass from a scalar root. Returns gradients for every
    /// leaf reached by the sweep; interior gradients are freed as consumed.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<E>> {
        if self.nodes[root].value.numel() != 1 {
            return Err(CmcError::Shape {
                op: "backward",
                detail: format!("root must be scalar, got {:?}", self.nodes[root].value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(E::ONE));

        for id in (0..=root).rev() {
            if grads[id].is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                continue; // retained for the caller
            }
            let g = grads[id].take().expect("grad present");
            self.backprop_op(id, &g, &mut grads)?;
        }

        for (id, g) in grads.iter().enumerate() {
            if let Some(t) = g {
                if !t.all_finite() {
                    return Err(CmcError::NonFinite { op: op_name(&self.nodes[id].op) });
                }
            }
        }
        Ok(Gradients::from_raw(grads))
    }

    fn backprop_op(
        &self,
        id: NodeId,
        g: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let val = |n: NodeId| self.nodes[n].value.data();
        let shp = |n: NodeId| self.nodes[n].value.shape();

        match &self.nodes[id].op {
            Op::Leaf { .. } => {}

            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let mut da = vec![E::ZERO; m * k];
                gemm_nt(g.data(), val(*b), &mut da, m, n, k);
                acc_raw(grads, *a, shp(*a), da);
                let mut db = vec![E::ZERO; k * n];
                gemm_tn(val(*a), g.data(), &mut db, m, k, n);
                acc_raw(grads, *b, shp(*b), db);
            }

            Op::Bmm { a, b, g: groups, m, k, n } => {
                let (groups, m, k, n) = (*groups, *m, *k, *n);
                let mut da = vec![E::ZERO; groups * m * k];
                let mut db = vec![E::ZERO; groups * k * n];
                for gi in 0..groups {
                    let go = &g.data()[gi * m * n..(gi + 1) * m * n];
                    gemm_nt(go, &val(*b)[gi * k * n..(gi + 1) * k * n], &mut da[gi * m * k..(gi + 1) * m * k], m, n, k);
                    gemm_tn(&val(*a)[gi * m * k..(gi + 1) * m * k], go, &mut db[gi * k * n..(gi + 1) * k * n], m, k, n);
                }
                acc_raw(grads, *a, shp(*a), da);
                acc_raw(grads, *b, shp(*b), db);
            }

            Op::Permute { x, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (_, data) = permute_raw(g.shape(), g.data(), &inv);
                acc_raw(grads, *x, shp(*x), data);
            }

            Op::Reshape { x } => {
                acc_raw(grads, *x, shp(*x), g.data().to_vec());
            }

            Op::Add { a, b } => {
                acc_raw(grads, *a, shp(*a), g.data().to_vec());
                acc_raw(grads, *b, shp(*b), g.data().to_vec());
            }

            Op::Sub { a, b } => {
                acc_raw(grads, *a, shp(*a), g.data().to_vec());
                acc_raw(grads, *b, shp(*b), g.data().iter().map(|&v| -v).collect());
            }

            Op::Mul { a, b } => {
                let da: Vec<E> = g.data().iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<E> = g.data().iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect();
                acc_raw(grads, *a, shp(*a), da);
                acc_raw(grads, *b, shp(*b), db);
            }

            Op::Scale { x, c } => {
                let c = *c;
                acc_raw(grads, *x, shp(*x), g.data().iter().map(|&v| v * c).collect());
            }

            Op::AddBias { x, bias, rows, n } => {
                let (rows, n) = (*rows, *n);
                acc_raw(grads, *x, shp(*x), g.data().to_vec());
                let mut db = vec![E::ZERO; n];
                for r in 0..rows {
                    for j in 0..n {
                        db[j] += g.data()[r * n + j];
                    }
                }
                acc_raw(grads, *bias, shp(*bias), db);
            }

            Op::Relu { x } => {
                let dx: Vec<E> = g
                    .data()
                    .iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| if xv > E::ZERO { gv } else { E::ZERO })
                    .collect();
                acc_raw(grads, *x, shp(*x), dx);
            }

            Op::Dropout { x, mask } => {
                let dx: Vec<E> = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                acc_raw(grads, *x, shp(*x), dx);
            }

            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let mean = matches!(self.nodes[id].op, Op::MeanAxis { .. });
                let xs = shp(*x);
                let outer: usize = xs[..*axis].iter().product();
                let mid = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                let scale = if mean { E::from_f64(1.0 / mid as f64) } else { E::ONE };
                let mut dx = vec![E::ZERO; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            dx[(o * mid + m) * inner + i] = g.data()[o * inner + i] * scale;
                        }
                    }
                }
                acc_raw(grads, *x, xs, dx);
            }

            Op::L2NormalizeRows { x } => {
                let xs = shp(*x);
                let n = *xs.last().unwrap();
                let rows = self.nodes[*x].value.numel() / n;
                let xd = val(*x);
                let mut dx = vec![E::ZERO; xd.len()];
                for r in 0..rows {
                    let row = &xd[r * n..(r + 1) * n];
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let denom = l2_denom(row);
                    let mut dot = E::ZERO;
                    for j in 0..n {
                        dot += grow[j] * row[j];
                    }
                    let d3 = denom * denom * denom;
                    for j in 0..n {
                        dx[r * n + j] = grow[j] / denom - row[j] * dot / d3;
                    }
                }
                acc_raw(grads, *x, xs, dx);
            }

            Op::Concat { xs, axis, sizes } => {
                let total: usize = sizes.iter().sum();
                let out_shape = self.nodes[id].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let mut off = 0usize;
                for (xi, &xid) in xs.iter().enumerate() {
                    let mid = sizes[xi];
                    let mut dx = vec![E::ZERO; outer * mid * inner];
                    for o in 0..outer {
                        let src = (o * total + off) * inner;
                        let dst = o * mid * inner;
                        dx[dst..dst + mid * inner]
                            .copy_from_slice(&g.data()[src..src + mid * inner]);
                    }
                    acc_raw(grads, xid, shp(xid), dx);
                    off += mid;
                }
            }

            Op::SliceAxis { x, axis, start, len } => {
                let xs = shp(*x);
                let outer: usize = xs[..*axis].iter().product();
                let mid = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut dx = vec![E::ZERO; outer * mid * inner];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc_raw(grads, *x, xs, dx);
            }

            Op::SoftmaxLast { x } => {
                let y = self.nodes[id].value.data();
                let n = self.nodes[id].value.last_dim();
                let rows = y.len() / n;
                let mut dx = vec![E::ZERO; y.len()];
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mut dot = E::ZERO;
                    for j in 0..n {
                        dot += gr[j] * yr[j];
                    }
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc_raw(grads, *x, shp(*x), dx);
            }

            Op::LogSoftmaxLast { x } => {
                let y = self.nodes[id].value.data();
                let n = self.nodes[id].value.last_dim();
                let rows = y.len() / n;
                let mut dx = vec![E::ZERO; y.len()];
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mut s = E::ZERO;
                    for j in 0..n {
                        s += gr[j];
                    }
                    for j in 0..n {
                        dx[r * n + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                acc_raw(grads, *x, shp(*x), dx);
            }

            Op::SumSq { x } => {
                let gs = g.item();
                let two = E::from_f64(2.0);
                let dx: Vec<E> = val(*x).iter().map(|&v| two * v * gs).collect();
                acc_raw(grads, *x, shp(*x), dx);
            }

            Op::CrossEntropyMean { logits, labels, classes } => {
                let c = *classes;
                let b = labels.len();
                let zd = val(*logits);
                let gs = g.item() / E::from_f64(b as f64);
                let mut dz = vec![E::ZERO; zd.len()];
                let mut probs = vec![E::ZERO; c];
                for (r, &y) in labels.iter().enumerate() {
                    softmax_row(&zd[r * c..(r + 1) * c], &mut probs);
                    for j in 0..c {
                        let indicator = if j == y { E::ONE } else { E::ZERO };
                        dz[r * c + j] = (probs[j] - indicator) * gs;
                    }
                }
                acc_raw(grads, *logits, shp(*logits), dz);
            }

            Op::Conv1d { x, w, bias, kernel } => {
                let kernel = *kernel;
                let xs = shp(*x);
                let (l, bsz, din) = (xs[0], xs[1], xs[2]);
                let dout = shp(*w)[0];
                let lo = l - kernel + 1;
                let xd = val(*x);
                let wd = val(*w);
                let mut dx = vec![E::ZERO; xd.len()];
                let mut dw = vec![E::ZERO; wd.len()];
                let mut db = vec![E::ZERO; dout];
                for t in 0..lo {
                    for bi in 0..bsz {
                        let grow = &g.data()[(t * bsz + bi) * dout..(t * bsz + bi + 1) * dout];
                        for (o, &gv) in grow.iter().enumerate() {
                            db[o] += gv;
                            if gv == E::ZERO {
                                continue;
                            }
                            for u in 0..kernel {
                                let xbase = ((t + u) * bsz + bi) * din;
                                let wbase = o * din * kernel + u;
                                for i in 0..din {
                                    dw[wbase + i * kernel] += gv * xd[xbase + i];
                                    dx[xbase + i] += gv * wd[wbase + i * kernel];
                                }
                            }
                        }
                    }
                }
                acc_raw(grads, *x, xs, dx);
                acc_raw(grads, *w, shp(*w), dw);
                acc_raw(grads, *bias, shp(*bias), db);
            }

            Op::BatchNorm { x, gamma, beta, mean, var, train, eps } => {
                let xs = shp(*x);
                let (l, bsz, c) = (xs[0], xs[1], xs[2]);
                let n = l * bsz;
                let xd = val(*x);
                let gd = val(*gamma);
                let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + *eps).sqrt()).collect();
                let mut dgamma = vec![E::ZERO; c];
                let mut dbeta = vec![E::ZERO; c];
                let mut dx = vec![E::ZERO; xd.len()];
                if *train {
                    // Means of dxhat and dxhat*xhat per channel feed the
                    // batch-statistic terms of the VJP.
                    let mut m1 = vec![E::ZERO; c];
                    let mut m2 = vec![E::ZERO; c];
                    for row in 0..n {
                        for j in 0..c {
                            let xhat = (xd[row * c + j] - mean[j]) * inv_std[j];
                            let gv = g.data()[row * c + j];
                            let dxhat = gv * gd[j];
                            m1[j] += dxhat;
                            m2[j] += dxhat * xhat;
                            dgamma[j] += gv * xhat;
                            dbeta[j] += gv;
                        }
                    }
                    let inv_n = E::from_f64(1.0 / n as f64);
                    for j in 0..c {
                        m1[j] *= inv_n;
                        m2[j] *= inv_n;
                    }
                    for row in 0..n {
                        for j in 0..c {
                            let xhat = (xd[row * c + j] - mean[j]) * inv_std[j];
                            let dxhat = g.data()[row * c + j] * gd[j];
                            dx[row * c + j] = inv_std[j] * (dxhat - m1[j] - xhat * m2[j]);
                        }
                    }
                } else {
                    for row in 0..n {
                        for j in 0..c {
                            let xhat = (xd[row * c + j] - mean[j]) * inv_std[j];
                            let gv = g.data()[row * c + j];
                            dgamma[j] += gv * xhat;
                            dbeta[j] += gv;
                            dx[row * c + j] = gv * gd[j] * inv_std[j];
                        }
                    }
                }
                acc_raw(grads, *x, xs, dx);
                acc_raw(grads, *gamma, shp(*gamma), dgamma);
                acc_raw(grads, *beta, shp(*beta), dbeta);
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let xs = shp(*x);
                let d = *xs.last().unwrap();
                let rows = self.nodes[*x].value.numel() / d;
                let xd = val(*x);
                let gd = val(*gamma);
                let mut dgamma = vec![E::ZERO; d];
                let mut dbeta = vec![E::ZERO; d];
                let mut dx = vec![E::ZERO; xd.len()];
                let inv_d = E::from_f64(1.0 / d as f64);
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let (mu, var) = row_moments(row);
                    let inv_std = E::ONE / (var + *eps).sqrt();
                    let mut m1 = E::ZERO;
                    let mut m2 = E::ZERO;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv_std;
                        let dxhat = grow[j] * gd[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv_std;
                        let dxhat = grow[j] * gd[j];
                        dx[r * d + j] = inv_std * (dxhat - m1 - xhat * m2);
                    }
                }
                acc_raw(grads, *x, xs, dx);
                acc_raw(grads, *gamma, shp(*gamma), dgamma);
                acc_raw(grads, *beta, shp(*beta), dbeta);
            }

            Op::ScaleRows { x, w } => {
                let xs = shp(*x);
                let r = xs[0];
                let inner = self.nodes[*x].value.numel() / r;
                let xd = val(*x);
                let wd = val(*w);
                let mut dx = vec![E::ZERO; xd.len()];
                let mut dw = vec![E::ZERO; r];
                for i in 0..r {
                    for j in 0..inner {
                        let gv = g.data()[i * inner + j];
                        dx[i * inner + j] = gv * wd[i];
                        dw[i] += gv * xd[i * inner + j];
                    }
                }
                acc_raw(grads, *x, xs, dx);
                acc_raw(grads, *w, shp(*w), dw);
            }
        }
        Ok(())
    }
}

fn op_name<E>(op: &Op<E>) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Bmm { .. } => "bmm",
        Op::Permute { .. } => "permute",
        Op::Reshape { .. } => "reshape",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddBias { .. } => "add_bias",
        Op::Relu { .. } => "relu",
        Op::Dropout { .. } => "dropout",
        Op::SumAxis { .. } => "sum_axis",
        Op::MeanAxis { .. } => "mean_axis",
        Op::L2NormalizeRows { .. } => "l2_normalize",
        Op::Concat { .. } => "concat",
        Op::SliceAxis { .. } => "slice_axis",
        Op::SoftmaxLast { .. } => "softmax",
        Op::LogSoftmaxLast { .. } => "log_softmax",
        Op::SumSq { .. } => "sum_sq",
        Op::CrossEntropyMean { .. } => "cross_entropy",
        Op::Conv1d { .. } => "conv1d",
        Op::BatchNorm { .. } => "batchnorm1d",
        Op::LayerNorm { .. } => "layernorm",
        Op::ScaleRows { .. } => "scale_rows",
    }
}

fn acc_raw<E: Scalar>(
    grads: &mut [Option<Tensor<E>>],
    id: NodeId,
    shape: &[usize],
    delta: Vec<E>,
) {
    match &mut grads[id] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&delta) {
                *a += *b;
            }
        }
        None => {
            grads[id] = Some(Tensor::new(shape.to_vec(), delta).expect("vjp shape"));
        }
    }
}
