//! Composite blocks assembled from tape primitives: multi-head self-attention
//! and the position-wise feed-forward network.

use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::error::{CmcError, Result};
use crate::scalar::Scalar;

/// Node handles for one attention block's parameters (all `[d,d]` weights,
/// `[d]` biases).
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Multi-head self-attention over the time axis of `x [l, B, d]`.
pub fn multi_head_attention<E: Scalar>(
    tape: &mut Tape<E>,
    x: NodeId,
    p: &AttentionNodes,
    heads: usize,
    causal: bool,
) -> Result<NodeId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(CmcError::Shape {
            op: "attention",
            detail: format!("expected [l,B,d], got {shape:?}"),
        });
    }
    let (l, b, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(CmcError::Config(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;

    let x2 = tape.reshape(x, vec![l * b, d])?;
    let project = |tape: &mut Tape<E>, w, bias| -> Result<NodeId> {
        let y = tape.matmul(x2, w)?;
        let y = tape.add_bias(y, bias)?;
        // [l,B,H,dh] -> [B,H,l,dh] -> [B*H, l, dh]
        let y = tape.reshape(y, vec![l, b, heads, dh])?;
        let y = tape.permute(y, &[1, 2, 0, 3])?;
        tape.reshape(y, vec![b * heads, l, dh])
    };
    let q = project(tape, p.wq, p.bq)?;
    let k = project(tape, p.wk, p.bk)?;
    let v = project(tape, p.wv, p.bv)?;

    let k_t = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.bmm(q, k_t)?;
    let scores = tape.scale(scores, E::from_f64(1.0 / (dh as f64).sqrt()))?;
    let scores = if causal {
        let mask = Tensor::from_fn(vec![b * heads, l, l], |idx| {
            let i = (idx / l) % l;
            let j = idx % l;
            if j > i {
                E::from_f64(-1e9)
            } else {
                E::ZERO
            }
        });
        let mask = tape.input(mask);
        tape.add(scores, mask)?
    } else {
        scores
    };
    let attn = tape.softmax_last(scores)?;
    let ctx = tape.bmm(attn, v)?;

    // [B*H,l,dh] -> [l,B,d]
    let ctx = tape.reshape(ctx, vec![b, heads, l, dh])?;
    let ctx = tape.permute(ctx, &[2, 0, 1, 3])?;
    let ctx = tape.reshape(ctx, vec![l * b, d])?;
    let out = tape.matmul(ctx, p.wo)?;
    let out = tape.add_bias(out, p.bo)?;
    tape.reshape(out, vec![l, b, d])
}

/// Position-wise feed-forward: `relu(x W1 + b1) W2 + b2` applied at every
/// time/batch position of `x [l, B, d]`.
pub fn feed_forward<E: Scalar>(
    tape: &mut Tape<E>,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> Result<NodeId> {
    let shape = tape.shape(x).to_vec();
    let (l, b, d) = (shape[0], shape[1], shape[2]);
    let x2 = tape.reshape(x, vec![l * b, d])?;
    let h = tape.matmul(x2, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, w2)?;
    let y = tape.add_bias(y, b2)?;
    tape.reshape(y, vec![l, b, d])
}
