//! Parameter-free fusion and consensus routing.
//!
//! PFM mixes the three unit-norm modality representations through a
//! temperature-scaled softmax over their pairwise cosine similarities; it
//! consults no learned parameters. MCR projects the aggregated representation
//! to three logits and softmaxes them into simplex routing weights, which
//! weight the per-modality predictions into the fused logits.

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{CmcError, Result};
use crate::rng::{uniform_tensor, SeededRng};
use crate::scalar::Scalar;

/// Router parameters: one linear map `d -> 3`.
#[derive(Clone, Debug)]
pub struct RouterParams<E> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Scalar> RouterParams<E> {
    /// Small-uniform weights, zero bias.
    pub fn init(shared_dim: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (shared_dim as f64).sqrt();
        RouterParams {
            weight: uniform_tensor(rng, vec![shared_dim, 3], -bound, bound),
            bias: Tensor::zeros(vec![3]),
        }
    }

    pub fn trainables(&self) -> Vec<&Tensor<E>> {
        vec![&self.weight, &self.bias]
    }

    pub fn trainables_mut(&mut self) -> Vec<&mut Tensor<E>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn names(&self, prefix: &str) -> Vec<String> {
        vec![format!("{prefix}.weight"), format!("{prefix}.bias")]
    }
}

#[derive(Clone, Debug)]
pub struct RouterNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl RouterNodes {
    pub fn register<E: Scalar>(tape: &mut Tape<E>, p: &RouterParams<E>, trainable: bool) -> Self {
        let mut reg = |t: &Tensor<E>| if trainable { tape.param(t.clone()) } else { tape.input(t.clone()) };
        RouterNodes { weight: reg(&p.weight), bias: reg(&p.bias) }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        vec![self.weight, self.bias]
    }
}

/// Temperature-cosine fusion of a modality stack `h_x [B, 3, d]` with
/// unit-norm rows: `s = h_x h_x^T`, `beta = softmax(s / tau)` row-wise,
/// output `beta @ h_x`. Records no parameter leaves.
pub fn pfm_fuse<E: Scalar>(tape: &mut Tape<E>, h_x: NodeId, tau: f64) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(CmcError::Domain(format!("fusion temperature {tau} must be > 0")));
    }
    let shape = tape.shape(h_x).to_vec();
    if shape.len() != 3 || shape[1] != 3 {
        return Err(CmcError::Shape {
            op: "pfm_fuse",
            detail: format!("expected [B,3,d], got {shape:?}"),
        });
    }
    let h_t = tape.permute(h_x, &[0, 2, 1])?;
    let sim = tape.bmm(h_x, h_t)?;
    let scaled = tape.scale(sim, E::from_f64(1.0 / tau))?;
    let beta = tape.softmax_last(scaled)?;
    tape.bmm(beta, h_x)
}

/// Sum the three modality slots: `[B, 3, d] -> [B, d]`.
pub fn aggregate<E: Scalar>(tape: &mut Tape<E>, fused: NodeId) -> Result<NodeId> {
    let shape = tape.shape(fused).to_vec();
    if shape.len() != 3 {
        return Err(CmcError::Shape {
            op: "aggregate",
            detail: format!("expected [B,3,d], got {shape:?}"),
        });
    }
    tape.sum_axis(fused, 1)
}

/// Router weights `[B, 3]` on the simplex.
pub fn mcr_weights<E: Scalar>(tape: &mut Tape<E>, h_m: NodeId, router: &RouterNodes) -> Result<NodeId> {
    let z = tape.matmul(h_m, router.weight)?;
    let z = tape.add_bias(z, router.bias)?;
    tape.softmax_last(z)
}

/// Convex combination of per-modality logits by per-sample router weights:
/// `y[b] = sum_k w[b,k] * logits_k[b]`.
pub fn fuse_predictions<E: Scalar>(
    tape: &mut Tape<E>,
    weights: NodeId,
    logits: [NodeId; 3],
) -> Result<NodeId> {
    let ws = tape.shape(weights).to_vec();
    if ws.len() != 2 || ws[1] != 3 {
        return Err(CmcError::Shape {
            op: "fuse_predictions",
            detail: format!("expected weights [B,3], got {ws:?}"),
        });
    }
    let b = ws[0];
    let mut fused = None;
    for (k, &logit) in logits.iter().enumerate() {
        let wk = tape.slice_axis(weights, 1, k, 1)?;
        let wk = tape.reshape(wk, vec![b])?;
        let term = tape.scale_rows(logit, wk)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(fused.expect("three modalities"))
}

// ── One-shot wrappers (inference, tests) ─────────────────────────────

pub fn pfm_fuse_batch<E: Scalar>(h_x: &Tensor<E>, tau: f64) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let id = tape.input(h_x.clone());
    let out = pfm_fuse(&mut tape, id, tau)?;
    Ok(tape.value(out).clone())
}

/// The fusion mixing matrix `beta = softmax(h_x h_x^T / tau)` by itself.
pub fn pfm_weights_batch<E: Scalar>(h_x: &Tensor<E>, tau: f64) -> Result<Tensor<E>> {
    if tau <= 0.0 {
        return Err(CmcError::Domain(format!("fusion temperature {tau} must be > 0")));
    }
    let mut tape = Tape::new();
    let id = tape.input(h_x.clone());
    let h_t = tape.permute(id, &[0, 2, 1])?;
    let sim = tape.bmm(id, h_t)?;
    let scaled = tape.scale(sim, E::from_f64(1.0 / tau))?;
    let beta = tape.softmax_last(scaled)?;
    Ok(tape.value(beta).clone())
}

pub fn aggregate_batch<E: Scalar>(fused: &Tensor<E>) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let id = tape.input(fused.clone());
    let out = aggregate(&mut tape, id)?;
    Ok(tape.value(out).clone())
}

pub fn mcr_weights_batch<E: Scalar>(h_m: &Tensor<E>, params: &RouterParams<E>) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let id = tape.input(h_m.clone());
    let nodes = RouterNodes::register(&mut tape, params, false);
    let out = mcr_weights(&mut tape, id, &nodes)?;
    Ok(tape.value(out).clone())
}

pub fn fuse_predictions_batch<E: Scalar>(
    weights: &Tensor<E>,
    logits: [&Tensor<E>; 3],
) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let w = tape.input(weights.clone());
    let ids = [
        tape.input(logits[0].clone()),
        tape.input(logits[1].clone()),
        tape.input(logits[2].clone()),
    ];
    let out = fuse_predictions(&mut tape, w, ids)?;
    Ok(tape.value(out).clone())
}
