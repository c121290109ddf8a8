//! Gradient verification against central finite differences.
//!
//! Checks run in 64-bit; the relative deviation denominator is floored so
//! that near-zero gradients are compared absolutely at `tolerance * FLOOR`.

use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative-deviation denominator floor.
const REL_FLOOR: f64 = 1e-3;

/// Evaluate a recorded computation and its gradients with respect to every
/// leaf. The builder receives one node per leaf tensor, in order, and must
/// return a scalar root.
pub fn evaluate_with_gradients<E: Scalar, F>(
    build: &F,
    leaves: &[Tensor<E>],
) -> Result<(Tensor<E>, Vec<Tensor<E>>)>
where
    F: ?Sized + Fn(&mut Tape<E>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let value = tape.value(root).clone();
    let mut grads = tape.backward(root)?;
    let out = ids
        .iter()
        .zip(leaves)
        .map(|(&id, leaf)| grads.take_or_zeros(id, leaf.shape()))
        .collect();
    Ok((value, out))
}

/// Forward-only evaluation (no gradients).
pub fn evaluate<E: Scalar, F>(build: &F, leaves: &[Tensor<E>]) -> Result<Tensor<E>>
where
    F: ?Sized + Fn(&mut Tape<E>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.input(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    Ok(tape.value(root).clone())
}

/// Deviations for one parameter block.
#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub block: usize,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    pub pass: bool,
}

/// Outcome of a finite-difference check over all parameter blocks.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_dev(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_dev).fold(0.0, f64::max)
    }

    pub fn max_abs_dev(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_abs_dev).fold(0.0, f64::max)
    }
}

/// Compare analytic gradients with central differences for every element of
/// every leaf. Tolerance violations produce a failing report, not an error.
pub fn grad_check<F>(build: &F, leaves: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: ?Sized + Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let (_, analytic) = evaluate_with_gradients(build, leaves)?;
    let mut blocks = Vec::with_capacity(leaves.len());
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    for bi in 0..leaves.len() {
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for ei in 0..leaves[bi].numel() {
            let orig = work[bi].data()[ei];
            work[bi].data_mut()[ei] = orig + FD_STEP;
            let f_plus = evaluate(build, &work)?.item();
            work[bi].data_mut()[ei] = orig - FD_STEP;
            let f_minus = evaluate(build, &work)?.item();
            work[bi].data_mut()[ei] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let a = analytic[bi].data()[ei];
            let abs_dev = (a - numeric).abs();
            let rel_dev = abs_dev / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs_dev);
            max_rel = max_rel.max(rel_dev);
        }
        blocks.push(BlockCheck {
            block: bi,
            max_abs_dev: max_abs,
            max_rel_dev: max_rel,
            pass: max_rel <= tolerance,
        });
    }
    let pass = blocks.iter().all(|b| b.pass);
    Ok(GradCheckReport { blocks, tolerance, pass })
}
