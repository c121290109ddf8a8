//! Loss terms and the stage-1 / stage-2 multi-task aggregates.
//!
//! Total nodes are built as left-to-right sums of their term nodes, so a
//! bundle's `total` always equals the re-summed terms bit-for-bit.

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{CmcError, Result};
use crate::scalar::Scalar;

/// Named scalar terms of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
    /// Set when the supcon term saw no anchor with a positive.
    pub supcon_no_positives: bool,
}

impl LossBundle {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Mean cross-entropy of logits `[B, c]` against hard labels.
pub fn cross_entropy<E: Scalar>(
    tape: &mut Tape<E>,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    tape.cross_entropy_mean(logits, labels)
}

pub struct SupconTerm {
    pub node: NodeId,
    pub no_positives: bool,
}

/// Supervised contrastive loss over unit-norm rows `features [N, d]`.
///
/// Anchors with no same-label partner contribute nothing and are excluded
/// from the anchor mean; if no anchor has a positive the term is zero and
/// `no_positives` is set.
pub fn supcon<E: Scalar>(
    tape: &mut Tape<E>,
    features: NodeId,
    labels: &[usize],
    tau_c: f64,
) -> Result<SupconTerm> {
    if tau_c <= 0.0 {
        return Err(CmcError::Domain(format!("contrastive temperature {tau_c} must be > 0")));
    }
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(CmcError::Shape {
            op: "supcon",
            detail: format!("features {shape:?} vs {} labels", labels.len()),
        });
    }
    let n = shape[0];

    // per-anchor positive sets
    let mut positive_counts = vec![0usize; n];
    for i in 0..n {
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                positive_counts[i] += 1;
            }
        }
    }
    let valid_anchors = positive_counts.iter().filter(|&&c| c > 0).count();
    if valid_anchors == 0 {
        let zero = tape.input(Tensor::scalar(E::ZERO));
        return Ok(SupconTerm { node: zero, no_positives: true });
    }

    let features_t = tape.permute(features, &[1, 0])?;
    let sims = tape.matmul(features, features_t)?;
    let scaled = tape.scale(sims, E::from_f64(1.0 / tau_c))?;
    // exclude self-similarity from every denominator
    let diag_mask = Tensor::from_fn(vec![n, n], |idx| {
        if idx / n == idx % n {
            E::from_f64(-1e9)
        } else {
            E::ZERO
        }
    });
    let diag_mask = tape.input(diag_mask);
    let masked = tape.add(scaled, diag_mask)?;
    let log_probs = tape.log_softmax_last(masked)?;

    // fold 1/|P(i)| and the anchor mean into one constant weight matrix
    let weight = Tensor::from_fn(vec![n, n], |idx| {
        let (i, p) = (idx / n, idx % n);
        if i != p && labels[i] == labels[p] {
            E::from_f64(1.0 / (positive_counts[i] as f64 * valid_anchors as f64))
        } else {
            E::ZERO
        }
    });
    let weight = tape.input(weight);
    let weighted = tape.mul(log_probs, weight)?;
    let summed = tape.sum_all(weighted)?;
    let node = tape.scale(summed, E::from_f64(-1.0))?;
    Ok(SupconTerm { node, no_positives: false })
}

// ── Stage aggregates ─────────────────────────────────────────────────

pub struct Stage1Loss {
    pub total: NodeId,
    pub task: [NodeId; 3],
    pub supcon: NodeId,
    pub supcon_no_positives: bool,
}

/// Unimodal pretraining objective: per-modality cross-entropy against the
/// pseudo hard labels plus one supcon term over the stacked representations
/// labelled by the same pseudo labels.
pub fn stage1_loss<E: Scalar>(
    tape: &mut Tape<E>,
    logits: [NodeId; 3],
    pseudo_hard: [&[usize]; 3],
    features: [NodeId; 3],
    tau_c: f64,
    supcon_weight: f64,
) -> Result<Stage1Loss> {
    let task = [
        cross_entropy(tape, logits[0], pseudo_hard[0])?,
        cross_entropy(tape, logits[1], pseudo_hard[1])?,
        cross_entropy(tape, logits[2], pseudo_hard[2])?,
    ];
    let stacked = tape.concat(&features, 0)?;
    let mut stacked_labels = Vec::with_capacity(pseudo_hard.iter().map(|l| l.len()).sum());
    for labels in pseudo_hard {
        stacked_labels.extend_from_slice(labels);
    }
    let sc = supcon(tape, stacked, &stacked_labels, tau_c)?;
    let sc_node = if supcon_weight == 1.0 {
        sc.node
    } else {
        tape.scale(sc.node, E::from_f64(supcon_weight))?
    };
    let mut total = task[0];
    total = tape.add(total, task[1])?;
    total = tape.add(total, task[2])?;
    total = tape.add(total, sc_node)?;
    Ok(Stage1Loss { total, task, supcon: sc_node, supcon_no_positives: sc.no_positives })
}

impl Stage1Loss {
    pub fn bundle<E: Scalar>(&self, tape: &Tape<E>) -> LossBundle {
        let terms = vec![
            ("task_text".to_string(), tape.value(self.task[0]).item().to_f64()),
            ("task_audio".to_string(), tape.value(self.task[1]).item().to_f64()),
            ("task_vision".to_string(), tape.value(self.task[2]).item().to_f64()),
            ("supcon".to_string(), tape.value(self.supcon).item().to_f64()),
        ];
        LossBundle {
            total: tape.value(self.total).item().to_f64(),
            terms,
            supcon_no_positives: self.supcon_no_positives,
        }
    }
}

pub struct Stage2Terms {
    pub include_unimodal: bool,
    pub include_supcon: bool,
    pub supcon_weight: f64,
    pub unimodal_weight: f64,
}

impl Default for Stage2Terms {
    fn default() -> Self {
        Stage2Terms {
            include_unimodal: true,
            include_supcon: true,
            supcon_weight: 1.0,
            unimodal_weight: 1.0,
        }
    }
}

pub struct Stage2Loss {
    pub total: NodeId,
    pub multimodal: NodeId,
    pub unimodal: Option<[NodeId; 3]>,
    pub supcon: Option<NodeId>,
    pub supcon_no_positives: bool,
}

/// Multimodal finetuning objective: cross-entropy of the fused prediction
/// against the multimodal label, optionally per-modality cross-entropy of the
/// post-fusion classifier outputs against the pseudo labels, and optionally a
/// supcon term over the fused representations.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss<E: Scalar>(
    tape: &mut Tape<E>,
    fused_logits: NodeId,
    modality_logits: [NodeId; 3],
    multimodal_hard: &[usize],
    pseudo_hard: [&[usize]; 3],
    fused_features: [NodeId; 3],
    tau_c: f64,
    terms: &Stage2Terms,
) -> Result<Stage2Loss> {
    let l_m = cross_entropy(tape, fused_logits, multimodal_hard)?;
    let mut total = l_m;

    let unimodal = if terms.include_unimodal {
        let mut nodes = [0usize; 3];
        for k in 0..3 {
            let mut node = cross_entropy(tape, modality_logits[k], pseudo_hard[k])?;
            if terms.unimodal_weight != 1.0 {
                node = tape.scale(node, E::from_f64(terms.unimodal_weight))?;
            }
            nodes[k] = node;
            total = tape.add(total, node)?;
        }
        Some(nodes)
    } else {
        None
    };

    let mut supcon_no_positives = false;
    let supcon_node = if terms.include_supcon {
        let stacked = tape.concat(&fused_features, 0)?;
        let mut stacked_labels = Vec::new();
        for labels in pseudo_hard {
            stacked_labels.extend_from_slice(labels);
        }
        let sc = supcon(tape, stacked, &stacked_labels, tau_c)?;
        supcon_no_positives = sc.no_positives;
        let node = if terms.supcon_weight == 1.0 {
            sc.node
        } else {
            tape.scale(sc.node, E::from_f64(terms.supcon_weight))?
        };
        total = tape.add(total, node)?;
        Some(node)
    } else {
        None
    };

    Ok(Stage2Loss {
        total,
        multimodal: l_m,
        unimodal,
        supcon: supcon_node,
        supcon_no_positives,
    })
}

impl Stage2Loss {
    pub fn bundle<E: Scalar>(&self, tape: &Tape<E>) -> LossBundle {
        let mut terms = vec![(
            "multimodal".to_string(),
            tape.value(self.multimodal).item().to_f64(),
        )];
        if let Some(uni) = &self.unimodal {
            for (k, name) in ["text", "audio", "vision"].iter().enumerate() {
                terms.push((format!("unimodal_{name}"), tape.value(uni[k]).item().to_f64()));
            }
        }
        if let Some(sc) = self.supcon {
            terms.push(("supcon".to_string(), tape.value(sc).item().to_f64()));
        }
        LossBundle {
            total: tape.value(self.total).item().to_f64(),
            terms,
            supcon_no_positives: self.supcon_no_positives,
        }
    }
}
