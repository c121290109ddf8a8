//! Pseudo-label generation: gradient-norm triage of samples, label fusion,
//! EMA label and parameter updates, and the dynamic momentum schedule.
//!
//! All label arithmetic runs in f64 regardless of training precision.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::encoders::{ClassifierParams, EncoderParams};
use crate::error::{CmcError, Result};
use crate::modality::Modality;
use crate::scalar::Scalar;

/// A probability vector over classes (simplex within 1e-6).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    pub fn onehot(class: usize, classes: usize) -> Self {
        let mut probs = vec![0.0; classes];
        probs[class] = 1.0;
        SoftLabel { probs }
    }

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(CmcError::Domain(format!("not a simplex vector: {probs:?}")));
        }
        Ok(SoftLabel { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Argmax with ties resolved to the smallest index.
    pub fn hard(&self) -> usize {
        argmax(&self.probs)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Numerically shifted softmax in f64.
pub fn softmax64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `|| softmax(logits) - onehot(cls) ||_2` for every class.
pub fn class_gradient_norms(probs: &[f64]) -> Vec<f64> {
    (0..probs.len())
        .map(|cls| {
            let mut s = 0.0;
            for (j, &p) in probs.iter().enumerate() {
                let d = p - if j == cls { 1.0 } else { 0.0 };
                s += d * d;
            }
            s.sqrt()
        })
        .collect()
}

/// Outcome of one pseudo-label refinement.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub soft: SoftLabel,
    pub alpha: f64,
    /// The gradient-preferred class `y_r`.
    pub preferred: usize,
}

/// Refine a pseudo label from the live model's logits: the class whose
/// one-hot target has the smallest gradient norm is blended into the current
/// label with coefficient `alpha = (|g| - |g_r|) / (|g| + |g_r|)`.
pub fn refine_label(logits: &[f64], current_hard: usize) -> Result<Refinement> {
    let classes = logits.len();
    if classes < 2 {
        return Err(CmcError::Config(format!("refinement needs >= 2 classes, got {classes}")));
    }
    if current_hard >= classes {
        return Err(CmcError::Domain(format!(
            "current label {current_hard} out of range for {classes} classes"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CmcError::Domain("non-finite logits in refinement".into()));
    }
    let probs = softmax64(logits);
    let norms = class_gradient_norms(&probs);
    let preferred = argmin(&norms);
    if preferred == current_hard || norms[preferred] == norms[current_hard] {
        return Ok(Refinement {
            soft: SoftLabel::onehot(current_hard, classes),
            alpha: 0.0,
            preferred,
        });
    }
    let alpha = (norms[current_hard] - norms[preferred]) / (norms[current_hard] + norms[preferred]);
    let mut probs_out = vec![0.0; classes];
    probs_out[current_hard] = 1.0 - alpha;
    probs_out[preferred] += alpha;
    Ok(Refinement { soft: SoftLabel { probs: probs_out }, alpha, preferred })
}

/// EMA blend of two soft labels: `m * prev + (1 - m) * new`.
pub fn ema_update_label(prev: &SoftLabel, new: &SoftLabel, m: f64) -> Result<SoftLabel> {
    if !(0.0..=1.0).contains(&m) {
        return Err(CmcError::Domain(format!("momentum {m} outside [0,1]")));
    }
    if prev.probs.len() != new.probs.len() {
        return Err(CmcError::Shape {
            op: "ema_update_label",
            detail: format!("{} vs {} classes", prev.probs.len(), new.probs.len()),
        });
    }
    let probs = prev
        .probs
        .iter()
        .zip(&new.probs)
        .map(|(&p, &n)| m * p + (1.0 - m) * n)
        .collect();
    Ok(SoftLabel { probs })
}

// ── Momentum schedule ────────────────────────────────────────────────

/// Epoch-indexed momentum: `m^E = 1 - (1 - m^{E-1}) / E^gamma`, so the value
/// starts at `m0` and climbs toward 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentumSchedule {
    pub m0: f64,
    pub gamma: f64,
    current: f64,
    epoch: usize,
}

impl MomentumSchedule {
    pub fn new(m0: f64, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&m0) {
            return Err(CmcError::Domain(format!("initial momentum {m0} outside [0,1]")));
        }
        if gamma < 0.0 {
            return Err(CmcError::Domain(format!("decay factor {gamma} must be >= 0")));
        }
        Ok(MomentumSchedule { m0, gamma, current: m0, epoch: 0 })
    }

    pub fn current(&self) -> f64 {
        self.current
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Advance to `epoch` (must be `self.epoch() + 1`, starting at 1) and
    /// return the updated momentum.
    pub fn advance(&mut self, epoch: usize) -> Result<f64> {
        if epoch < 1 {
            return Err(CmcError::Domain("epochs are counted from 1".into()));
        }
        if epoch != self.epoch + 1 {
            return Err(CmcError::Domain(format!(
                "momentum schedule must advance one epoch at a time ({} -> {epoch})",
                self.epoch
            )));
        }
        self.current = 1.0 - (1.0 - self.current) / (epoch as f64).powf(self.gamma);
        self.epoch = epoch;
        Ok(self.current)
    }
}

// ── Label store ──────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelEntry {
    pub soft: SoftLabel,
    pub hard: usize,
}

/// Per-sample, per-modality pseudo labels, keyed by dataset sample index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelStore {
    classes: usize,
    entries: Vec<[LabelEntry; 3]>,
}

impl LabelStore {
    /// Initialize every modality's label to the one-hot of the discretized
    /// multimodal score.
    pub fn init_labels(
        scores: &[f64],
        classes: usize,
        discretize: impl Fn(f64) -> Result<usize>,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(scores.len());
        for &score in scores {
            let class = discretize(score)?;
            if class >= classes {
                return Err(CmcError::Domain(format!(
                    "discretizer produced class {class} for {classes} classes"
                )));
            }
            let entry = LabelEntry { soft: SoftLabel::onehot(class, classes), hard: class };
            entries.push([entry.clone(), entry.clone(), entry]);
        }
        Ok(LabelStore { classes, entries })
    }

    /// Fix the store to per-modality ground-truth classes (no refinement).
    pub fn from_hard_classes(classes: usize, per_sample: &[[usize; 3]]) -> Result<Self> {
        let mut entries = Vec::with_capacity(per_sample.len());
        for row in per_sample {
            if row.iter().any(|&c| c >= classes) {
                return Err(CmcError::Domain(format!("class out of range in {row:?}")));
            }
            entries.push([
                LabelEntry { soft: SoftLabel::onehot(row[0], classes), hard: row[0] },
                LabelEntry { soft: SoftLabel::onehot(row[1], classes), hard: row[1] },
                LabelEntry { soft: SoftLabel::onehot(row[2], classes), hard: row[2] },
            ]);
        }
        Ok(LabelStore { classes, entries })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sample: usize, modality: Modality) -> &LabelEntry {
        &self.entries[sample][modality.index()]
    }

    pub fn hard(&self, sample: usize, modality: Modality) -> usize {
        self.entries[sample][modality.index()].hard
    }

    /// EMA-blend a refined soft label into the store and re-derive the hard
    /// label (argmax, smallest index on ties).
    pub fn apply(
        &mut self,
        sample: usize,
        modality: Modality,
        new_soft: &SoftLabel,
        momentum: f64,
    ) -> Result<()> {
        let entry = &mut self.entries[sample][modality.index()];
        let blended = ema_update_label(&entry.soft, new_soft, momentum)?;
        entry.hard = blended.hard();
        entry.soft = blended;
        Ok(())
    }
}

// ── Parameter EMA ────────────────────────────────────────────────────

/// `shadow <- m * shadow + (1 - m) * live`, elementwise.
pub fn ema_update_tensor<E: Scalar>(shadow: &mut Tensor<E>, live: &Tensor<E>, m: f64) -> Result<()> {
    if shadow.shape() != live.shape() {
        return Err(CmcError::Shape {
            op: "ema_update_params",
            detail: format!("{:?} vs {:?}", shadow.shape(), live.shape()),
        });
    }
    let m_e = E::from_f64(m);
    let one_minus = E::from_f64(1.0 - m);
    for (s, &l) in shadow.data_mut().iter_mut().zip(live.data()) {
        *s = m_e * *s + one_minus * l;
    }
    Ok(())
}

/// Shadow copy of one modality's full model, refreshed by EMA. Trainable
/// tensors are blended; batchnorm running statistics are copied through.
#[derive(Clone, Debug)]
pub struct EmaModel<E> {
    pub encoder: EncoderParams<E>,
    pub classifier: ClassifierParams<E>,
}

impl<E: Scalar> EmaModel<E> {
    /// Initialized equal to the live model.
    pub fn init(encoder: &EncoderParams<E>, classifier: &ClassifierParams<E>) -> Self {
        EmaModel { encoder: encoder.clone(), classifier: classifier.clone() }
    }

    pub fn update(
        &mut self,
        encoder: &EncoderParams<E>,
        classifier: &ClassifierParams<E>,
        m: f64,
    ) -> Result<()> {
        for (shadow, live) in self
            .encoder
            .trainables_mut()
            .into_iter()
            .zip(encoder.trainables())
        {
            ema_update_tensor(shadow, live, m)?;
        }
        for (shadow, live) in self
            .classifier
            .trainables_mut()
            .into_iter()
            .zip(classifier.trainables())
        {
            ema_update_tensor(shadow, live, m)?;
        }
        if let (Some(sbn), Some(lbn)) = (&mut self.encoder.batchnorm, &encoder.batchnorm) {
            sbn.running_mean = lbn.running_mean.clone();
            sbn.running_var = lbn.running_var.clone();
        }
        Ok(())
    }
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // alpha stays in [0,1] and the preferred class never has the larger
        // gradient norm
        #[test]
        fn refinement_coefficient_is_normalized(
            logits in prop::collection::vec(-8.0f64..8.0, 2..6),
            current_pick in 0usize..6,
        ) {
            let current = current_pick % logits.len();
            let r = refine_label(&logits, current).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.alpha));
            let probs = softmax64(&logits);
            let norms = class_gradient_norms(&probs);
            prop_assert!(norms[r.preferred] <= norms[current] + 1e-15);
        }

        // any chain of refine + EMA keeps the label on the simplex
        #[test]
        fn refine_ema_chain_stays_on_simplex(
            seed_logits in prop::collection::vec(prop::collection::vec(-6.0f64..6.0, 3), 1..8),
            m in 0.0f64..1.0,
        ) {
            let mut entry = SoftLabel::onehot(1, 3);
            for logits in &seed_logits {
                let r = refine_label(logits, entry.hard()).unwrap();
                entry = ema_update_label(&entry, &r.soft, m).unwrap();
                let sum: f64 = entry.probs().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6, "sum {}", sum);
                prop_assert!(entry.probs().iter().all(|&p| p >= -1e-12));
            }
        }

        // the momentum iterate never decreases and never leaves [m0, 1]
        #[test]
        fn momentum_iterates_are_monotone(m0 in 0.0f64..1.0, gamma in 0.0f64..4.0) {
            let mut s = MomentumSchedule::new(m0, gamma).unwrap();
            let mut prev = m0;
            for epoch in 1..=50 {
                let m = s.advance(epoch).unwrap();
                prop_assert!(m >= prev - 1e-15);
                prop_assert!(m >= m0 - 1e-15 && m <= 1.0);
                prev = m;
            }
        }
    }
}
