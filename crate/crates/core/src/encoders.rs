//! Unimodal encoders and classifiers.
//!
//! Each modality sequence `[l_k, B, d_k]` runs through optional 1-D batch
//! normalization (audio/vision), a 1-D convolution projecting to the shared
//! width, a post-norm transformer stack, a temporal mean, and row-wise L2
//! normalization, yielding a unit-norm utterance representation `[B, d]`.
//! The classifier is a residual two-linear MLP followed by a class head.

use serde::{Deserialize, Serialize};

use crate::diffcore::blocks::{feed_forward, multi_head_attention, AttentionNodes};
use crate::diffcore::{BatchStats, DropoutKey, Mode, NodeId, Tape, Tensor};
use crate::error::{CmcError, Result};
use crate::modality::Modality;
use crate::rng::{uniform_tensor, SeededRng};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;
/// Running-statistic update rate for batchnorm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub name: Modality,
    pub seq_len: usize,
    pub input_dim: usize,
    pub use_batchnorm: bool,
    pub transformer_layers: usize,
    pub attention_heads: usize,
    #[serde(default = "default_kernel")]
    pub conv_kernel: usize,
    #[serde(default)]
    pub positional_encoding: bool,
    #[serde(default)]
    pub causal_mask: bool,
}

fn default_kernel() -> usize {
    1
}

impl ModalityConfig {
    pub fn validate(&self, shared_dim: usize) -> Result<()> {
        if self.seq_len == 0 || self.input_dim == 0 {
            return Err(CmcError::Config(format!(
                "{}: seq_len and input_dim must be positive",
                self.name
            )));
        }
        if self.transformer_layers == 0 {
            return Err(CmcError::Config(format!("{}: need at least one transformer layer", self.name)));
        }
        if self.attention_heads == 0 || shared_dim % self.attention_heads != 0 {
            return Err(CmcError::Config(format!(
                "{}: {} attention heads do not divide shared dim {}",
                self.name, self.attention_heads, shared_dim
            )));
        }
        if self.name == Modality::Text && self.use_batchnorm {
            return Err(CmcError::Config("text modality must not use batchnorm".into()));
        }
        if self.conv_kernel == 0 || self.conv_kernel > self.seq_len {
            return Err(CmcError::Config(format!(
                "{}: conv kernel {} invalid for sequence length {}",
                self.name, self.conv_kernel, self.seq_len
            )));
        }
        Ok(())
    }
}

// ── Parameters ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct BatchNormParams<E> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
}

#[derive(Clone, Debug)]
pub struct TransformerLayerParams<E> {
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub wo: Tensor<E>,
    pub bo: Tensor<E>,
    pub ln1_gamma: Tensor<E>,
    pub ln1_beta: Tensor<E>,
    pub ffn_w1: Tensor<E>,
    pub ffn_b1: Tensor<E>,
    pub ffn_w2: Tensor<E>,
    pub ffn_b2: Tensor<E>,
    pub ln2_gamma: Tensor<E>,
    pub ln2_beta: Tensor<E>,
}

#[derive(Clone, Debug)]
pub struct EncoderParams<E> {
    pub batchnorm: Option<BatchNormParams<E>>,
    /// `[d, d_k, kernel]`
    pub conv_weight: Tensor<E>,
    pub conv_bias: Tensor<E>,
    pub layers: Vec<TransformerLayerParams<E>>,
}

#[derive(Clone, Debug)]
pub struct ClassifierParams<E> {
    pub inner_w: Tensor<E>,
    pub inner_b: Tensor<E>,
    pub outer_w: Tensor<E>,
    pub outer_b: Tensor<E>,
    pub head_w: Tensor<E>,
    pub head_b: Tensor<E>,
    pub dropout: f64,
}

fn linear_init<E: Scalar>(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor<E> {
    let bound = 1.0 / (rows as f64).sqrt();
    uniform_tensor(rng, vec![rows, cols], -bound, bound)
}

impl<E: Scalar> EncoderParams<E> {
    pub fn init(cfg: &ModalityConfig, shared_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate(shared_dim)?;
        let d = shared_dim;
        let dk = cfg.input_dim;
        let batchnorm = cfg.use_batchnorm.then(|| BatchNormParams {
            gamma: Tensor::full(vec![dk], E::ONE),
            beta: Tensor::zeros(vec![dk]),
            running_mean: Tensor::zeros(vec![dk]),
            running_var: Tensor::full(vec![dk], E::ONE),
        });
        let fan_in = dk * cfg.conv_kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let conv_weight = uniform_tensor(rng, vec![d, dk, cfg.conv_kernel], -bound, bound);
        let conv_bias = Tensor::zeros(vec![d]);
        let layers = (0..cfg.transformer_layers)
            .map(|_| TransformerLayerParams {
                wq: linear_init(rng, d, d),
                bq: Tensor::zeros(vec![d]),
                wk: linear_init(rng, d, d),
                bk: Tensor::zeros(vec![d]),
                wv: linear_init(rng, d, d),
                bv: Tensor::zeros(vec![d]),
                wo: linear_init(rng, d, d),
                bo: Tensor::zeros(vec![d]),
                ln1_gamma: Tensor::full(vec![d], E::ONE),
                ln1_beta: Tensor::zeros(vec![d]),
                ffn_w1: linear_init(rng, d, 2 * d),
                ffn_b1: Tensor::zeros(vec![2 * d]),
                ffn_w2: linear_init(rng, 2 * d, d),
                ffn_b2: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::full(vec![d], E::ONE),
                ln2_beta: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(EncoderParams { batchnorm, conv_weight, conv_bias, layers })
    }

    /// Trainable tensors in visitation order (batchnorm running statistics are
    /// buffers, not trainables). `trainables`, `trainables_mut` and
    /// `EncoderNodes::ids` must stay aligned.
    pub fn trainables(&self) -> Vec<&Tensor<E>> {
        let mut out = Vec::new();
        if let Some(bn) = &self.batchnorm {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out.push(&self.conv_weight);
        out.push(&self.conv_bias);
        for l in &self.layers {
            out.extend([
                &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln1_gamma,
                &l.ln1_beta, &l.ffn_w1, &l.ffn_b1, &l.ffn_w2, &l.ffn_b2, &l.ln2_gamma,
                &l.ln2_beta,
            ]);
        }
        out
    }

    pub fn trainables_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out: Vec<&mut Tensor<E>> = Vec::new();
        if let Some(bn) = &mut self.batchnorm {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.push(&mut self.conv_weight);
        out.push(&mut self.conv_bias);
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln1_gamma,
                &mut l.ln1_beta,
                &mut l.ffn_w1,
                &mut l.ffn_b1,
                &mut l.ffn_w2,
                &mut l.ffn_b2,
                &mut l.ln2_gamma,
                &mut l.ln2_beta,
            ]);
        }
        out
    }

    pub fn names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.batchnorm.is_some() {
            out.push(format!("{prefix}.bn.gamma"));
            out.push(format!("{prefix}.bn.beta"));
        }
        out.push(format!("{prefix}.conv.weight"));
        out.push(format!("{prefix}.conv.bias"));
        for (i, _) in self.layers.iter().enumerate() {
            for field in [
                "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1.gamma", "ln1.beta",
                "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.gamma", "ln2.beta",
            ] {
                out.push(format!("{prefix}.layer{i}.{field}"));
            }
        }
        out
    }
}

impl<E: Scalar> ClassifierParams<E> {
    pub fn init(shared_dim: usize, classes: usize, dropout: f64, rng: &mut SeededRng) -> Result<Self> {
        if classes < 2 {
            return Err(CmcError::Config(format!("need at least 2 classes, got {classes}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(CmcError::Config(format!("dropout {dropout} outside [0,1)")));
        }
        let d = shared_dim;
        Ok(ClassifierParams {
            inner_w: linear_init(rng, d, d),
            inner_b: Tensor::zeros(vec![d]),
            outer_w: linear_init(rng, d, d),
            outer_b: Tensor::zeros(vec![d]),
            head_w: linear_init(rng, d, classes),
            head_b: Tensor::zeros(vec![classes]),
            dropout,
        })
    }

    pub fn trainables(&self) -> Vec<&Tensor<E>> {
        vec![
            &self.inner_w,
            &self.inner_b,
            &self.outer_w,
            &self.outer_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn trainables_mut(&mut self) -> Vec<&mut Tensor<E>> {
        vec![
            &mut self.inner_w,
            &mut self.inner_b,
            &mut self.outer_w,
            &mut self.outer_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn names(&self, prefix: &str) -> Vec<String> {
        ["inner.w", "inner.b", "outer.w", "outer.b", "head.w", "head.b"]
            .iter()
            .map(|f| format!("{prefix}.{f}"))
            .collect()
    }
}

// ── Tape registration ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub bn: Option<(NodeId, NodeId)>,
    pub conv_w: NodeId,
    pub conv_b: NodeId,
    pub layers: Vec<LayerNodes>,
}

#[derive(Clone, Debug)]
pub struct LayerNodes {
    pub attention: AttentionNodes,
    pub ln1: (NodeId, NodeId),
    pub ffn: (NodeId, NodeId, NodeId, NodeId),
    pub ln2: (NodeId, NodeId),
}

#[derive(Clone, Debug)]
pub struct ClassifierNodes {
    pub inner_w: NodeId,
    pub inner_b: NodeId,
    pub outer_w: NodeId,
    pub outer_b: NodeId,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

impl EncoderNodes {
    /// Register all encoder tensors on the tape. `trainable` decides whether
    /// they are parameter leaves (receiving gradients) or frozen inputs.
    pub fn register<E: Scalar>(tape: &mut Tape<E>, p: &EncoderParams<E>, trainable: bool) -> Self {
        let mut reg = |t: &Tensor<E>| if trainable { tape.param(t.clone()) } else { tape.input(t.clone()) };
        let bn = p.batchnorm.as_ref().map(|bn| (reg(&bn.gamma), reg(&bn.beta)));
        let conv_w = reg(&p.conv_weight);
        let conv_b = reg(&p.conv_bias);
        let layers = p
            .layers
            .iter()
            .map(|l| LayerNodes {
                attention: AttentionNodes {
                    wq: reg(&l.wq),
                    bq: reg(&l.bq),
                    wk: reg(&l.wk),
                    bk: reg(&l.bk),
                    wv: reg(&l.wv),
                    bv: reg(&l.bv),
                    wo: reg(&l.wo),
                    bo: reg(&l.bo),
                },
                ln1: (reg(&l.ln1_gamma), reg(&l.ln1_beta)),
                ffn: (reg(&l.ffn_w1), reg(&l.ffn_b1), reg(&l.ffn_w2), reg(&l.ffn_b2)),
                ln2: (reg(&l.ln2_gamma), reg(&l.ln2_beta)),
            })
            .collect();
        EncoderNodes { bn, conv_w, conv_b, layers }
    }

    /// Node ids in the same order as `EncoderParams::trainables`.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        if let Some((g, b)) = self.bn {
            out.push(g);
            out.push(b);
        }
        out.push(self.conv_w);
        out.push(self.conv_b);
        for l in &self.layers {
            let a = &l.attention;
            out.extend([
                a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo, l.ln1.0, l.ln1.1, l.ffn.0,
                l.ffn.1, l.ffn.2, l.ffn.3, l.ln2.0, l.ln2.1,
            ]);
        }
        out
    }
}

impl ClassifierNodes {
    pub fn register<E: Scalar>(tape: &mut Tape<E>, p: &ClassifierParams<E>, trainable: bool) -> Self {
        let mut reg = |t: &Tensor<E>| if trainable { tape.param(t.clone()) } else { tape.input(t.clone()) };
        ClassifierNodes {
            inner_w: reg(&p.inner_w),
            inner_b: reg(&p.inner_b),
            outer_w: reg(&p.outer_w),
            outer_b: reg(&p.outer_b),
            head_w: reg(&p.head_w),
            head_b: reg(&p.head_b),
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        vec![self.inner_w, self.inner_b, self.outer_w, self.outer_b, self.head_w, self.head_b]
    }
}

// ── Forward builders ─────────────────────────────────────────────────

pub struct EncodeOutput {
    /// `[B, d]`, unit-norm rows.
    pub output: NodeId,
    /// Present when batchnorm ran in train mode.
    pub batch_stats: Option<BatchStats<f64>>,
}

/// Record the encoder pipeline for one modality batch `x [l_k, B, d_k]`.
pub fn encode<E: Scalar>(
    tape: &mut Tape<E>,
    x: NodeId,
    params: &EncoderParams<E>,
    nodes: &EncoderNodes,
    cfg: &ModalityConfig,
    shared_dim: usize,
    mode: Mode,
) -> Result<EncodeOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.input_dim {
        return Err(CmcError::Shape {
            op: "encode",
            detail: format!("{} input {shape:?}, expected [l,B,{}]", cfg.name, cfg.input_dim),
        });
    }
    let b = shape[1];

    let mut batch_stats = None;
    let mut h = x;
    if let (Some(bn_params), Some((gamma, beta))) = (&params.batchnorm, nodes.bn) {
        let running_mean: Vec<E> = bn_params.running_mean.data().to_vec();
        let running_var: Vec<E> = bn_params.running_var.data().to_vec();
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some((running_mean.as_slice(), running_var.as_slice())),
        };
        let (out, stats) = tape.batchnorm1d(h, gamma, beta, running, mode, E::from_f64(BN_EPS))?;
        h = out;
        batch_stats = stats.map(|s| BatchStats {
            mean: s.mean.iter().map(|v| v.to_f64()).collect(),
            var: s.var.iter().map(|v| v.to_f64()).collect(),
            var_unbiased: s.var_unbiased.iter().map(|v| v.to_f64()).collect(),
        });
    }

    h = tape.conv1d(h, nodes.conv_w, nodes.conv_b)?;

    if cfg.positional_encoding {
        let l_out = tape.shape(h)[0];
        let pe = sinusoidal_encoding::<E>(l_out, b, shared_dim);
        let pe = tape.input(pe);
        h = tape.add(h, pe)?;
    }

    for layer in &nodes.layers {
        let attn = multi_head_attention(tape, h, &layer.attention, cfg.attention_heads, cfg.causal_mask)?;
        let res = tape.add(h, attn)?;
        h = tape.layernorm(res, layer.ln1.0, layer.ln1.1, E::from_f64(LN_EPS))?;
        let ff = feed_forward(tape, h, layer.ffn.0, layer.ffn.1, layer.ffn.2, layer.ffn.3)?;
        let res = tape.add(h, ff)?;
        h = tape.layernorm(res, layer.ln2.0, layer.ln2.1, E::from_f64(LN_EPS))?;
    }

    let pooled = tape.mean_axis(h, 0)?;
    let output = tape.l2_normalize_rows(pooled)?;
    Ok(EncodeOutput { output, batch_stats })
}

/// Record the residual classifier on `h [B, d]`, producing logits `[B, c]`.
pub fn classify<E: Scalar>(
    tape: &mut Tape<E>,
    h: NodeId,
    params: &ClassifierParams<E>,
    nodes: &ClassifierNodes,
    mode: Mode,
) -> Result<NodeId> {
    let inner = tape.matmul(h, nodes.inner_w)?;
    let inner = tape.add_bias(inner, nodes.inner_b)?;
    let inner = tape.relu(inner)?;
    let inner = tape.dropout(inner, params.dropout, mode)?;
    let outer = tape.matmul(inner, nodes.outer_w)?;
    let h_bar = tape.add_bias(outer, nodes.outer_b)?;
    let residual = tape.add(h_bar, h)?;
    let logits = tape.matmul(residual, nodes.head_w)?;
    tape.add_bias(logits, nodes.head_b)
}

/// One-shot encode for callers without a tape (inference, tests).
pub fn encode_modality<E: Scalar>(
    x: &Tensor<E>,
    params: &EncoderParams<E>,
    cfg: &ModalityConfig,
    shared_dim: usize,
    mode: Mode,
    dropout_key: DropoutKey,
) -> Result<Tensor<E>> {
    let mut tape = Tape::with_dropout_key(dropout_key);
    let input = tape.input(x.clone());
    let nodes = EncoderNodes::register(&mut tape, params, false);
    let out = encode(&mut tape, input, params, &nodes, cfg, shared_dim, mode)?;
    Ok(tape.value(out.output).clone())
}

/// One-shot classify for callers without a tape.
pub fn classify_batch<E: Scalar>(
    h: &Tensor<E>,
    params: &ClassifierParams<E>,
    mode: Mode,
    dropout_key: DropoutKey,
) -> Result<Tensor<E>> {
    let mut tape = Tape::with_dropout_key(dropout_key);
    let input = tape.input(h.clone());
    let nodes = ClassifierNodes::register(&mut tape, params, false);
    let logits = classify(&mut tape, input, params, &nodes, mode)?;
    Ok(tape.value(logits).clone())
}

fn sinusoidal_encoding<E: Scalar>(l: usize, b: usize, d: usize) -> Tensor<E> {
    Tensor::from_fn(vec![l, b, d], |idx| {
        let t = idx / (b * d);
        let j = idx % d;
        let rate = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = t as f64 * rate;
        E::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Update batchnorm running statistics from a train-mode batch.
pub fn update_running_stats<E: Scalar>(bn: &mut BatchNormParams<E>, stats: &BatchStats<f64>) {
    let m = BN_MOMENTUM;
    for (r, &b) in bn.running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = E::from_f64(r.to_f64() * (1.0 - m) + b * m);
    }
    for (r, &b) in bn.running_var.data_mut().iter_mut().zip(&stats.var_unbiased) {
        *r = E::from_f64(r.to_f64() * (1.0 - m) + b * m);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn audio_cfg(l: usize, dk: usize) -> ModalityConfig {
        ModalityConfig {
            name: Modality::Audio,
            seq_len: l,
            input_dim: dk,
            use_batchnorm: true,
            transformer_layers: 1,
            attention_heads: 2,
            conv_kernel: 1,
            positional_encoding: false,
            causal_mask: false,
        }
    }

    #[test]
    fn config_rules() {
        let mut cfg = audio_cfg(8, 4);
        assert!(cfg.validate(32).is_ok());
        cfg.attention_heads = 5; // does not divide 32
        assert!(cfg.validate(32).is_err());
        let mut text = audio_cfg(8, 4);
        text.name = Modality::Text;
        text.attention_heads = 2;
        assert!(text.validate(32).is_err(), "text with batchnorm must be rejected");
    }

    #[test]
    fn sims_audio_shape_maps_to_shared_dim() {
        // Sequence geometry of the 400x33 audio descriptor table.
        let cfg = audio_cfg(400, 33);
        let d = 16;
        let mut rng = seeded(0);
        let params = EncoderParams::<f32>::init(&cfg, d, &mut rng).unwrap();
        let b = 3;
        let x = uniform_tensor::<f32>(&mut rng, vec![400, b, 33], -1.0, 1.0);
        let h = encode_modality(&x, &params, &cfg, d, Mode::Eval, DropoutKey::default()).unwrap();
        assert_eq!(h.shape(), &[b, d]);
        for row in h.data().chunks(d) {
            let n = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5, "row norm {n}");
        }
    }

    #[test]
    fn duplicate_samples_encode_identically_in_eval() {
        let cfg = audio_cfg(6, 5);
        let d = 8;
        let mut rng = seeded(1);
        let params = EncoderParams::<f64>::init(&cfg, d, &mut rng).unwrap();
        // batch of 3 where rows 0 and 2 are the same sample
        let single = uniform_tensor::<f64>(&mut rng, vec![6, 1, 5], -1.0, 1.0);
        let other = uniform_tensor::<f64>(&mut rng, vec![6, 1, 5], -1.0, 1.0);
        let x = Tensor::from_fn(vec![6, 3, 5], |idx| {
            let t = idx / 15;
            let b = (idx % 15) / 5;
            let j = idx % 5;
            let src = if b == 1 { &other } else { &single };
            src.data()[t * 5 + j]
        });
        let h = encode_modality(&x, &params, &cfg, d, Mode::Eval, DropoutKey::default()).unwrap();
        let rows: Vec<&[f64]> = h.data().chunks(d).collect();
        assert_eq!(rows[0], rows[2]);
        assert_ne!(rows[0], rows[1]);
    }

    #[test]
    fn text_eval_is_batch_composition_independent() {
        let mut cfg = audio_cfg(5, 4);
        cfg.name = Modality::Text;
        cfg.use_batchnorm = false;
        let d = 8;
        let mut rng = seeded(2);
        let params = EncoderParams::<f64>::init(&cfg, d, &mut rng).unwrap();
        let sample = uniform_tensor::<f64>(&mut rng, vec![5, 1, 4], -1.0, 1.0);
        let filler = uniform_tensor::<f64>(&mut rng, vec![5, 2, 4], -1.0, 1.0);
        let alone = encode_modality(&sample, &params, &cfg, d, Mode::Eval, DropoutKey::default()).unwrap();
        let batch = Tensor::from_fn(vec![5, 3, 4], |idx| {
            let t = idx / 12;
            let b = (idx % 12) / 4;
            let j = idx % 4;
            if b == 0 {
                sample.data()[t * 4 + j]
            } else {
                filler.data()[(t * 2 + (b - 1)) * 4 + j]
            }
        });
        let together = encode_modality(&batch, &params, &cfg, d, Mode::Eval, DropoutKey::default()).unwrap();
        for j in 0..d {
            assert!(
                (alone.data()[j] - together.data()[j]).abs() < 1e-6,
                "dim {j}: {} vs {}",
                alone.data()[j],
                together.data()[j]
            );
        }
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = audio_cfg(4, 3);
        let d = 8;
        let mut rng = seeded(3);
        let params = EncoderParams::<f64>::init(&cfg, d, &mut rng).unwrap();
        let x = uniform_tensor::<f64>(&mut rng, vec![4, 3, 3], -1.0, 1.0);
        // swap batch elements 0 and 2
        let perm = Tensor::from_fn(vec![4, 3, 3], |idx| {
            let t = idx / 9;
            let b = (idx % 9) / 3;
            let j = idx % 3;
            let src_b = match b {
                0 => 2,
                2 => 0,
                other => other,
            };
            x.data()[(t * 3 + src_b) * 3 + j]
        });
        let h = encode_modality(&x, &params, &cfg, d, Mode::Train, DropoutKey::default()).unwrap();
        let hp = encode_modality(&perm, &params, &cfg, d, Mode::Train, DropoutKey::default()).unwrap();
        for j in 0..d {
            assert!((h.data()[j] - hp.data()[2 * d + j]).abs() < 1e-9);
            assert!((h.data()[d + j] - hp.data()[d + j]).abs() < 1e-9);
            assert!((h.data()[2 * d + j] - hp.data()[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn zeroed_classifier_emits_zero_logits() {
        let d = 6;
        let mut rng = seeded(4);
        let mut params = ClassifierParams::<f64>::init(d, 3, 0.0, &mut rng).unwrap();
        for t in params.trainables_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let h = uniform_tensor::<f64>(&mut rng, vec![2, d], -1.0, 1.0);
        let logits = classify_batch(&h, &params, Mode::Eval, DropoutKey::default()).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_path_reaches_head_directly() {
        // inner MLP zeroed, head = identity (d == c): logits should equal h
        let d = 3;
        let mut rng = seeded(5);
        let mut params = ClassifierParams::<f64>::init(d, d, 0.0, &mut rng).unwrap();
        for t in [&mut params.inner_w, &mut params.inner_b, &mut params.outer_w, &mut params.outer_b] {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        params.head_w = Tensor::from_fn(vec![d, d], |idx| if idx / d == idx % d { 1.0 } else { 0.0 });
        params.head_b = Tensor::zeros(vec![d]);
        let h = uniform_tensor::<f64>(&mut rng, vec![2, d], -1.0, 1.0);
        let logits = classify_batch(&h, &params, Mode::Eval, DropoutKey::default()).unwrap();
        for (a, b) in logits.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_shape_oracle() {
        let (b, d, c) = (2, 32, 3);
        let mut rng = seeded(6);
        let params = ClassifierParams::<f32>::init(d, c, 0.1, &mut rng).unwrap();
        let h = uniform_tensor::<f32>(&mut rng, vec![b, d], -1.0, 1.0);
        let logits = classify_batch(&h, &params, Mode::Eval, DropoutKey::default()).unwrap();
        assert_eq!(logits.shape(), &[b, c]);
    }
}
