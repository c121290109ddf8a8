//! Run configuration: every hyperparameter of a two-stage run, mirrored
//! field-for-field by the JSON config file.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoders::ModalityConfig;
use crate::error::{CmcError, Result};
use crate::metrics::BinaryMode;
use crate::modality::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantTag {
    Full,
    WoPlgm,
    WoPfm,
    WoMcr,
    SingleTask,
    SingleTaskWoPfm,
    CmcVariant,
    GtLabels,
}

impl VariantTag {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| CmcError::Config(format!("unknown variant tag `{s}`")))
    }

    pub fn name(self) -> &'static str {
        match self {
            VariantTag::Full => "full",
            VariantTag::WoPlgm => "wo_plgm",
            VariantTag::WoPfm => "wo_pfm",
            VariantTag::WoMcr => "wo_mcr",
            VariantTag::SingleTask => "single_task",
            VariantTag::SingleTaskWoPfm => "single_task_wo_pfm",
            VariantTag::CmcVariant => "cmc_variant",
            VariantTag::GtLabels => "gt_labels",
        }
    }

    /// Stage-1 pseudo-label refinement runs unless the variant fixes labels.
    pub fn refines_labels(self) -> bool {
        !matches!(self, VariantTag::WoPlgm | VariantTag::GtLabels)
    }

    pub fn uses_pfm(self) -> bool {
        !matches!(
            self,
            VariantTag::WoPfm | VariantTag::SingleTaskWoPfm | VariantTag::CmcVariant
        )
    }

    pub fn uses_mcr(self) -> bool {
        self != VariantTag::WoMcr
    }

    /// Stage-2 objective keeps the per-modality and contrastive terms.
    pub fn multi_task_stage2(self) -> bool {
        !matches!(
            self,
            VariantTag::SingleTask | VariantTag::SingleTaskWoPfm | VariantTag::CmcVariant
        )
    }

    /// Encoders and classifiers stay frozen during stage 2.
    pub fn freezes_unimodal(self) -> bool {
        self == VariantTag::CmcVariant
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MomentumSetting {
    pub m0: f64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub text: T,
    pub audio: T,
    pub vision: T,
}

impl<T: Copy> PerModality<T> {
    pub fn get(&self, m: Modality) -> T {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Vision => self.vision,
        }
    }
}

/// Per-modality architecture section of the config. Sequence geometry is
/// usually resolved from the archive; explicit values are validated against
/// it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModalitySection {
    pub transformer_layers: usize,
    pub attention_heads: usize,
    #[serde(default)]
    pub use_batchnorm: Option<bool>,
    #[serde(default)]
    pub seq_len: Option<usize>,
    #[serde(default)]
    pub input_dim: Option<usize>,
    #[serde(default = "one")]
    pub conv_kernel: usize,
    #[serde(default)]
    pub positional_encoding: bool,
    #[serde(default)]
    pub causal_mask: bool,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub shared_dim: usize,
    pub classes: usize,
    /// Fusion temperature.
    pub tau: f64,
    /// Contrastive temperature.
    pub tau_c: f64,
    pub output_dropout: f64,
    pub text: ModalitySection,
    pub audio: ModalitySection,
    pub vision: ModalitySection,
    pub label_momentum: PerModality<MomentumSetting>,
    pub theta_momentum: PerModality<MomentumSetting>,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub variant: VariantTag,
    pub binary_mode: BinaryMode,
    #[serde(default = "one_f64")]
    pub supcon_weight: f64,
    #[serde(default = "one_f64")]
    pub stage2_unimodal_weight: f64,
    /// Initialize stage 2 from the EMA shadows (default) or live weights.
    #[serde(default = "yes")]
    pub stage2_init_from_ema: bool,
    /// Keep updating batchnorm running statistics during stage 2.
    #[serde(default = "yes")]
    pub stage2_update_batchnorm: bool,
}

fn one_f64() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for RunConfig {
    fn default() -> Self {
        let section = |layers, heads| ModalitySection {
            transformer_layers: layers,
            attention_heads: heads,
            use_batchnorm: None,
            seq_len: None,
            input_dim: None,
            conv_kernel: 1,
            positional_encoding: false,
            causal_mask: false,
        };
        RunConfig {
            shared_dim: 32,
            classes: 3,
            tau: 0.07,
            tau_c: 0.07,
            output_dropout: 0.4,
            text: section(5, 4),
            audio: section(5, 4),
            vision: section(5, 4),
            label_momentum: PerModality {
                text: MomentumSetting { m0: 0.8, gamma: 0.5 },
                audio: MomentumSetting { m0: 0.99, gamma: 0.5 },
                vision: MomentumSetting { m0: 0.99, gamma: 0.5 },
            },
            theta_momentum: PerModality {
                text: MomentumSetting { m0: 0.8, gamma: 2.5 },
                audio: MomentumSetting { m0: 0.9, gamma: 5.0 },
                vision: MomentumSetting { m0: 0.6, gamma: 2.0 },
            },
            epochs: 100,
            patience: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 1111,
            variant: VariantTag::Full,
            binary_mode: BinaryMode::NonposVsPos,
            supcon_weight: 1.0,
            stage2_unimodal_weight: 1.0,
            stage2_init_from_ema: true,
            stage2_update_batchnorm: true,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn section(&self, m: Modality) -> &ModalitySection {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Vision => &self.vision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes != 3 {
            return Err(CmcError::Config(
                "score discretization defines 3 classes; classes must be 3".into(),
            ));
        }
        if self.tau <= 0.0 || self.tau_c <= 0.0 {
            return Err(CmcError::Config("temperatures must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.output_dropout) {
            return Err(CmcError::Config("output_dropout outside [0,1)".into()));
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(CmcError::Config("batch_size and learning_rate must be positive".into()));
        }
        for m in Modality::ALL {
            let s = self.section(m);
            if s.transformer_layers == 0 || s.attention_heads == 0 {
                return Err(CmcError::Config(format!("{m}: layers and heads must be positive")));
            }
            if self.shared_dim % s.attention_heads != 0 {
                return Err(CmcError::Config(format!(
                    "{m}: {} heads do not divide shared dim {}",
                    s.attention_heads, self.shared_dim
                )));
            }
            if s.use_batchnorm == Some(true) && m == Modality::Text {
                return Err(CmcError::Config("text modality must not use batchnorm".into()));
            }
        }
        for m in Modality::ALL {
            for setting in [self.label_momentum.get(m), self.theta_momentum.get(m)] {
                if !(0.0..=1.0).contains(&setting.m0) || setting.gamma < 0.0 {
                    return Err(CmcError::Config(format!("{m}: invalid momentum setting")));
                }
            }
        }
        Ok(())
    }

    /// Resolve a full `ModalityConfig` against the archive's geometry.
    pub fn modality_config(&self, m: Modality, dataset: &Dataset) -> Result<ModalityConfig> {
        let loaded = dataset.require_modality(m)?;
        let s = self.section(m);
        if let Some(l) = s.seq_len {
            if l != loaded.seq_len {
                return Err(CmcError::Config(format!(
                    "{m}: config seq_len {l} != archive {}",
                    loaded.seq_len
                )));
            }
        }
        if let Some(d) = s.input_dim {
            if d != loaded.dim {
                return Err(CmcError::Config(format!(
                    "{m}: config input_dim {d} != archive {}",
                    loaded.dim
                )));
            }
        }
        let cfg = ModalityConfig {
            name: m,
            seq_len: loaded.seq_len,
            input_dim: loaded.dim,
            use_batchnorm: s.use_batchnorm.unwrap_or(m != Modality::Text),
            transformer_layers: s.transformer_layers,
            attention_heads: s.attention_heads,
            conv_kernel: s.conv_kernel,
            positional_encoding: s.positional_encoding,
            causal_mask: s.causal_mask,
        };
        cfg.validate(self.shared_dim)?;
        Ok(cfg)
    }
}
