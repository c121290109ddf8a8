//! Full model assembly: three unimodal models plus the router, with named
//! state for checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consensus::RouterParams;
use crate::data::Dataset;
use crate::diffcore::Tensor;
use crate::encoders::{ClassifierParams, EncoderParams, ModalityConfig};
use crate::error::{CmcError, Result};
use crate::modality::Modality;
use crate::pipeline::config::RunConfig;
use crate::plgm::EmaModel;
use crate::rng::{seeded, sub_seed};

#[derive(Clone, Debug)]
pub struct ModalityModel {
    pub config: ModalityConfig,
    pub encoder: EncoderParams<f32>,
    pub classifier: ClassifierParams<f32>,
}

#[derive(Clone, Debug)]
pub struct CmcModel {
    pub shared_dim: usize,
    pub classes: usize,
    pub modalities: Vec<ModalityModel>,
    pub router: RouterParams<f32>,
}

impl CmcModel {
    /// Deterministic initialization from the run seed and archive geometry.
    pub fn init(cfg: &RunConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(sub_seed(cfg.seed, "model-init"));
        let mut modalities = Vec::with_capacity(3);
        for m in Modality::ALL {
            let mc = cfg.modality_config(m, dataset)?;
            let encoder = EncoderParams::init(&mc, cfg.shared_dim, &mut rng)?;
            let classifier =
                ClassifierParams::init(cfg.shared_dim, cfg.classes, cfg.output_dropout, &mut rng)?;
            modalities.push(ModalityModel { config: mc, encoder, classifier });
        }
        let router = RouterParams::init(cfg.shared_dim, &mut rng);
        Ok(CmcModel { shared_dim: cfg.shared_dim, classes: cfg.classes, modalities, router })
    }

    pub fn modality(&self, m: Modality) -> &ModalityModel {
        &self.modalities[m.index()]
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut ModalityModel {
        &mut self.modalities[m.index()]
    }

    /// Named trainable tensors of the unimodal models (no router).
    pub fn unimodal_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for m in Modality::ALL {
            let model = self.modality(m);
            names.extend(model.encoder.names(m.name()));
            names.extend(model.classifier.names(&format!("{}.classifier", m.name())));
        }
        names
    }

    pub fn router_names(&self) -> Vec<String> {
        self.router.names("router")
    }

    /// All named state (trainables plus batchnorm buffers plus router), for
    /// checkpoints.
    pub fn state_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for m in Modality::ALL {
            let model = self.modality(m);
            for (name, t) in model.encoder.names(m.name()).into_iter().zip(model.encoder.trainables()) {
                out.push((name, t.clone()));
            }
            if let Some(bn) = &model.encoder.batchnorm {
                out.push((format!("{}.bn.running_mean", m.name()), bn.running_mean.clone()));
                out.push((format!("{}.bn.running_var", m.name()), bn.running_var.clone()));
            }
            let cls_prefix = format!("{}.classifier", m.name());
            for (name, t) in model
                .classifier
                .names(&cls_prefix)
                .into_iter()
                .zip(model.classifier.trainables())
            {
                out.push((name, t.clone()));
            }
        }
        for (name, t) in self.router.names("router").into_iter().zip(self.router.trainables()) {
            out.push((name, t.clone()));
        }
        out
    }

    /// Restore from named state; every present name must match shapes.
    pub fn load_state(&mut self, entries: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        let assign = |dst: &mut Tensor<f32>, name: &str| -> Result<()> {
            let src = entries.get(name).ok_or_else(|| CmcError::Archive {
                field: format!("checkpoint.{name}"),
                detail: "missing tensor".into(),
            })?;
            if src.shape() != dst.shape() {
                return Err(CmcError::Shape {
                    op: "load_state",
                    detail: format!("{name}: {:?} vs {:?}", src.shape(), dst.shape()),
                });
            }
            *dst = src.clone();
            Ok(())
        };
        for m in Modality::ALL {
            let model = &mut self.modalities[m.index()];
            let names = model.encoder.names(m.name());
            for (t, name) in model.encoder.trainables_mut().into_iter().zip(&names) {
                assign(t, name)?;
            }
            if let Some(bn) = &mut model.encoder.batchnorm {
                assign(&mut bn.running_mean, &format!("{}.bn.running_mean", m.name()))?;
                assign(&mut bn.running_var, &format!("{}.bn.running_var", m.name()))?;
            }
            let cls_prefix = format!("{}.classifier", m.name());
            let names = model.classifier.names(&cls_prefix);
            for (t, name) in model.classifier.trainables_mut().into_iter().zip(&names) {
                assign(t, name)?;
            }
        }
        let names = self.router.names("router");
        for (t, name) in self.router.trainables_mut().into_iter().zip(&names) {
            assign(t, name)?;
        }
        Ok(())
    }

    /// Overwrite encoders and classifiers from EMA shadows (router untouched).
    pub fn adopt_ema(&mut self, shadows: &[EmaModel<f32>]) {
        for (model, shadow) in self.modalities.iter_mut().zip(shadows) {
            model.encoder = shadow.encoder.clone();
            model.classifier = shadow.classifier.clone();
        }
    }

    pub fn ema_shadows(&self) -> Vec<EmaModel<f32>> {
        self.modalities
            .iter()
            .map(|m| EmaModel::init(&m.encoder, &m.classifier))
            .collect()
    }
}

// ── Checkpoint files ─────────────────────────────────────────────────
//
// `<name>.bin`: concatenated f32 little-endian payloads (the archive payload
// convention); `<name>.json`: ordered tensor manifest with element offsets.

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn save_checkpoint(dir: &Path, name: &str, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(entries.len());
    let mut offset = 0usize;
    let mut payload: Vec<u8> = Vec::new();
    for (tensor_name, tensor) in entries {
        manifest.push(TensorEntry {
            name: tensor_name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.numel();
    }
    let mut bin = std::fs::File::create(dir.join(format!("{name}.bin")))?;
    bin.write_all(&payload)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(format!("{name}.json")), json)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, name: &str) -> Result<BTreeMap<String, Tensor<f32>>> {
    let manifest_path = dir.join(format!("{name}.json"));
    let manifest: Vec<TensorEntry> =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).map_err(|e| {
            CmcError::Archive {
                field: format!("checkpoint {name}"),
                detail: format!("{}: {e}", manifest_path.display()),
            }
        })?)?;
    let mut bytes = Vec::new();
    std::fs::File::open(dir.join(format!("{name}.bin")))
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CmcError::Archive {
            field: format!("checkpoint {name}"),
            detail: e.to_string(),
        })?;
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut out = BTreeMap::new();
    for entry in manifest {
        let numel: usize = entry.shape.iter().product();
        if entry.offset + numel > floats.len() {
            return Err(CmcError::Archive {
                field: format!("checkpoint.{}", entry.name),
                detail: "payload truncated".into(),
            });
        }
        let data = floats[entry.offset..entry.offset + numel].to_vec();
        out.insert(entry.name, Tensor::new(entry.shape, data)?);
    }
    Ok(out)
}

/// EMA checkpoint entries for the three shadows (no router).
pub fn ema_state_entries(shadows: &[EmaModel<f32>]) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    for (m, shadow) in Modality::ALL.iter().zip(shadows) {
        for (name, t) in shadow.encoder.names(m.name()).into_iter().zip(shadow.encoder.trainables()) {
            out.push((name, t.clone()));
        }
        if let Some(bn) = &shadow.encoder.batchnorm {
            out.push((format!("{}.bn.running_mean", m.name()), bn.running_mean.clone()));
            out.push((format!("{}.bn.running_var", m.name()), bn.running_var.clone()));
        }
        let cls_prefix = format!("{}.classifier", m.name());
        for (name, t) in shadow
            .classifier
            .names(&cls_prefix)
            .into_iter()
            .zip(shadow.classifier.trainables())
        {
            out.push((name, t.clone()));
        }
    }
    out
}

/// Restore EMA shadows from a checkpoint map, using the model for shapes.
pub fn load_ema_shadows(
    model: &CmcModel,
    entries: &BTreeMap<String, Tensor<f32>>,
) -> Result<Vec<EmaModel<f32>>> {
    let mut shadows = model.ema_shadows();
    for (m, shadow) in Modality::ALL.iter().zip(shadows.iter_mut()) {
        let names = shadow.encoder.names(m.name());
        for (t, name) in shadow.encoder.trainables_mut().into_iter().zip(&names) {
            *t = entries
                .get(name)
                .ok_or_else(|| CmcError::Archive {
                    field: format!("ema.{name}"),
                    detail: "missing tensor".into(),
                })?
                .clone();
        }
        if let Some(bn) = &mut shadow.encoder.batchnorm {
            bn.running_mean = entries[&format!("{}.bn.running_mean", m.name())].clone();
            bn.running_var = entries[&format!("{}.bn.running_var", m.name())].clone();
        }
        let cls_prefix = format!("{}.classifier", m.name());
        let names = shadow.classifier.names(&cls_prefix);
        for (t, name) in shadow.classifier.trainables_mut().into_iter().zip(&names) {
            *t = entries
                .get(name)
                .ok_or_else(|| CmcError::Archive {
                    field: format!("ema.{name}"),
                    detail: "missing tensor".into(),
                })?
                .clone();
        }
    }
    Ok(shadows)
}
