//! Run artifact layout and exports: metrics.json, losses.csv,
//! label_history.csv, router_weights.csv, config snapshot, run metadata.
//! Nothing written here carries timestamps; identical runs rewrite identical
//! bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CmcError, Result};
use crate::losses::LossBundle;
use crate::metrics::SplitReport;
use crate::modality::Modality;
use crate::pipeline::config::{RunConfig, VariantTag};
use crate::plgm::LabelStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub kind: RunKind,
    pub variant: VariantTag,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1: Option<String>,
}

pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths { root: root.to_path_buf() }
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot.json")
    }

    pub fn run_meta(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn unimodal_metrics(&self) -> PathBuf {
        self.root.join("unimodal_metrics.json")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn label_history(&self) -> PathBuf {
        self.root.join("label_history.csv")
    }

    pub fn router_weights(&self) -> PathBuf {
        self.root.join("router_weights.csv")
    }

    pub fn labels_store(&self) -> PathBuf {
        self.root.join("labels.json")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        std::fs::write(self.config_snapshot(), serde_json::to_string_pretty(cfg)?)?;
        Ok(())
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        RunConfig::from_file(&self.config_snapshot())
    }

    pub fn write_meta(&self, meta: &RunMeta) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        std::fs::write(self.run_meta(), serde_json::to_string_pretty(meta)?)?;
        Ok(())
    }

    pub fn read_meta(&self) -> Result<RunMeta> {
        let text = std::fs::read_to_string(self.run_meta()).map_err(|e| CmcError::Archive {
            field: "run.json".into(),
            detail: format!("{}: {e}", self.run_meta().display()),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_labels(&self, store: &LabelStore) -> Result<()> {
        std::fs::write(self.labels_store(), serde_json::to_string(store)?)?;
        Ok(())
    }

    pub fn read_labels(&self) -> Result<LabelStore> {
        let text = std::fs::read_to_string(self.labels_store()).map_err(|e| CmcError::Archive {
            field: "labels.json".into(),
            detail: e.to_string(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Ordered split -> report map; serializes with stable key order.
pub type MetricsJson = BTreeMap<String, SplitReport>;

pub fn write_metrics(path: &Path, metrics: &MetricsJson) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(metrics)?)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<MetricsJson> {
    let text = std::fs::read_to_string(path).map_err(|e| CmcError::Archive {
        field: "metrics.json".into(),
        detail: format!("{}: {e}", path.display()),
    })?;
    Ok(serde_json::from_str(&text)?)
}

// ── Incremental CSV writers ──────────────────────────────────────────

/// Per-step loss log: (step, epoch, stage, term..., total).
pub struct LossLog {
    writer: csv::Writer<std::fs::File>,
    term_names: Option<Vec<String>>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let writer = csv::Writer::from_path(path)?;
        Ok(LossLog { writer, term_names: None })
    }

    pub fn record(&mut self, step: u64, epoch: usize, stage: u8, bundle: &LossBundle) -> Result<()> {
        if self.term_names.is_none() {
            let names: Vec<String> = bundle.terms.iter().map(|(n, _)| n.clone()).collect();
            let mut header = vec!["step".to_string(), "epoch".into(), "stage".into()];
            header.extend(names.iter().cloned());
            header.push("total".into());
            self.writer.write_record(&header)?;
            self.term_names = Some(names);
        }
        let mut record = vec![step.to_string(), epoch.to_string(), stage.to_string()];
        for (name, value) in &bundle.terms {
            debug_assert!(self.term_names.as_ref().unwrap().contains(name));
            record.push(value.to_string());
        }
        record.push(bundle.total.to_string());
        self.writer.write_record(&record)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Label-history export: (epoch, sample_id, modality, soft_0.., hard, alpha).
pub struct LabelHistory {
    writer: csv::Writer<std::fs::File>,
    classes: usize,
    wrote_header: bool,
}

impl LabelHistory {
    pub fn create(path: &Path, classes: usize) -> Result<Self> {
        Ok(LabelHistory { writer: csv::Writer::from_path(path)?, classes, wrote_header: false })
    }

    pub fn record(
        &mut self,
        epoch: usize,
        sample_id: &str,
        modality: Modality,
        soft: &[f64],
        hard: usize,
        alpha: f64,
    ) -> Result<()> {
        if !self.wrote_header {
            let mut header = vec!["epoch".to_string(), "sample_id".into(), "modality".into()];
            for c in 0..self.classes {
                header.push(format!("soft_{c}"));
            }
            header.push("hard".into());
            header.push("alpha".into());
            self.writer.write_record(&header)?;
            self.wrote_header = true;
        }
        let mut record = vec![epoch.to_string(), sample_id.to_string(), modality.name().to_string()];
        for v in soft {
            record.push(v.to_string());
        }
        record.push(hard.to_string());
        record.push(alpha.to_string());
        self.writer.write_record(&record)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Router-weight export for one split: per-sample weights, per-modality
/// predicted class and the fused class.
pub fn write_router_weights(
    path: &Path,
    rows: &[(String, [f64; 3], [usize; 3], usize)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sample_id", "w_t", "w_a", "w_v", "pred_text", "pred_audio", "pred_vision", "pred_fused",
    ])?;
    for (id, weights, preds, fused) in rows {
        w.write_record([
            id.clone(),
            weights[0].to_string(),
            weights[1].to_string(),
            weights[2].to_string(),
            preds[0].to_string(),
            preds[1].to_string(),
            preds[2].to_string(),
            fused.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Deserialize)]
pub struct RouterWeightRow {
    pub sample_id: String,
    pub w_t: f64,
    pub w_a: f64,
    pub w_v: f64,
    pub pred_text: usize,
    pub pred_audio: usize,
    pub pred_vision: usize,
    pub pred_fused: usize,
}

pub fn read_router_weights(path: &Path) -> Result<Vec<RouterWeightRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CmcError::Archive {
        field: "router_weights.csv".into(),
        detail: format!("{}: {e}", path.display()),
    })?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn router_weight_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("router_weights.csv");
        let rows = vec![
            ("s1".to_string(), [0.5, 0.25, 0.25], [0usize, 1, 2], 0usize),
            ("s2".to_string(), [1.0 / 3.0; 3], [2, 2, 2], 2),
        ];
        write_router_weights(&path, &rows).unwrap();
        let back = read_router_weights(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].sample_id, "s1");
        assert_eq!(back[0].pred_fused, 0);
        assert!((back[1].w_t - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn loss_log_emits_header_from_first_bundle() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("losses.csv");
        let mut log = LossLog::create(&path).unwrap();
        let bundle = LossBundle {
            terms: vec![("task_text".into(), 1.5), ("supcon".into(), 0.25)],
            total: 1.75,
            supcon_no_positives: false,
        };
        log.record(0, 1, 1, &bundle).unwrap();
        log.record(1, 1, 1, &bundle).unwrap();
        log.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,epoch,stage,task_text,supcon,total");
        assert_eq!(lines.count(), 2);
    }
}
