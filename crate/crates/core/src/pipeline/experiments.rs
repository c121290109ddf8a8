//! Experiment drivers: parameter sweeps, the consistency-ratio experiment,
//! and the bounded grid-search helper.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{split_msc_msi, synth_generate, Dataset};
use crate::error::{CmcError, Result};
use crate::pipeline::artifact::MetricsJson;
use crate::pipeline::config::{RunConfig, VariantTag};
use crate::pipeline::trainer::run_two_stage;
use crate::rng::{seeded, shuffle, sub_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Tau,
    TauC,
    Dropout,
    LearningRate,
    SharedDim,
    Layers,
    Heads,
    Rho,
    RetentionRate,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "tau" => SweepParam::Tau,
            "tau_c" => SweepParam::TauC,
            "dropout" => SweepParam::Dropout,
            "lr" | "learning_rate" => SweepParam::LearningRate,
            "d" | "shared_dim" => SweepParam::SharedDim,
            "layers" => SweepParam::Layers,
            "heads" => SweepParam::Heads,
            "rho" => SweepParam::Rho,
            "retention_rate" => SweepParam::RetentionRate,
            other => return Err(CmcError::Config(format!("unknown sweep parameter `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::TauC => "tau_c",
            SweepParam::Dropout => "dropout",
            SweepParam::LearningRate => "learning_rate",
            SweepParam::SharedDim => "shared_dim",
            SweepParam::Layers => "layers",
            SweepParam::Heads => "heads",
            SweepParam::Rho => "rho",
            SweepParam::RetentionRate => "retention_rate",
        }
    }
}

fn apply_param(cfg: &mut RunConfig, param: SweepParam, value: f64) -> Result<()> {
    match param {
        SweepParam::Tau => cfg.tau = value,
        SweepParam::TauC => cfg.tau_c = value,
        SweepParam::Dropout => cfg.output_dropout = value,
        SweepParam::LearningRate => cfg.learning_rate = value,
        SweepParam::SharedDim => cfg.shared_dim = value as usize,
        SweepParam::Layers => {
            let layers = value as usize;
            cfg.text.transformer_layers = layers;
            cfg.audio.transformer_layers = layers;
            cfg.vision.transformer_layers = layers;
        }
        SweepParam::Heads => {
            let heads = value as usize;
            cfg.text.attention_heads = heads;
            cfg.audio.attention_heads = heads;
            cfg.vision.attention_heads = heads;
        }
        SweepParam::Rho | SweepParam::RetentionRate => {
            // handled at the dataset level
        }
    }
    cfg.validate()
}

/// Training-set subsample for a retention rate: every msi training sample
/// plus a seeded `rate` fraction of the msc training samples. Validation and
/// test splits are untouched.
pub fn retention_dataset(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(CmcError::Domain(format!("retention rate {rate} outside [0,1]")));
    }
    let (msc, _) = split_msc_msi(&dataset.labels)?;
    let msc: std::collections::BTreeSet<usize> = msc.into_iter().collect();
    let mut msc_train: Vec<usize> =
        dataset.splits.train.iter().copied().filter(|i| msc.contains(i)).collect();
    let msi_train: Vec<usize> =
        dataset.splits.train.iter().copied().filter(|i| !msc.contains(i)).collect();
    let mut rng = seeded(sub_seed(seed, "retention"));
    shuffle(&mut rng, &mut msc_train);
    let keep = ((msc_train.len() as f64) * rate).round() as usize;
    let mut train = msi_train;
    train.extend_from_slice(&msc_train[..keep.min(msc_train.len())]);
    train.sort_unstable();
    let mut out = dataset.clone();
    out.splits.train = train;
    Ok(out)
}

/// One row per swept value: per-split accuracy/F1 in wide columns (empty when
/// the archive cannot provide the split).
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub variant: String,
    pub test_acc2: Option<f64>,
    pub test_f1: Option<f64>,
    pub msc_acc2: Option<f64>,
    pub msc_f1: Option<f64>,
    pub msi_acc2: Option<f64>,
    pub msi_f1: Option<f64>,
}

impl SweepRow {
    pub fn split_acc2(&self, split: &str) -> Option<f64> {
        match split {
            "test" => self.test_acc2,
            "msc" => self.msc_acc2,
            "msi" => self.msi_acc2,
            _ => None,
        }
    }
}

fn metrics_row(param: SweepParam, value: f64, variant: VariantTag, metrics: &MetricsJson) -> SweepRow {
    let get = |split: &str| {
        metrics
            .get(split)
            .map(|r| (r.acc2, r.f1))
            .unwrap_or((None, None))
    };
    let (test_acc2, test_f1) = get("test");
    let (msc_acc2, msc_f1) = get("msc");
    let (msi_acc2, msi_f1) = get("msi");
    SweepRow {
        param: param.name().to_string(),
        value,
        variant: variant.name().to_string(),
        test_acc2,
        test_f1,
        msc_acc2,
        msc_f1,
        msi_acc2,
        msi_f1,
    }
}

fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope and intercept of y over x.
pub fn least_squares(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let var: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    if var == 0.0 {
        return None;
    }
    let cov: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = cov / var;
    Some((slope, mean_y - slope * mean_x))
}

#[derive(Clone, Debug, Serialize)]
pub struct SlopeRow {
    pub variant: String,
    pub split: String,
    pub slope: f64,
    pub intercept: f64,
}

fn slopes_from_rows(rows: &[SweepRow]) -> Vec<SlopeRow> {
    let mut variants: Vec<String> = rows.iter().map(|r| r.variant.clone()).collect();
    variants.sort();
    variants.dedup();
    let mut out = Vec::new();
    for variant in variants {
        for split in ["test", "msc", "msi"] {
            let points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.variant == variant)
                .filter_map(|r| r.split_acc2(split).map(|a| (r.value, a)))
                .collect();
            if let Some((slope, intercept)) = least_squares(&points) {
                out.push(SlopeRow {
                    variant: variant.clone(),
                    split: split.to_string(),
                    slope,
                    intercept,
                });
            }
        }
    }
    out
}

fn run_dir_name(param: SweepParam, raw: &str) -> String {
    format!("{}_{}", param.name(), raw.replace(['.', '/'], "_"))
}

/// One full two-stage run per value; metrics aggregated into `sweep.csv`
/// (plus `slopes.csv` for retention sweeps).
pub fn sweep(
    cfg: &RunConfig,
    dataset: &Dataset,
    param: SweepParam,
    values: &[String],
    out_dir: &Path,
) -> Result<PathBuf> {
    if values.is_empty() {
        return Err(CmcError::Config("sweep needs at least one value".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for raw in values {
        let value: f64 = raw
            .parse()
            .map_err(|_| CmcError::Config(format!("sweep value `{raw}` is not numeric")))?;
        let mut run_cfg = cfg.clone();
        apply_param(&mut run_cfg, param, value)?;
        let run_dir = out_dir.join(run_dir_name(param, raw));

        let metrics = match param {
            SweepParam::Rho => {
                let synth = dataset.manifest.synth.as_ref().ok_or_else(|| {
                    CmcError::Config(
                        "rho sweep needs a generated archive (manifest carries no generator settings)"
                            .into(),
                    )
                })?;
                let mut synth_cfg = synth.clone();
                synth_cfg.rho = value;
                if !(0.0..=1.0).contains(&value) {
                    return Err(CmcError::Domain(format!("rho {value} outside [0,1]")));
                }
                let regenerated = synth_generate(&synth_cfg)?;
                run_two_stage(&run_cfg, &regenerated, &run_dir)?;
                crate::pipeline::artifact::read_metrics(&run_dir.join("metrics.json"))?
            }
            SweepParam::RetentionRate => {
                let retained = retention_dataset(dataset, value, run_cfg.seed)?;
                run_two_stage(&run_cfg, &retained, &run_dir)?;
                crate::pipeline::artifact::read_metrics(&run_dir.join("metrics.json"))?
            }
            _ => {
                run_two_stage(&run_cfg, dataset, &run_dir)?;
                crate::pipeline::artifact::read_metrics(&run_dir.join("metrics.json"))?
            }
        };
        rows.push(metrics_row(param, value, run_cfg.variant, &metrics));
    }
    let csv_path = out_dir.join("sweep.csv");
    write_rows(&csv_path, &rows)?;
    if param == SweepParam::RetentionRate {
        let slopes = slopes_from_rows(&rows);
        let mut w = csv::Writer::from_path(out_dir.join("slopes.csv"))?;
        for s in &slopes {
            w.serialize(s)?;
        }
        w.flush()?;
    }
    Ok(csv_path)
}

/// Retention-rate curves for the configured variant and the ground-truth
/// label variant side by side, with least-squares slopes per curve.
pub fn consistency_ratio_experiment(
    cfg: &RunConfig,
    dataset: &Dataset,
    rates: &[f64],
    out_dir: &Path,
) -> Result<PathBuf> {
    if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(CmcError::Domain("retention rates must lie in [0,1]".into()));
    }
    if !dataset.has_unimodal_scores() {
        return Err(CmcError::Config(
            "consistency-ratio experiment needs unimodal scores".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let variants = if cfg.variant == VariantTag::GtLabels {
        vec![VariantTag::GtLabels]
    } else {
        vec![cfg.variant, VariantTag::GtLabels]
    };
    let mut rows = Vec::new();
    for variant in variants {
        for &rate in rates {
            let mut run_cfg = cfg.clone();
            run_cfg.variant = variant;
            let retained = retention_dataset(dataset, rate, run_cfg.seed)?;
            let run_dir = out_dir.join(format!(
                "{}_rate_{}",
                variant.name(),
                format!("{rate}").replace('.', "_")
            ));
            run_two_stage(&run_cfg, &retained, &run_dir)?;
            let metrics = crate::pipeline::artifact::read_metrics(&run_dir.join("metrics.json"))?;
            rows.push(metrics_row(SweepParam::RetentionRate, rate, variant, &metrics));
        }
    }
    let curves = out_dir.join("curves.csv");
    write_rows(&curves, &rows)?;
    let slopes = slopes_from_rows(&rows);
    let mut w = csv::Writer::from_path(out_dir.join("slopes.csv"))?;
    for s in &slopes {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(curves)
}

// ── Grid search ──────────────────────────────────────────────────────

/// The bounded hyperparameter search space.
#[derive(Clone, Debug)]
pub struct GridSpace {
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub dropout: Vec<f64>,
}

impl GridSpace {
    pub fn full() -> Self {
        GridSpace {
            layers: vec![1, 2, 3, 4, 5],
            heads: vec![1, 2, 4, 8],
            dropout: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }

    fn validate(&self) -> Result<()> {
        let full = GridSpace::full();
        if self.layers.iter().any(|l| !full.layers.contains(l))
            || self.heads.iter().any(|h| !full.heads.contains(h))
            || self
                .dropout
                .iter()
                .any(|d| !full.dropout.iter().any(|fd| (fd - d).abs() < 1e-12))
        {
            return Err(CmcError::Config(
                "grid values outside the supported search space".into(),
            ));
        }
        if self.layers.is_empty() || self.heads.is_empty() || self.dropout.is_empty() {
            return Err(CmcError::Config("grid space must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GridRow {
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub val_acc2: Option<f64>,
    pub test_acc2: Option<f64>,
}

/// Exhaustive search over the bounded space, selecting on validation
/// accuracy. Writes `grid.csv` and returns the best row.
pub fn grid_search(
    cfg: &RunConfig,
    dataset: &Dataset,
    space: &GridSpace,
    out_dir: &Path,
) -> Result<GridRow> {
    space.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rows: Vec<GridRow> = Vec::new();
    for &layers in &space.layers {
        for &heads in &space.heads {
            if cfg.shared_dim % heads != 0 {
                continue;
            }
            for &dropout in &space.dropout {
                let mut run_cfg = cfg.clone();
                for section in [&mut run_cfg.text, &mut run_cfg.audio, &mut run_cfg.vision] {
                    section.transformer_layers = layers;
                    section.attention_heads = heads;
                }
                run_cfg.output_dropout = dropout;
                run_cfg.validate()?;
                let run_dir = out_dir.join(format!(
                    "l{layers}_h{heads}_d{}",
                    format!("{dropout}").replace('.', "_")
                ));
                run_two_stage(&run_cfg, dataset, &run_dir)?;
                let val_preds = crate::pipeline::trainer::run_split_predictions(
                    &run_dir,
                    dataset,
                    &dataset.splits.validation,
                )?;
                let val_scores: Vec<f64> = dataset
                    .splits
                    .validation
                    .iter()
                    .map(|&i| dataset.labels[i].m_score)
                    .collect();
                let val_acc2 = if val_preds.is_empty() {
                    None
                } else {
                    Some(crate::metrics::acc2(&val_preds, &val_scores, run_cfg.binary_mode)?.0)
                };
                let metrics =
                    crate::pipeline::artifact::read_metrics(&run_dir.join("metrics.json"))?;
                rows.push(GridRow {
                    layers,
                    heads,
                    dropout,
                    val_acc2,
                    test_acc2: metrics.get("test").and_then(|r| r.acc2),
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(CmcError::Config("no grid point is compatible with shared_dim".into()));
    }
    let mut w = csv::Writer::from_path(out_dir.join("grid.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let best = rows
        .into_iter()
        .max_by(|a, b| {
            a.val_acc2
                .unwrap_or(f64::NEG_INFINITY)
                .total_cmp(&b.val_acc2.unwrap_or(f64::NEG_INFINITY))
        })
        .expect("non-empty rows");
    Ok(best)
}
