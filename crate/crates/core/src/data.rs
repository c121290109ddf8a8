//! Feature archives: manifest + raw binary payloads + labels CSV, plus the
//! msc/msi split rule and a synthetic conflicting-modality generator.
//!
//! Archive layout (bit-exact):
//! - `manifest.json` — dataset name, sample count, modality descriptors,
//!   payload row order (`ids`), split id lists, labels file name.
//! - one payload file per modality: 32-bit little-endian reals, row-major
//!   `[N, l_k, d_k]`, no header.
//! - `labels.csv` with header `sample_id,m_score,t_score,a_score,v_score`;
//!   unimodal columns may be empty.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{CmcError, Result};
use crate::modality::Modality;
use crate::rng::{normal_draw, seeded, shuffle, SeededRng};

// ── Manifest ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModalityDescriptor {
    pub name: String,
    pub seq_len: usize,
    pub dim: usize,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub n: usize,
    pub modalities: Vec<ModalityDescriptor>,
    /// Payload row order.
    pub ids: Vec<String>,
    pub splits: SplitLists,
    pub labels_file: String,
    /// Present on generated archives: the generator settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub sample_id: String,
    pub m_score: f64,
    pub t_score: Option<f64>,
    pub a_score: Option<f64>,
    pub v_score: Option<f64>,
}

impl LabelRow {
    pub fn unimodal(&self, m: Modality) -> Option<f64> {
        match m {
            Modality::Text => self.t_score,
            Modality::Audio => self.a_score,
            Modality::Vision => self.v_score,
        }
    }

    pub fn has_unimodal(&self) -> bool {
        self.t_score.is_some() && self.a_score.is_some() && self.v_score.is_some()
    }
}

// ── In-memory dataset ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LoadedModality {
    pub modality: Modality,
    pub seq_len: usize,
    pub dim: usize,
    /// Row-major `[N, l, d]`.
    pub data: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub modalities: Vec<LoadedModality>,
    /// Aligned with `manifest.ids`.
    pub labels: Vec<LabelRow>,
    pub splits: SplitIndices,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.manifest.n
    }

    pub fn modality(&self, m: Modality) -> Option<&LoadedModality> {
        self.modalities.iter().find(|lm| lm.modality == m)
    }

    pub fn require_modality(&self, m: Modality) -> Result<&LoadedModality> {
        self.modality(m).ok_or_else(|| CmcError::Archive {
            field: format!("modalities.{m}"),
            detail: "modality missing from archive".into(),
        })
    }

    pub fn has_unimodal_scores(&self) -> bool {
        self.labels.iter().all(LabelRow::has_unimodal)
    }

    /// Gather `[l, B, d_k]` for the given sample indices.
    pub fn batch(&self, m: Modality, indices: &[usize]) -> Result<Tensor<f32>> {
        let lm = self.require_modality(m)?;
        let (l, d) = (lm.seq_len, lm.dim);
        let b = indices.len();
        let mut out = vec![0f32; l * b * d];
        for (bi, &idx) in indices.iter().enumerate() {
            for t in 0..l {
                let src = (idx * l + t) * d;
                let dst = (t * b + bi) * d;
                out[dst..dst + d].copy_from_slice(&lm.data[src..src + d]);
            }
        }
        Tensor::new(vec![l, b, d], out)
    }

    pub fn id(&self, index: usize) -> &str {
        &self.manifest.ids[index]
    }
}

// ── Discretization & splits ──────────────────────────────────────────

/// Sign rule: negative scores to class 0, zero to 1, positive to 2.
pub fn discretize(score: f64) -> Result<usize> {
    if score.is_nan() {
        return Err(CmcError::Domain("cannot discretize NaN score".into()));
    }
    Ok(if score < 0.0 {
        0
    } else if score == 0.0 {
        1
    } else {
        2
    })
}

/// Number of classes produced by `discretize`.
pub const DISCRETIZE_CLASSES: usize = 3;

/// Partition label rows into modality-semantics-consistent (all four scores
/// share a sign class) and inconsistent indices. Requires unimodal scores.
pub fn split_msc_msi(rows: &[LabelRow]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut msc = Vec::new();
    let mut msi = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let (t, a, v) = match (row.t_score, row.a_score, row.v_score) {
            (Some(t), Some(a), Some(v)) => (t, a, v),
            _ => {
                return Err(CmcError::Config(format!(
                    "sample {} lacks unimodal scores; msc/msi split unsupported",
                    row.sample_id
                )))
            }
        };
        let m_class = discretize(row.m_score)?;
        let consistent = [t, a, v]
            .into_iter()
            .map(discretize)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .all(|c| c == m_class);
        if consistent {
            msc.push(i);
        } else {
            msi.push(i);
        }
    }
    Ok((msc, msi))
}

// ── Archive IO ───────────────────────────────────────────────────────

pub fn load_archive(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = std::fs::read_to_string(&manifest_path).map_err(|e| CmcError::Archive {
        field: "manifest".into(),
        detail: format!("{}: {e}", manifest_path.display()),
    })?;
    let manifest: Manifest = serde_json::from_str(&manifest_text).map_err(|e| CmcError::Archive {
        field: "manifest".into(),
        detail: e.to_string(),
    })?;

    if manifest.ids.len() != manifest.n {
        return Err(CmcError::Archive {
            field: "ids".into(),
            detail: format!("{} ids for n = {}", manifest.ids.len(), manifest.n),
        });
    }
    let mut seen = BTreeMap::new();
    for (i, id) in manifest.ids.iter().enumerate() {
        if seen.insert(id.clone(), i).is_some() {
            return Err(CmcError::Archive {
                field: "ids".into(),
                detail: format!("duplicate id `{id}`"),
            });
        }
    }

    // every id in exactly one split
    let mut split_membership: BTreeMap<&str, usize> = BTreeMap::new();
    for (name, ids) in [
        ("train", &manifest.splits.train),
        ("validation", &manifest.splits.validation),
        ("test", &manifest.splits.test),
    ] {
        for id in ids {
            if !seen.contains_key(id) {
                return Err(CmcError::Archive {
                    field: format!("splits.{name}"),
                    detail: format!("unknown id `{id}`"),
                });
            }
            *split_membership.entry(id.as_str()).or_insert(0) += 1;
        }
    }
    for id in &manifest.ids {
        match split_membership.get(id.as_str()) {
            Some(1) => {}
            Some(k) => {
                return Err(CmcError::Archive {
                    field: "splits".into(),
                    detail: format!("id `{id}` appears in {k} splits"),
                })
            }
            None => {
                return Err(CmcError::Archive {
                    field: "splits".into(),
                    detail: format!("id `{id}` missing from all splits"),
                })
            }
        }
    }

    let mut modalities = Vec::new();
    for (i, desc) in manifest.modalities.iter().enumerate() {
        let modality = Modality::from_name(&desc.name).ok_or_else(|| CmcError::Archive {
            field: format!("modalities[{i}].name"),
            detail: format!("unknown modality `{}`", desc.name),
        })?;
        if modalities.iter().any(|lm: &LoadedModality| lm.modality == modality) {
            return Err(CmcError::Archive {
                field: format!("modalities[{i}].name"),
                detail: format!("duplicate modality `{}`", desc.name),
            });
        }
        let path = dir.join(&desc.file);
        let mut bytes = Vec::new();
        std::fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CmcError::Archive {
                field: format!("modalities[{i}].file"),
                detail: format!("{}: {e}", path.display()),
            })?;
        let expected = manifest.n * desc.seq_len * desc.dim * 4;
        if bytes.len() != expected {
            return Err(CmcError::Archive {
                field: format!("modalities[{i}].file"),
                detail: format!("payload is {} bytes, expected {expected}", bytes.len()),
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        modalities.push(LoadedModality { modality, seq_len: desc.seq_len, dim: desc.dim, data });
    }

    let labels = read_labels(&dir.join(&manifest.labels_file), &manifest.ids)?;

    let index_of = |id: &String| -> usize { seen[id] };
    let splits = SplitIndices {
        train: manifest.splits.train.iter().map(index_of).collect(),
        validation: manifest.splits.validation.iter().map(index_of).collect(),
        test: manifest.splits.test.iter().map(index_of).collect(),
    };

    Ok(Dataset { manifest, modalities, labels, splits })
}

fn read_labels(path: &Path, ids: &[String]) -> Result<Vec<LabelRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CmcError::Archive {
        field: "labels_file".into(),
        detail: format!("{}: {e}", path.display()),
    })?;
    let mut by_id: BTreeMap<String, LabelRow> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let get_opt = |i: usize| -> Result<Option<f64>> {
            match record.get(i).unwrap_or("") {
                "" => Ok(None),
                s => s.parse::<f64>().map(Some).map_err(|e| CmcError::Archive {
                    field: "labels_file".into(),
                    detail: format!("bad score `{s}`: {e}"),
                }),
            }
        };
        let sample_id = record.get(0).unwrap_or("").to_string();
        let m_score = get_opt(1)?.ok_or_else(|| CmcError::Archive {
            field: "labels_file".into(),
            detail: format!("missing m_score for `{sample_id}`"),
        })?;
        let row = LabelRow {
            sample_id: sample_id.clone(),
            m_score,
            t_score: get_opt(2)?,
            a_score: get_opt(3)?,
            v_score: get_opt(4)?,
        };
        if by_id.insert(sample_id.clone(), row).is_some() {
            return Err(CmcError::Archive {
                field: "labels_file".into(),
                detail: format!("duplicate label row for `{sample_id}`"),
            });
        }
    }
    ids.iter()
        .map(|id| {
            by_id.remove(id).ok_or_else(|| CmcError::Archive {
                field: "labels_file".into(),
                detail: format!("no label row for `{id}`"),
            })
        })
        .collect()
}

pub fn write_archive(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if dataset.modalities.len() != dataset.manifest.modalities.len() {
        return Err(CmcError::Archive {
            field: "modalities".into(),
            detail: "manifest descriptors out of sync with loaded payloads".into(),
        });
    }
    for (lm, desc) in dataset.modalities.iter().zip(&dataset.manifest.modalities) {
        let mut f = std::fs::File::create(dir.join(&desc.file))?;
        let mut bytes = Vec::with_capacity(lm.data.len() * 4);
        for v in &lm.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
    }
    let mut w = csv::Writer::from_path(dir.join(&dataset.manifest.labels_file))?;
    w.write_record(["sample_id", "m_score", "t_score", "a_score", "v_score"])?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &dataset.labels {
        w.write_record([
            row.sample_id.clone(),
            row.m_score.to_string(),
            fmt(row.t_score),
            fmt(row.a_score),
            fmt(row.v_score),
        ])?;
    }
    w.flush()?;
    let manifest_json = serde_json::to_string_pretty(&dataset.manifest)?;
    std::fs::write(dir.join("manifest.json"), manifest_json)?;
    Ok(())
}

// ── Synthetic generator ──────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthModality {
    pub seq_len: usize,
    pub dim: usize,
    /// Scale of the class-mean offset along each class's axis.
    pub class_separation: f64,
    /// Additive Gaussian noise scale.
    pub noise: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    /// Probability that a sample's modalities all agree (msc).
    pub rho: f64,
    pub seed: u64,
    /// When set, the disagreeing modality of every msi sample is text with
    /// its sign flipped.
    pub text_dominance_conflict: bool,
    /// Multimodal class prior (Neg, Neu, Pos); neutral is under-represented
    /// by default, as in real sentiment corpora.
    #[serde(default = "default_class_prior")]
    pub class_prior: [f64; 3],
    /// Per-sample probability that an audio or vision recording is degraded
    /// (its noise scaled by `degraded_noise_factor`), independently per
    /// modality. Emulates variable per-clip feature quality.
    #[serde(default = "default_degraded_fraction")]
    pub degraded_fraction: f64,
    #[serde(default = "default_degraded_noise_factor")]
    pub degraded_noise_factor: f64,
    pub text: SynthModality,
    pub audio: SynthModality,
    pub vision: SynthModality,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

fn default_class_prior() -> [f64; 3] {
    [0.4, 0.2, 0.4]
}

fn default_degraded_fraction() -> f64 {
    0.25
}

fn default_degraded_noise_factor() -> f64 {
    3.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        // Separations calibrated so a nearest-centroid probe on pooled
        // features reaches ~0.9 accuracy on text and ~0.7 on audio/vision.
        SynthConfig {
            n: 2000,
            rho: 0.6,
            seed: 1111,
            text_dominance_conflict: false,
            class_prior: default_class_prior(),
            degraded_fraction: default_degraded_fraction(),
            degraded_noise_factor: default_degraded_noise_factor(),
            text: SynthModality { seq_len: 12, dim: 32, class_separation: 0.72, noise: 1.0 },
            audio: SynthModality { seq_len: 20, dim: 16, class_separation: 0.33, noise: 1.0 },
            vision: SynthModality { seq_len: 16, dim: 20, class_separation: 0.37, noise: 1.0 },
            train_fraction: 0.6,
            validation_fraction: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn modality(&self, m: Modality) -> &SynthModality {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Vision => &self.vision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(CmcError::Domain(format!("rho {} outside [0,1]", self.rho)));
        }
        if self.n == 0 {
            return Err(CmcError::Domain("n must be positive".into()));
        }
        for m in Modality::ALL {
            let sm = self.modality(m);
            if sm.noise <= 0.0 {
                return Err(CmcError::Domain(format!("{m} noise must be > 0")));
            }
            if sm.seq_len == 0 || sm.dim < DISCRETIZE_CLASSES {
                return Err(CmcError::Domain(format!(
                    "{m} needs seq_len > 0 and dim >= {DISCRETIZE_CLASSES}"
                )));
            }
        }
        let f = self.train_fraction + self.validation_fraction;
        if !(0.0..1.0).contains(&f) || self.train_fraction <= 0.0 {
            return Err(CmcError::Domain("split fractions must leave room for a test set".into()));
        }
        let prior_sum: f64 = self.class_prior.iter().sum();
        if self.class_prior.iter().any(|&p| p < 0.0) || (prior_sum - 1.0).abs() > 1e-9 {
            return Err(CmcError::Domain(format!(
                "class prior {:?} must be a distribution",
                self.class_prior
            )));
        }
        if !(0.0..=1.0).contains(&self.degraded_fraction) || self.degraded_noise_factor < 1.0 {
            return Err(CmcError::Domain(
                "degraded_fraction must lie in [0,1] and degraded_noise_factor >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn draw_class(prior: &[f64; 3], rng: &mut SeededRng) -> usize {
    use rand::Rng;
    let u: f64 = rng.random();
    if u < prior[0] {
        0
    } else if u < prior[0] + prior[1] {
        1
    } else {
        2
    }
}

fn flip_class(class: usize) -> usize {
    match class {
        0 => 2,
        2 => 0,
        other => other,
    }
}

fn score_for_class(class: usize, rng: &mut SeededRng) -> f64 {
    use rand::Rng;
    match class {
        0 => -(rng.random::<f64>() * 0.8 + 0.2),
        2 => rng.random::<f64>() * 0.8 + 0.2,
        _ => 0.0,
    }
}

/// Generate a class-conditional Gaussian archive. Per sample the multimodal
/// class is drawn, then with probability `rho` every modality agrees with it;
/// otherwise one modality disagrees (text with flipped sign in conflict
/// mode). Deterministic under `seed`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    use rand::Rng;
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let n = cfg.n;

    // conflict samples flip a sign, so their multimodal class is never
    // neutral; renormalize the prior over the two signed classes
    let signed_prior = {
        let z = cfg.class_prior[0] + cfg.class_prior[2];
        [cfg.class_prior[0] / z, 0.0, cfg.class_prior[2] / z]
    };
    let mut classes: Vec<[usize; 3]> = Vec::with_capacity(n); // per-modality class
    let mut labels: Vec<LabelRow> = Vec::with_capacity(n);
    for i in 0..n {
        let consistent = rng.random::<f64>() < cfg.rho;
        let (m_class, row_classes) = if consistent {
            let c = draw_class(&cfg.class_prior, &mut rng);
            (c, [c, c, c])
        } else if cfg.text_dominance_conflict {
            let c = draw_class(&signed_prior, &mut rng);
            (c, [flip_class(c), c, c])
        } else {
            let c = draw_class(&cfg.class_prior, &mut rng);
            let differing = rng.random_range(0..3usize);
            let mut other = rng.random_range(0..2usize);
            if other >= c {
                other += 1; // uniform over the two classes != c
            }
            let mut rc = [c, c, c];
            rc[differing] = other;
            (c, rc)
        };
        let sample_id = format!("s{i:05}");
        labels.push(LabelRow {
            sample_id,
            m_score: score_for_class(m_class, &mut rng),
            t_score: Some(score_for_class(row_classes[0], &mut rng)),
            a_score: Some(score_for_class(row_classes[1], &mut rng)),
            v_score: Some(score_for_class(row_classes[2], &mut rng)),
        });
        classes.push(row_classes);
    }

    // per-sample degraded recordings for the non-text modalities
    let degraded: Vec<[bool; 2]> = (0..n)
        .map(|_| {
            [
                rng.random::<f64>() < cfg.degraded_fraction,
                rng.random::<f64>() < cfg.degraded_fraction,
            ]
        })
        .collect();

    let mut modalities = Vec::new();
    let mut descriptors = Vec::new();
    for m in Modality::ALL {
        let sm = cfg.modality(m);
        let (l, d) = (sm.seq_len, sm.dim);
        let mut data = vec![0f32; n * l * d];
        for (i, row_classes) in classes.iter().enumerate() {
            let class = row_classes[m.index()];
            let noise = match m {
                Modality::Text => sm.noise,
                Modality::Audio if degraded[i][0] => sm.noise * cfg.degraded_noise_factor,
                Modality::Vision if degraded[i][1] => sm.noise * cfg.degraded_noise_factor,
                _ => sm.noise,
            };
            for t in 0..l {
                let base = (i * l + t) * d;
                for j in 0..d {
                    let mean = if j == class { sm.class_separation } else { 0.0 };
                    data[base + j] = (mean + noise * normal_draw(&mut rng)) as f32;
                }
            }
        }
        modalities.push(LoadedModality { modality: m, seq_len: l, dim: d, data });
        descriptors.push(ModalityDescriptor {
            name: m.name().to_string(),
            seq_len: l,
            dim: d,
            file: format!("{}.bin", m.name()),
        });
    }

    let ids: Vec<String> = labels.iter().map(|r| r.sample_id.clone()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut rng, &mut order);
    let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
    let n_val = ((n as f64) * cfg.validation_fraction).round() as usize;
    let id_list = |slice: &[usize]| slice.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    let splits = SplitLists {
        train: id_list(&order[..n_train]),
        validation: id_list(&order[n_train..n_train + n_val]),
        test: id_list(&order[n_train + n_val..]),
    };
    let split_indices = SplitIndices {
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };

    let manifest = Manifest {
        dataset: "synth".into(),
        n,
        modalities: descriptors,
        ids,
        splits,
        labels_file: "labels.csv".into(),
        synth: Some(cfg.clone()),
    };

    Ok(Dataset { manifest, modalities, labels, splits: split_indices })
}

/// Nearest-centroid probe on temporally pooled features: fits per-class
/// centroids on the train split and reports test accuracy against the
/// modality's own discretized score. Linear decision boundaries make this a
/// proxy for unimodal feature quality.
pub fn centroid_probe(dataset: &Dataset, m: Modality) -> Result<f64> {
    let lm = dataset.require_modality(m)?;
    let (l, d) = (lm.seq_len, lm.dim);
    let pooled = |idx: usize| -> Vec<f64> {
        let mut out = vec![0f64; d];
        for t in 0..l {
            let base = (idx * l + t) * d;
            for j in 0..d {
                out[j] += lm.data[base + j] as f64;
            }
        }
        for v in &mut out {
            *v /= l as f64;
        }
        out
    };
    let class_of = |idx: usize| -> Result<usize> {
        let score = dataset.labels[idx].unimodal(m).ok_or_else(|| {
            CmcError::Config(format!("sample {} lacks a {m} score", dataset.labels[idx].sample_id))
        })?;
        discretize(score)
    };

    let mut centroids = vec![vec![0f64; d]; DISCRETIZE_CLASSES];
    let mut counts = vec![0usize; DISCRETIZE_CLASSES];
    for &idx in &dataset.splits.train {
        let c = class_of(idx)?;
        let p = pooled(idx);
        for j in 0..d {
            centroids[c][j] += p[j];
        }
        counts[c] += 1;
    }
    for (c, count) in counts.iter().enumerate() {
        if *count == 0 {
            return Err(CmcError::Domain(format!("class {c} absent from train split")));
        }
        for j in 0..d {
            centroids[c][j] /= *count as f64;
        }
    }

    let mut correct = 0usize;
    for &idx in &dataset.splits.test {
        let p = pooled(idx);
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let dist: f64 = (0..d).map(|j| (p[j] - centroid[j]).powi(2)).sum();
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        if best == class_of(idx)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.splits.test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, m: f64, t: f64, a: f64, v: f64) -> LabelRow {
        LabelRow {
            sample_id: id.into(),
            m_score: m,
            t_score: Some(t),
            a_score: Some(a),
            v_score: Some(v),
        }
    }

    #[test]
    fn discretize_sign_rule() {
        assert_eq!(discretize(0.6).unwrap(), 2);
        assert_eq!(discretize(0.0).unwrap(), 1);
        assert_eq!(discretize(-0.3).unwrap(), 0);
        assert!(discretize(f64::NAN).is_err());
    }

    #[test]
    fn msc_msi_footnote_rule() {
        let rows = vec![
            row("a", 0.4, 0.2, 0.6, 0.8),   // all positive -> msc
            row("b", 0.4, -0.2, 0.6, 0.8),  // sign disagreement -> msi
            row("c", 0.0, 0.0, 0.0, 0.0),   // all zero -> msc
        ];
        let (msc, msi) = split_msc_msi(&rows).unwrap();
        assert_eq!(msc, vec![0, 2]);
        assert_eq!(msi, vec![1]);
    }

    #[test]
    fn msc_msi_requires_unimodal_scores() {
        let rows = vec![LabelRow {
            sample_id: "x".into(),
            m_score: 0.5,
            t_score: None,
            a_score: Some(0.1),
            v_score: Some(0.2),
        }];
        assert!(matches!(split_msc_msi(&rows), Err(CmcError::Config(_))));
    }

    #[test]
    fn split_is_permutation_equivariant() {
        let rows = vec![
            row("a", 0.4, 0.2, 0.6, 0.8),
            row("b", 0.4, -0.2, 0.6, 0.8),
            row("c", -0.1, -0.2, -0.3, -0.4),
            row("d", 0.5, 0.1, -0.1, 0.2),
        ];
        let (msc, msi) = split_msc_msi(&rows).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<LabelRow> = perm.iter().map(|&i| rows[i].clone()).collect();
        let (pmsc, pmsi) = split_msc_msi(&permuted).unwrap();
        let map = |v: Vec<usize>| -> Vec<&str> {
            let mut names: Vec<&str> = v.iter().map(|&i| rows[i].sample_id.as_str()).collect();
            names.sort();
            names
        };
        let pmap = |v: Vec<usize>| -> Vec<&str> {
            let mut names: Vec<&str> =
                v.iter().map(|&i| permuted[i].sample_id.as_str()).collect();
            names.sort();
            names
        };
        assert_eq!(map(msc), pmap(pmsc));
        assert_eq!(map(msi), pmap(pmsi));
    }

    fn minimal_dataset() -> Dataset {
        let manifest = Manifest {
            dataset: "mini".into(),
            n: 2,
            modalities: vec![ModalityDescriptor {
                name: "text".into(),
                seq_len: 4,
                dim: 2,
                file: "text.bin".into(),
            }],
            ids: vec!["s0".into(), "s1".into()],
            splits: SplitLists {
                train: vec!["s0".into()],
                validation: vec![],
                test: vec!["s1".into()],
            },
            labels_file: "labels.csv".into(),
            synth: None,
        };
        Dataset {
            manifest,
            modalities: vec![LoadedModality {
                modality: Modality::Text,
                seq_len: 4,
                dim: 2,
                data: (0..16).map(|v| v as f32 * 0.25).collect(),
            }],
            labels: vec![
                LabelRow { sample_id: "s0".into(), m_score: 0.5, t_score: None, a_score: None, v_score: None },
                LabelRow { sample_id: "s1".into(), m_score: -0.5, t_score: None, a_score: None, v_score: None },
            ],
            splits: SplitIndices { train: vec![0], validation: vec![], test: vec![1] },
        }
    }

    #[test]
    fn minimal_archive_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = minimal_dataset();
        write_archive(&ds, tmp.path()).unwrap();
        let loaded = load_archive(tmp.path()).unwrap();
        assert_eq!(loaded.n(), 2);
        let lm = loaded.require_modality(Modality::Text).unwrap();
        assert_eq!((lm.seq_len, lm.dim), (4, 2));
        assert_eq!(lm.data, ds.modalities[0].data);
        assert_eq!(loaded.labels, ds.labels);

        let batch = loaded.batch(Modality::Text, &[1, 0]).unwrap();
        assert_eq!(batch.shape(), &[4, 2, 2]);
        // sample 1, t = 0 lands in batch slot 0
        assert_eq!(batch.data()[0], ds.modalities[0].data[8]);
    }

    #[test]
    fn truncated_payload_is_a_size_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = minimal_dataset();
        write_archive(&ds, tmp.path()).unwrap();
        let payload = tmp.path().join("text.bin");
        let bytes = std::fs::read(&payload).unwrap();
        std::fs::write(&payload, &bytes[..bytes.len() - 4]).unwrap();
        match load_archive(tmp.path()) {
            Err(CmcError::Archive { field, detail }) => {
                assert!(field.contains("file"), "{field}");
                assert!(detail.contains("expected"), "{detail}");
            }
            other => panic!("expected archive error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_modality_and_duplicate_id_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let mut ds = minimal_dataset();
        ds.manifest.modalities[0].name = "smell".into();
        write_archive(&ds, tmp.path()).unwrap();
        assert!(matches!(load_archive(tmp.path()), Err(CmcError::Archive { .. })));

        let tmp2 = tempfile::tempdir().unwrap();
        let mut ds2 = minimal_dataset();
        ds2.manifest.ids[1] = "s0".into();
        ds2.labels[1].sample_id = "s0".into();
        write_archive(&ds2, tmp2.path()).unwrap();
        assert!(matches!(load_archive(tmp2.path()), Err(CmcError::Archive { .. })));
    }

    #[test]
    fn byte_identical_rewrite() {
        let tmp_a = tempfile::tempdir().unwrap();
        let tmp_b = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n: 30, ..SynthConfig::default() };
        write_archive(&synth_generate(&cfg).unwrap(), tmp_a.path()).unwrap();
        write_archive(&synth_generate(&cfg).unwrap(), tmp_b.path()).unwrap();
        for file in ["manifest.json", "labels.csv", "text.bin", "audio.bin", "vision.bin"] {
            let a = std::fs::read(tmp_a.path().join(file)).unwrap();
            let b = std::fs::read(tmp_b.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical seeds");
        }
    }

    #[test]
    fn generated_archives_pass_loader_validation() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n: 24, rho: 0.5, ..SynthConfig::default() };
        let ds = synth_generate(&cfg).unwrap();
        write_archive(&ds, tmp.path()).unwrap();
        let loaded = load_archive(tmp.path()).unwrap();
        assert_eq!(loaded.n(), 24);
        assert!(loaded.has_unimodal_scores());
        assert_eq!(
            loaded.splits.train.len() + loaded.splits.validation.len() + loaded.splits.test.len(),
            24
        );
    }

    #[test]
    fn rho_one_means_every_sample_is_msc() {
        let cfg = SynthConfig { n: 60, rho: 1.0, ..SynthConfig::default() };
        let ds = synth_generate(&cfg).unwrap();
        let (msc, msi) = split_msc_msi(&ds.labels).unwrap();
        assert_eq!(msc.len(), 60);
        assert!(msi.is_empty());
    }

    #[test]
    fn msc_fraction_tracks_rho() {
        let cfg = SynthConfig { n: 1000, rho: 0.5, seed: 7, ..SynthConfig::default() };
        let ds = synth_generate(&cfg).unwrap();
        let (msc, _) = split_msc_msi(&ds.labels).unwrap();
        let fraction = msc.len() as f64 / 1000.0;
        // 3-sigma binomial bound around 0.5
        assert!((fraction - 0.5).abs() < 0.05, "msc fraction {fraction}");
    }

    #[test]
    fn conflict_mode_flips_text_sign_on_every_msi_sample() {
        let cfg = SynthConfig {
            n: 400,
            rho: 0.5,
            text_dominance_conflict: true,
            seed: 9,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        let (_, msi) = split_msc_msi(&ds.labels).unwrap();
        assert!(!msi.is_empty());
        for &i in &msi {
            let row = &ds.labels[i];
            let t = row.t_score.unwrap();
            assert!(
                row.m_score * t < 0.0,
                "sample {}: text score {t} does not oppose multimodal {}",
                row.sample_id,
                row.m_score
            );
        }
    }

    #[test]
    fn rho_outside_unit_interval_is_rejected() {
        let cfg = SynthConfig { rho: 1.5, ..SynthConfig::default() };
        assert!(matches!(synth_generate(&cfg), Err(CmcError::Domain(_))));
    }

    #[test]
    fn probe_accuracy_bands_match_modality_quality_targets() {
        let cfg = SynthConfig { n: 1500, rho: 1.0, seed: 5, ..SynthConfig::default() };
        let ds = synth_generate(&cfg).unwrap();
        let text = centroid_probe(&ds, Modality::Text).unwrap();
        let audio = centroid_probe(&ds, Modality::Audio).unwrap();
        let vision = centroid_probe(&ds, Modality::Vision).unwrap();
        assert!((0.84..=0.97).contains(&text), "text probe {text}");
        assert!((0.58..=0.82).contains(&audio), "audio probe {audio}");
        assert!((0.58..=0.82).contains(&vision), "vision probe {vision}");
    }
}
