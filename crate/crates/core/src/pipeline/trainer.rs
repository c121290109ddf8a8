//! Two-stage trainer: unimodal pretraining with pseudo-label refinement,
//! multimodal finetuning through fusion and routing, and evaluation.

use std::path::Path;

use crate::consensus::{aggregate, fuse_predictions, mcr_weights, pfm_fuse, RouterNodes};
use crate::data::{discretize, split_msc_msi, Dataset};
use crate::diffcore::{DropoutKey, Gradients, Mode, NodeId, Tape, Tensor};
use crate::encoders::{
    classify, encode, update_running_stats, ClassifierNodes, ClassifierParams, EncoderNodes,
    EncoderParams, ModalityConfig,
};
use crate::error::{CmcError, Result};
use crate::losses::{stage1_loss, stage2_loss, Stage2Terms};
use crate::metrics::split_report;
use crate::modality::Modality;
use crate::pipeline::artifact::{
    write_metrics, write_router_weights, LabelHistory, LossLog, MetricsJson, RunKind, RunMeta,
    RunPaths,
};
use crate::pipeline::config::{RunConfig, VariantTag};
use crate::pipeline::model::{
    ema_state_entries, load_checkpoint, load_ema_shadows, save_checkpoint, CmcModel,
};
use crate::pipeline::optimizer::Adam;
use crate::plgm::{refine_label, EmaModel, LabelStore, MomentumSchedule};
use crate::rng::{seeded, shuffle, sub_seed};

/// Borrowed view of one modality's parameters, so live and EMA models share
/// the forward builders.
#[derive(Clone, Copy)]
struct ModalityView<'a> {
    config: &'a ModalityConfig,
    encoder: &'a EncoderParams<f32>,
    classifier: &'a ClassifierParams<f32>,
}

fn live_views(model: &CmcModel) -> [ModalityView<'_>; 3] {
    let mk = |m: Modality| {
        let mm = model.modality(m);
        ModalityView { config: &mm.config, encoder: &mm.encoder, classifier: &mm.classifier }
    };
    [mk(Modality::Text), mk(Modality::Audio), mk(Modality::Vision)]
}

fn ema_views<'a>(model: &'a CmcModel, shadows: &'a [EmaModel<f32>]) -> [ModalityView<'a>; 3] {
    let mk = |m: Modality| ModalityView {
        config: &model.modality(m).config,
        encoder: &shadows[m.index()].encoder,
        classifier: &shadows[m.index()].classifier,
    };
    [mk(Modality::Text), mk(Modality::Audio), mk(Modality::Vision)]
}

fn pseudo_hard_labels(store: &LabelStore, indices: &[usize], m: Modality) -> Vec<usize> {
    indices.iter().map(|&i| store.hard(i, m)).collect()
}

fn map_nonfinite(err: CmcError, epoch: usize, step: u64) -> CmcError {
    match err {
        CmcError::NonFinite { op } => CmcError::Diverged(format!(
            "non-finite value in `{op}` at epoch {epoch}, step {step}"
        )),
        other => other,
    }
}

// ── Stage-1 graph ────────────────────────────────────────────────────

struct Stage1Graph {
    total: NodeId,
    bundle_terms: crate::losses::Stage1Loss,
    logits: [NodeId; 3],
    encoder_nodes: Vec<EncoderNodes>,
    classifier_nodes: Vec<ClassifierNodes>,
    batch_stats: Vec<Option<crate::diffcore::BatchStats<f64>>>,
}

#[allow(clippy::too_many_arguments)]
fn build_stage1(
    tape: &mut Tape<f32>,
    views: &[ModalityView<'_>; 3],
    shared_dim: usize,
    dataset: &Dataset,
    indices: &[usize],
    store: &LabelStore,
    tau_c: f64,
    supcon_weight: f64,
    mode: Mode,
    trainable: bool,
) -> Result<Stage1Graph> {
    let mut logits = [0usize; 3];
    let mut features = [0usize; 3];
    let mut encoder_nodes = Vec::with_capacity(3);
    let mut classifier_nodes = Vec::with_capacity(3);
    let mut batch_stats = Vec::with_capacity(3);
    for m in Modality::ALL {
        let view = views[m.index()];
        let x = dataset.batch(m, indices)?;
        let x_id = tape.input(x);
        let enc = EncoderNodes::register(tape, view.encoder, trainable);
        let out = encode(tape, x_id, view.encoder, &enc, view.config, shared_dim, mode)?;
        let cls = ClassifierNodes::register(tape, view.classifier, trainable);
        let z = classify(tape, out.output, view.classifier, &cls, mode)?;
        logits[m.index()] = z;
        features[m.index()] = out.output;
        encoder_nodes.push(enc);
        classifier_nodes.push(cls);
        batch_stats.push(out.batch_stats);
    }
    let labels: [Vec<usize>; 3] = [
        pseudo_hard_labels(store, indices, Modality::Text),
        pseudo_hard_labels(store, indices, Modality::Audio),
        pseudo_hard_labels(store, indices, Modality::Vision),
    ];
    let loss = stage1_loss(
        tape,
        logits,
        [&labels[0], &labels[1], &labels[2]],
        features,
        tau_c,
        supcon_weight,
    )?;
    Ok(Stage1Graph {
        total: loss.total,
        bundle_terms: loss,
        logits,
        encoder_nodes,
        classifier_nodes,
        batch_stats,
    })
}

// ── Stage-2 graph ────────────────────────────────────────────────────

struct Stage2Graph {
    total: NodeId,
    loss: crate::losses::Stage2Loss,
    fused_logits: NodeId,
    modality_logits: [NodeId; 3],
    weights: NodeId,
    encoder_nodes: Vec<EncoderNodes>,
    classifier_nodes: Vec<ClassifierNodes>,
    router_nodes: Option<RouterNodes>,
    batch_stats: Vec<Option<crate::diffcore::BatchStats<f64>>>,
}

#[allow(clippy::too_many_arguments)]
fn build_stage2(
    tape: &mut Tape<f32>,
    views: &[ModalityView<'_>; 3],
    model: &CmcModel,
    dataset: &Dataset,
    indices: &[usize],
    store: &LabelStore,
    mm_classes: &[usize],
    cfg: &RunConfig,
    mode: Mode,
) -> Result<Stage2Graph> {
    let variant = cfg.variant;
    let trainable_unimodal = !variant.freezes_unimodal();
    let unimodal_mode = if variant.freezes_unimodal() { Mode::Eval } else { mode };

    let b = indices.len();
    let d = model.shared_dim;
    let mut stacked_parts = [0usize; 3];
    let mut encoder_nodes = Vec::with_capacity(3);
    let mut classifier_nodes = Vec::with_capacity(3);
    let mut batch_stats = Vec::with_capacity(3);
    for m in Modality::ALL {
        let view = views[m.index()];
        let x = dataset.batch(m, indices)?;
        let x_id = tape.input(x);
        let enc = EncoderNodes::register(tape, view.encoder, trainable_unimodal);
        let out = encode(tape, x_id, view.encoder, &enc, view.config, d, unimodal_mode)?;
        stacked_parts[m.index()] = tape.reshape(out.output, vec![b, 1, d])?;
        encoder_nodes.push(enc);
        batch_stats.push(out.batch_stats);
    }
    let h_x = tape.concat(&stacked_parts, 1)?;
    let fused = if variant.uses_pfm() { pfm_fuse(tape, h_x, cfg.tau)? } else { h_x };

    let mut modality_logits = [0usize; 3];
    let mut fused_features = [0usize; 3];
    for m in Modality::ALL {
        let view = views[m.index()];
        let slot = tape.slice_axis(fused, 1, m.index(), 1)?;
        let h_k = tape.reshape(slot, vec![b, d])?;
        fused_features[m.index()] = h_k;
        let cls = ClassifierNodes::register(tape, view.classifier, trainable_unimodal);
        modality_logits[m.index()] = classify(tape, h_k, view.classifier, &cls, unimodal_mode)?;
        classifier_nodes.push(cls);
    }

    let h_m = aggregate(tape, fused)?;
    let (weights, router_nodes) = if variant.uses_mcr() {
        let router = RouterNodes::register(tape, &model.router, true);
        let w = mcr_weights(tape, h_m, &router)?;
        (w, Some(router))
    } else {
        let uniform = tape.input(Tensor::full(vec![b, 3], 1.0f32 / 3.0));
        (uniform, None)
    };
    let fused_logits = fuse_predictions(tape, weights, modality_logits)?;

    let batch_mm: Vec<usize> = indices.iter().map(|&i| mm_classes[i]).collect();
    let pseudo: [Vec<usize>; 3] = [
        pseudo_hard_labels(store, indices, Modality::Text),
        pseudo_hard_labels(store, indices, Modality::Audio),
        pseudo_hard_labels(store, indices, Modality::Vision),
    ];
    let loss = stage2_loss(
        tape,
        fused_logits,
        modality_logits,
        &batch_mm,
        [&pseudo[0], &pseudo[1], &pseudo[2]],
        fused_features,
        cfg.tau_c,
        &Stage2Terms {
            include_unimodal: variant.multi_task_stage2(),
            include_supcon: variant.multi_task_stage2(),
            supcon_weight: cfg.supcon_weight,
            unimodal_weight: cfg.stage2_unimodal_weight,
        },
    )?;
    Ok(Stage2Graph {
        total: loss.total,
        loss,
        fused_logits,
        modality_logits,
        weights,
        encoder_nodes,
        classifier_nodes,
        router_nodes,
        batch_stats,
    })
}

// ── Shared training machinery ────────────────────────────────────────

struct EarlyStopper {
    best: f64,
    best_epoch: usize,
    patience: usize,
}

impl EarlyStopper {
    fn new(patience: usize) -> Self {
        EarlyStopper { best: f64::INFINITY, best_epoch: 0, patience }
    }

    fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.best_epoch + self.patience
    }
}

fn epoch_batches(
    seed: u64,
    stage: &str,
    epoch: usize,
    train: &[usize],
    batch_size: usize,
    skip_singletons: bool,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = train.to_vec();
    let mut rng = seeded(sub_seed(seed, &format!("{stage}-shuffle-{epoch}")));
    shuffle(&mut rng, &mut order);
    order
        .chunks(batch_size)
        .filter(|c| !(skip_singletons && c.len() == 1))
        .map(|c| c.to_vec())
        .collect()
}

fn collect_grads(
    grads: &mut Gradients<f32>,
    ids: &[NodeId],
    tape: &Tape<f32>,
) -> Vec<Tensor<f32>> {
    ids.iter().map(|&id| grads.take_or_zeros(id, tape.shape(id))).collect()
}

fn multimodal_classes(dataset: &Dataset) -> Result<Vec<usize>> {
    dataset.labels.iter().map(|r| discretize(r.m_score)).collect()
}

fn ground_truth_store(dataset: &Dataset, classes: usize) -> Result<LabelStore> {
    let mut rows = Vec::with_capacity(dataset.n());
    for row in &dataset.labels {
        let mut entry = [0usize; 3];
        for m in Modality::ALL {
            let score = row.unimodal(m).ok_or_else(|| {
                CmcError::Config(format!(
                    "variant gt_labels needs unimodal scores; sample {} lacks {m}",
                    row.sample_id
                ))
            })?;
            entry[m.index()] = discretize(score)?;
        }
        rows.push(entry);
    }
    LabelStore::from_hard_classes(classes, &rows)
}

// ── Stage 1: unimodal pretraining ────────────────────────────────────

pub fn pretrain_unimodal(cfg: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunMeta> {
    cfg.validate()?;
    let paths = RunPaths::new(out_dir);
    std::fs::create_dir_all(out_dir)?;

    let mut model = CmcModel::init(cfg, dataset)?;
    let mut shadows = model.ema_shadows();
    let mut store = match cfg.variant {
        VariantTag::GtLabels => ground_truth_store(dataset, cfg.classes)?,
        _ => LabelStore::init_labels(
            &dataset.labels.iter().map(|r| r.m_score).collect::<Vec<_>>(),
            cfg.classes,
            discretize,
        )?,
    };

    let mut label_schedules: Vec<MomentumSchedule> = Modality::ALL
        .iter()
        .map(|&m| {
            let s = cfg.label_momentum.get(m);
            MomentumSchedule::new(s.m0, s.gamma)
        })
        .collect::<Result<_>>()?;
    let mut theta_schedules: Vec<MomentumSchedule> = Modality::ALL
        .iter()
        .map(|&m| {
            let s = cfg.theta_momentum.get(m);
            MomentumSchedule::new(s.m0, s.gamma)
        })
        .collect::<Result<_>>()?;

    let param_sizes: Vec<usize> = {
        let mut sizes = Vec::new();
        for m in Modality::ALL {
            let mm = model.modality(m);
            sizes.extend(mm.encoder.trainables().iter().map(|t| t.numel()));
            sizes.extend(mm.classifier.trainables().iter().map(|t| t.numel()));
        }
        sizes
    };
    let mut adam = Adam::new(cfg.learning_rate, &param_sizes);

    let mut loss_log = LossLog::create(&paths.losses())?;
    let mut history = LabelHistory::create(&paths.label_history(), cfg.classes)?;

    let dropout_seed = sub_seed(cfg.seed, "dropout-stage1");
    let mut stopper = EarlyStopper::new(cfg.patience.max(1));
    let mut best_state = (model.clone(), shadows.clone(), store.clone());
    let mut global_step: u64 = 0;
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let label_m: Vec<f64> = label_schedules
            .iter_mut()
            .map(|s| s.advance(epoch))
            .collect::<Result<_>>()?;
        let theta_m: Vec<f64> = theta_schedules
            .iter_mut()
            .map(|s| s.advance(epoch))
            .collect::<Result<_>>()?;

        for batch in epoch_batches(cfg.seed, "stage1", epoch, &dataset.splits.train, cfg.batch_size, true)
        {
            let mut tape =
                Tape::with_dropout_key(DropoutKey { seed: dropout_seed, step: global_step });
            let views = live_views(&model);
            let graph = build_stage1(
                &mut tape,
                &views,
                cfg.shared_dim,
                dataset,
                &batch,
                &store,
                cfg.tau_c,
                cfg.supcon_weight,
                Mode::Train,
                true,
            )
            .map_err(|e| map_nonfinite(e, epoch, global_step))?;

            let bundle = graph.bundle_terms.bundle(&tape);
            let mut grads = tape
                .backward(graph.total)
                .map_err(|e| map_nonfinite(e, epoch, global_step))?;

            let mut grad_list = Vec::with_capacity(param_sizes.len());
            for k in 0..3 {
                grad_list.extend(collect_grads(&mut grads, &graph.encoder_nodes[k].ids(), &tape));
                grad_list.extend(collect_grads(&mut grads, &graph.classifier_nodes[k].ids(), &tape));
            }
            let mut params: Vec<&mut Tensor<f32>> = Vec::with_capacity(param_sizes.len());
            for mm in model.modalities.iter_mut() {
                params.extend(mm.encoder.trainables_mut());
                params.extend(mm.classifier.trainables_mut());
            }
            adam.step(params, &grad_list)?;

            for m in Modality::ALL {
                if let Some(stats) = &graph.batch_stats[m.index()] {
                    if let Some(bn) = &mut model.modalities[m.index()].encoder.batchnorm {
                        update_running_stats(bn, stats);
                    }
                }
            }

            // refinement uses the forward logits of this step's live model
            for m in Modality::ALL {
                let logits_value = tape.value(graph.logits[m.index()]);
                let c = model.classes;
                for (bi, &sample) in batch.iter().enumerate() {
                    let alpha = if cfg.variant.refines_labels() {
                        let row: Vec<f64> = logits_value.data()[bi * c..(bi + 1) * c]
                            .iter()
                            .map(|&v| v as f64)
                            .collect();
                        let refinement = refine_label(&row, store.hard(sample, m))?;
                        store.apply(sample, m, &refinement.soft, label_m[m.index()])?;
                        refinement.alpha
                    } else {
                        0.0
                    };
                    let entry = store.get(sample, m);
                    history.record(
                        epoch,
                        dataset.id(sample),
                        m,
                        entry.soft.probs(),
                        entry.hard,
                        alpha,
                    )?;
                }
            }

            for m in Modality::ALL {
                let mm = model.modality(m);
                shadows[m.index()].update(&mm.encoder, &mm.classifier, theta_m[m.index()])?;
            }

            loss_log.record(global_step, epoch, 1, &bundle)?;
            global_step += 1;
        }

        let val_loss = stage1_validation_loss(cfg, &model, &shadows, dataset, &store)?;
        if stopper.observe(epoch, val_loss) {
            best_state = (model.clone(), shadows.clone(), store.clone());
        }
        if stopper.should_stop(epoch) {
            break;
        }
    }

    let (best_model, best_shadows, best_store) = if cfg.epochs == 0 {
        (model, shadows, store)
    } else {
        best_state
    };

    loss_log.finish()?;
    history.finish()?;

    paths.write_config(cfg)?;
    let meta = RunMeta {
        kind: RunKind::Pretrain,
        variant: cfg.variant,
        seed: cfg.seed,
        best_epoch: stopper.best_epoch,
        epochs_run,
        stage1: None,
    };
    paths.write_meta(&meta)?;
    save_checkpoint(&paths.checkpoints(), "live", &best_model.state_entries())?;
    save_checkpoint(&paths.checkpoints(), "ema", &ema_state_entries(&best_shadows))?;
    paths.write_labels(&best_store)?;

    let metrics = stage1_metrics(cfg, &best_model, &best_shadows, dataset)?;
    write_metrics(&paths.metrics(), &metrics)?;
    let unimodal = stage1_unimodal_metrics(cfg, &best_model, &best_shadows, dataset)?;
    std::fs::write(paths.unimodal_metrics(), serde_json::to_string_pretty(&unimodal)?)?;
    Ok(meta)
}

fn stage1_validation_loss(
    cfg: &RunConfig,
    model: &CmcModel,
    shadows: &[EmaModel<f32>],
    dataset: &Dataset,
    store: &LabelStore,
) -> Result<f64> {
    let indices = if dataset.splits.validation.is_empty() {
        &dataset.splits.train
    } else {
        &dataset.splits.validation
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in indices.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let views = ema_views(model, shadows);
        let graph = build_stage1(
            &mut tape,
            &views,
            cfg.shared_dim,
            dataset,
            batch,
            store,
            cfg.tau_c,
            cfg.supcon_weight,
            Mode::Eval,
            false,
        )?;
        total += tape.value(graph.total).item() as f64 * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count.max(1) as f64)
}

// ── Stage-1 evaluation (EMA ensemble + per-modality heads) ───────────

fn stage1_logits(
    cfg: &RunConfig,
    model: &CmcModel,
    shadows: &[EmaModel<f32>],
    dataset: &Dataset,
    indices: &[usize],
) -> Result<[Vec<Vec<f32>>; 3]> {
    let mut out: [Vec<Vec<f32>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for batch in indices.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let views = ema_views(model, shadows);
        for m in Modality::ALL {
            let view = views[m.index()];
            let x = dataset.batch(m, batch)?;
            let x_id = tape.input(x);
            let enc = EncoderNodes::register(&mut tape, view.encoder, false);
            let enc_out =
                encode(&mut tape, x_id, view.encoder, &enc, view.config, cfg.shared_dim, Mode::Eval)?;
            let cls = ClassifierNodes::register(&mut tape, view.classifier, false);
            let z = classify(&mut tape, enc_out.output, view.classifier, &cls, Mode::Eval)?;
            let value = tape.value(z);
            let c = cfg.classes;
            for bi in 0..batch.len() {
                out[m.index()].push(value.data()[bi * c..(bi + 1) * c].to_vec());
            }
        }
    }
    Ok(out)
}

fn argmax_f32(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stage-1 headline predictions: uniform average of the three EMA heads.
fn stage1_predictions(
    cfg: &RunConfig,
    model: &CmcModel,
    shadows: &[EmaModel<f32>],
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<usize>> {
    let logits = stage1_logits(cfg, model, shadows, dataset, indices)?;
    let mut preds = Vec::with_capacity(indices.len());
    for i in 0..indices.len() {
        let mut mean = vec![0f32; cfg.classes];
        for head in &logits {
            for (j, &v) in head[i].iter().enumerate() {
                mean[j] += v / 3.0;
            }
        }
        preds.push(argmax_f32(&mean));
    }
    Ok(preds)
}

fn split_sets(dataset: &Dataset) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = vec![("test".to_string(), dataset.splits.test.clone())];
    if dataset.has_unimodal_scores() {
        let (msc, _) = split_msc_msi(&dataset.labels)?;
        let msc: std::collections::BTreeSet<usize> = msc.into_iter().collect();
        let test_msc: Vec<usize> =
            dataset.splits.test.iter().copied().filter(|i| msc.contains(i)).collect();
        let test_msi: Vec<usize> =
            dataset.splits.test.iter().copied().filter(|i| !msc.contains(i)).collect();
        out.push(("msc".to_string(), test_msc));
        out.push(("msi".to_string(), test_msi));
    }
    Ok(out)
}

fn metrics_for_predictions(
    cfg: &RunConfig,
    dataset: &Dataset,
    full_indices: &[usize],
    preds: &[usize],
    sets: &[(String, Vec<usize>)],
) -> Result<MetricsJson> {
    let pred_of: std::collections::BTreeMap<usize, usize> =
        full_indices.iter().copied().zip(preds.iter().copied()).collect();
    let mut metrics = MetricsJson::new();
    for (name, indices) in sets {
        let split_preds: Vec<usize> = indices.iter().map(|i| pred_of[i]).collect();
        let scores: Vec<f64> = indices.iter().map(|&i| dataset.labels[i].m_score).collect();
        metrics.insert(name.clone(), split_report(&split_preds, &scores, cfg.binary_mode)?);
    }
    Ok(metrics)
}

fn stage1_metrics(
    cfg: &RunConfig,
    model: &CmcModel,
    shadows: &[EmaModel<f32>],
    dataset: &Dataset,
) -> Result<MetricsJson> {
    let test = &dataset.splits.test;
    let preds = stage1_predictions(cfg, model, shadows, dataset, test)?;
    metrics_for_predictions(cfg, dataset, test, &preds, &split_sets(dataset)?)
}

/// Per-modality test metrics of the EMA heads (feature-quality view).
fn stage1_unimodal_metrics(
    cfg: &RunConfig,
    model: &CmcModel,
    shadows: &[EmaModel<f32>],
    dataset: &Dataset,
) -> Result<std::collections::BTreeMap<String, MetricsJson>> {
    let test = &dataset.splits.test;
    let logits = stage1_logits(cfg, model, shadows, dataset, test)?;
    let sets = split_sets(dataset)?;
    let mut out = std::collections::BTreeMap::new();
    for m in Modality::ALL {
        let preds: Vec<usize> = logits[m.index()].iter().map(|row| argmax_f32(row)).collect();
        out.insert(
            m.name().to_string(),
            metrics_for_predictions(cfg, dataset, test, &preds, &sets)?,
        );
    }
    Ok(out)
}

// ── Stage 2: multimodal finetuning ───────────────────────────────────

pub fn finetune_multimodal(
    cfg: &RunConfig,
    dataset: &Dataset,
    stage1_dir: &Path,
    out_dir: &Path,
) -> Result<RunMeta> {
    cfg.validate()?;
    let stage1_paths = RunPaths::new(stage1_dir);
    let stage1_meta = stage1_paths.read_meta()?;
    if stage1_meta.kind != RunKind::Pretrain {
        return Err(CmcError::Config(format!(
            "`{}` is not a pretraining artifact",
            stage1_dir.display()
        )));
    }

    let mut model = CmcModel::init(cfg, dataset)?;
    let live = load_checkpoint(&stage1_paths.checkpoints(), "live")?;
    model.load_state(&live)?;
    if cfg.stage2_init_from_ema {
        let ema_map = load_checkpoint(&stage1_paths.checkpoints(), "ema")?;
        let shadows = load_ema_shadows(&model, &ema_map)?;
        model.adopt_ema(&shadows);
    }

    let store = stage1_paths.read_labels()?;
    if store.len() != dataset.n() || store.classes() != cfg.classes {
        return Err(CmcError::Config(
            "stage-1 label store does not match this archive".into(),
        ));
    }
    let mm_classes = multimodal_classes(dataset)?;

    run_stage2(cfg, dataset, model, store, mm_classes, Some(stage1_dir), out_dir)
}

fn stage2_param_layout(cfg: &RunConfig, model: &CmcModel) -> Vec<usize> {
    let mut sizes = Vec::new();
    if !cfg.variant.freezes_unimodal() {
        for m in Modality::ALL {
            let mm = model.modality(m);
            sizes.extend(mm.encoder.trainables().iter().map(|t| t.numel()));
            sizes.extend(mm.classifier.trainables().iter().map(|t| t.numel()));
        }
    }
    if cfg.variant.uses_mcr() {
        sizes.extend(model.router.trainables().iter().map(|t| t.numel()));
    }
    sizes
}

fn run_stage2(
    cfg: &RunConfig,
    dataset: &Dataset,
    mut model: CmcModel,
    store: LabelStore,
    mm_classes: Vec<usize>,
    stage1_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<RunMeta> {
    let paths = RunPaths::new(out_dir);
    std::fs::create_dir_all(out_dir)?;

    let param_sizes = stage2_param_layout(cfg, &model);
    let mut adam = Adam::new(cfg.learning_rate, &param_sizes);
    let mut loss_log = LossLog::create(&paths.losses())?;

    let dropout_seed = sub_seed(cfg.seed, "dropout-stage2");
    let mut stopper = EarlyStopper::new(cfg.patience.max(1));
    let mut best_model = model.clone();
    let mut global_step: u64 = 0;
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        for batch in epoch_batches(cfg.seed, "stage2", epoch, &dataset.splits.train, cfg.batch_size, true)
        {
            let mut tape =
                Tape::with_dropout_key(DropoutKey { seed: dropout_seed, step: global_step });
            let views = live_views(&model);
            let graph = build_stage2(
                &mut tape,
                &views,
                &model,
                dataset,
                &batch,
                &store,
                &mm_classes,
                cfg,
                Mode::Train,
            )
            .map_err(|e| map_nonfinite(e, epoch, global_step))?;

            let bundle = graph.loss.bundle(&tape);
            let mut grads = tape
                .backward(graph.total)
                .map_err(|e| map_nonfinite(e, epoch, global_step))?;

            let mut grad_list = Vec::with_capacity(param_sizes.len());
            if !cfg.variant.freezes_unimodal() {
                for k in 0..3 {
                    grad_list
                        .extend(collect_grads(&mut grads, &graph.encoder_nodes[k].ids(), &tape));
                    grad_list.extend(collect_grads(
                        &mut grads,
                        &graph.classifier_nodes[k].ids(),
                        &tape,
                    ));
                }
            }
            if cfg.variant.uses_mcr() {
                let router = graph.router_nodes.as_ref().expect("router nodes present");
                grad_list.extend(collect_grads(&mut grads, &router.ids(), &tape));
            }

            let mut params: Vec<&mut Tensor<f32>> = Vec::with_capacity(param_sizes.len());
            if !cfg.variant.freezes_unimodal() {
                for mm in model.modalities.iter_mut() {
                    params.extend(mm.encoder.trainables_mut());
                    params.extend(mm.classifier.trainables_mut());
                }
            }
            if cfg.variant.uses_mcr() {
                params.extend(model.router.trainables_mut());
            }
            adam.step(params, &grad_list)?;

            if cfg.stage2_update_batchnorm && !cfg.variant.freezes_unimodal() {
                for m in Modality::ALL {
                    if let Some(stats) = &graph.batch_stats[m.index()] {
                        if let Some(bn) = &mut model.modalities[m.index()].encoder.batchnorm {
                            update_running_stats(bn, stats);
                        }
                    }
                }
            }

            loss_log.record(global_step, epoch, 2, &bundle)?;
            global_step += 1;
        }

        let val_loss = stage2_validation_loss(cfg, &model, dataset, &store, &mm_classes)?;
        if stopper.observe(epoch, val_loss) {
            best_model = model.clone();
        }
        if stopper.should_stop(epoch) {
            break;
        }
    }

    if cfg.epochs == 0 {
        best_model = model;
    }
    loss_log.finish()?;

    paths.write_config(cfg)?;
    let meta = RunMeta {
        kind: RunKind::Finetune,
        variant: cfg.variant,
        seed: cfg.seed,
        best_epoch: stopper.best_epoch,
        epochs_run,
        stage1: stage1_dir.map(|p| p.display().to_string()),
    };
    paths.write_meta(&meta)?;
    save_checkpoint(&paths.checkpoints(), "final", &best_model.state_entries())?;
    paths.write_labels(&store)?;

    let metrics = stage2_metrics(cfg, &best_model, dataset, &store, &mm_classes)?;
    write_metrics(&paths.metrics(), &metrics)?;
    let rows = router_rows(cfg, &best_model, dataset, &store, &mm_classes, &dataset.splits.test)?;
    write_router_weights(&paths.router_weights(), &rows)?;
    Ok(meta)
}

fn stage2_validation_loss(
    cfg: &RunConfig,
    model: &CmcModel,
    dataset: &Dataset,
    store: &LabelStore,
    mm_classes: &[usize],
) -> Result<f64> {
    let indices = if dataset.splits.validation.is_empty() {
        &dataset.splits.train
    } else {
        &dataset.splits.validation
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in indices.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let views = live_views(model);
        let graph =
            build_stage2(&mut tape, &views, model, dataset, batch, store, mm_classes, cfg, Mode::Eval)?;
        total += tape.value(graph.total).item() as f64 * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Stage-2 per-sample outputs: router weights, per-modality classes, fused class.
fn router_rows(
    cfg: &RunConfig,
    model: &CmcModel,
    dataset: &Dataset,
    store: &LabelStore,
    mm_classes: &[usize],
    indices: &[usize],
) -> Result<Vec<(String, [f64; 3], [usize; 3], usize)>> {
    let mut rows = Vec::with_capacity(indices.len());
    for batch in indices.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let views = live_views(model);
        let graph =
            build_stage2(&mut tape, &views, model, dataset, batch, store, mm_classes, cfg, Mode::Eval)?;
        let weights = tape.value(graph.weights);
        let fused = tape.value(graph.fused_logits);
        let c = cfg.classes;
        for (bi, &sample) in batch.iter().enumerate() {
            let w = [
                weights.data()[bi * 3] as f64,
                weights.data()[bi * 3 + 1] as f64,
                weights.data()[bi * 3 + 2] as f64,
            ];
            let mut mod_preds = [0usize; 3];
            for m in Modality::ALL {
                let z = tape.value(graph.modality_logits[m.index()]);
                mod_preds[m.index()] = argmax_f32(&z.data()[bi * c..(bi + 1) * c]);
            }
            let fused_pred = argmax_f32(&fused.data()[bi * c..(bi + 1) * c]);
            rows.push((dataset.id(sample).to_string(), w, mod_preds, fused_pred));
        }
    }
    Ok(rows)
}

fn stage2_predictions(
    cfg: &RunConfig,
    model: &CmcModel,
    dataset: &Dataset,
    store: &LabelStore,
    mm_classes: &[usize],
    indices: &[usize],
) -> Result<Vec<usize>> {
    Ok(router_rows(cfg, model, dataset, store, mm_classes, indices)?
        .into_iter()
        .map(|(_, _, _, fused)| fused)
        .collect())
}

fn stage2_metrics(
    cfg: &RunConfig,
    model: &CmcModel,
    dataset: &Dataset,
    store: &LabelStore,
    mm_classes: &[usize],
) -> Result<MetricsJson> {
    let test = &dataset.splits.test;
    let preds = stage2_predictions(cfg, model, dataset, store, mm_classes, test)?;
    metrics_for_predictions(cfg, dataset, test, &preds, &split_sets(dataset)?)
}

// ── Evaluation of stored runs ────────────────────────────────────────

/// Predictions of a finished run on arbitrary sample indices.
pub(crate) fn run_split_predictions(
    run_dir: &Path,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<usize>> {
    let paths = RunPaths::new(run_dir);
    let meta = paths.read_meta()?;
    let cfg = paths.read_config()?;
    match meta.kind {
        RunKind::Pretrain => {
            let mut model = CmcModel::init(&cfg, dataset)?;
            let live = load_checkpoint(&paths.checkpoints(), "live")?;
            model.load_state(&live)?;
            let ema_map = load_checkpoint(&paths.checkpoints(), "ema")?;
            let shadows = load_ema_shadows(&model, &ema_map)?;
            stage1_predictions(&cfg, &model, &shadows, dataset, indices)
        }
        RunKind::Finetune => {
            let mut model = CmcModel::init(&cfg, dataset)?;
            let final_map = load_checkpoint(&paths.checkpoints(), "final")?;
            model.load_state(&final_map)?;
            let store = paths.read_labels()?;
            let mm_classes = multimodal_classes(dataset)?;
            stage2_predictions(&cfg, &model, dataset, &store, &mm_classes, indices)
        }
    }
}

/// Recompute metrics for a finished run on the requested splits
/// (`test`, `msc`, `msi`).
pub fn evaluate_run(run_dir: &Path, dataset: &Dataset, splits: &[String]) -> Result<MetricsJson> {
    let paths = RunPaths::new(run_dir);
    let cfg = paths.read_config()?;

    let all_sets = split_sets(dataset)?;
    let mut requested = Vec::new();
    for name in splits {
        match name.as_str() {
            "test" => requested.push(all_sets[0].clone()),
            "msc" | "msi" => {
                let found = all_sets.iter().find(|(n, _)| n == name).ok_or_else(|| {
                    CmcError::Config(format!(
                        "split `{name}` unsupported: archive lacks unimodal scores"
                    ))
                })?;
                requested.push(found.clone());
            }
            other => return Err(CmcError::Config(format!("unknown split `{other}`"))),
        }
    }

    let test = &dataset.splits.test;
    let preds = run_split_predictions(run_dir, dataset, test)?;
    metrics_for_predictions(&cfg, dataset, test, &preds, &requested)
}

/// Run both stages for a variant: stage 1 into `<out>/stage1`, stage 2 into
/// `<out>`.
pub fn run_two_stage(cfg: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunMeta> {
    let stage1_dir = out_dir.join("stage1");
    pretrain_unimodal(cfg, dataset, &stage1_dir)?;
    finetune_multimodal(cfg, dataset, &stage1_dir, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn tiny_fixture() -> (RunConfig, Dataset, CmcModel, LabelStore, Vec<usize>) {
        let mut synth = SynthConfig { n: 12, rho: 0.5, seed: 31, ..SynthConfig::default() };
        synth.text.seq_len = 4;
        synth.audio.seq_len = 5;
        synth.vision.seq_len = 4;
        synth.text.dim = 6;
        synth.audio.dim = 5;
        synth.vision.dim = 6;
        let dataset = synth_generate(&synth).unwrap();
        let mut cfg = RunConfig::default();
        cfg.shared_dim = 8;
        cfg.output_dropout = 0.0;
        for section in [&mut cfg.text, &mut cfg.audio, &mut cfg.vision] {
            section.transformer_layers = 1;
            section.attention_heads = 2;
        }
        cfg.batch_size = 6;
        let model = CmcModel::init(&cfg, &dataset).unwrap();
        let store = LabelStore::init_labels(
            &dataset.labels.iter().map(|r| r.m_score).collect::<Vec<_>>(),
            cfg.classes,
            discretize,
        )
        .unwrap();
        let mm = multimodal_classes(&dataset).unwrap();
        (cfg, dataset, model, store, mm)
    }

    fn graph_shape(cfg: &RunConfig, dataset: &Dataset, model: &CmcModel, store: &LabelStore, mm: &[usize]) -> (usize, usize) {
        let mut tape = Tape::new();
        let views = live_views(model);
        let indices: Vec<usize> = (0..6).collect();
        build_stage2(&mut tape, &views, model, dataset, &indices, store, mm, cfg, Mode::Train)
            .unwrap();
        (tape.param_count(), tape.len())
    }

    #[test]
    fn variant_graphs_differ_only_in_their_module_path() {
        let (mut cfg, dataset, model, store, mm) = tiny_fixture();

        cfg.variant = VariantTag::Full;
        let (full_params, full_len) = graph_shape(&cfg, &dataset, &model, &store, &mm);

        // removing the fusion removes ops but no parameters
        cfg.variant = VariantTag::WoPfm;
        let (p, l) = graph_shape(&cfg, &dataset, &model, &store, &mm);
        assert_eq!(p, full_params);
        assert!(l < full_len, "wo_pfm must shrink the graph ({l} vs {full_len})");

        // removing the router removes exactly its two parameter tensors
        cfg.variant = VariantTag::WoMcr;
        let (p, _) = graph_shape(&cfg, &dataset, &model, &store, &mm);
        assert_eq!(p, full_params - 2);

        // single-task keeps the forward graph but drops loss terms
        cfg.variant = VariantTag::SingleTask;
        let (p, l) = graph_shape(&cfg, &dataset, &model, &store, &mm);
        assert_eq!(p, full_params);
        assert!(l < full_len);

        // the frozen variant trains the router alone
        cfg.variant = VariantTag::CmcVariant;
        let (p, _) = graph_shape(&cfg, &dataset, &model, &store, &mm);
        assert_eq!(p, 2, "router weight and bias only");

        // optimizer slots agree with the graph's trainable parameters
        cfg.variant = VariantTag::CmcVariant;
        let sizes = stage2_param_layout(&cfg, &model);
        assert_eq!(sizes.iter().sum::<usize>(), 3 * cfg.shared_dim + 3);
    }

    #[test]
    fn singleton_training_batches_are_dropped() {
        let batches = epoch_batches(1, "stage1", 1, &(0..9usize).collect::<Vec<_>>(), 4, true);
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert!(!sizes.contains(&1), "trailing singleton must be dropped: {sizes:?}");
        assert_eq!(sizes.iter().sum::<usize>(), 8);
        let kept = epoch_batches(1, "stage1", 1, &(0..9usize).collect::<Vec<_>>(), 4, false);
        assert_eq!(kept.iter().map(Vec::len).sum::<usize>(), 9);
    }
}
