//! The training loop and model evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, CheckpointMeta};
use super::loss::{assign_and_loss, LossConfig, LossOutput};
use super::{scheduled_lr, Sgd, TrainConfig};
use crate::blocks::{apply_stat_updates, Ctx, Mode, ParamId, StatUpdate};
use crate::data::{Dataset, Sample};
use crate::error::{config_err, MasfError, Result};
use crate::metrics::{evaluate, EvalReport, GroundTruth, ImageEval, Interpolation};
use crate::network::{Level, Model, ModelConfig};
use crate::postproc::{decode, nms, DecodeConfig, DecodeDiagnostics, Detection};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor};

/// Consecutive non-finite losses tolerated before a run is aborted.
pub const MAX_NAN_STREAK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Highest-scoring candidates kept per image before NMS.
    pub max_candidates: usize,
    /// Detections kept per image after NMS.
    pub max_detections: usize,
    pub batch_size: usize,
    pub interpolation: Interpolation,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_candidates: 1000,
            max_detections: 300,
            batch_size: 8,
            interpolation: Interpolation::AllPoints,
        }
    }
}

/// Inference, decoding, candidate capping and NMS on one batch.
pub fn detect_batch(model: &Model, images: &Tensor, settings: &EvalSettings) -> Result<(Vec<Vec<Detection>>, DecodeDiagnostics)> {
    let raw = model.predict(images)?;
    let cfg = DecodeConfig {
        score_threshold: settings.score_threshold,
        ..DecodeConfig::new(model.config.image_size, model.config.num_classes)
    };
    let (dets, diag) = decode(&raw, &cfg)?;
    let out = dets
        .into_iter()
        .map(|mut d| {
            if d.len() > settings.max_candidates {
                // Stable, so equal scores keep decode order.
                d.sort_by(|a, b| b.score.total_cmp(&a.score));
                d.truncate(settings.max_candidates);
            }
            let mut kept = nms(&d, settings.nms_iou);
            kept.truncate(settings.max_detections);
            kept
        })
        .collect();
    Ok((out, diag))
}

fn stack_samples(samples: &[Sample]) -> Result<Tensor> {
    Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())
}

/// Runs the model over a dataset and scores it.
pub fn evaluate_model(model: &Model, data: &dyn Dataset, settings: &EvalSettings) -> Result<(EvalReport, Vec<ImageEval>)> {
    if data.image_size() != model.config.image_size {
        return Err(config_err(format!(
            "dataset image size {} does not match the model's {}",
            data.image_size(),
            model.config.image_size
        )));
    }
    let mut images = Vec::with_capacity(data.len());
    let mut diag = DecodeDiagnostics::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(settings.batch_size.max(1)) {
        let samples = chunk.iter().map(|&i| data.get(i)).collect::<Result<Vec<_>>>()?;
        let (dets, d) = detect_batch(model, &stack_samples(&samples)?, settings)?;
        diag.non_finite += d.non_finite;
        diag.degenerate += d.degenerate;
        for (s, detections) in samples.into_iter().zip(dets) {
            images.push(ImageEval {
                detections,
                ground_truth: s.gts,
            });
        }
    }
    if diag.non_finite > 0 {
        log::warn!("{} cells with non-finite outputs were skipped", diag.non_finite);
    }
    let mut report = evaluate(&images, settings.interpolation)?;
    report.params_m = Some(model.count_params() as f64 / 1e6);
    report.gflops = Some(model.estimate_gflops(model.config.image_size)?);
    Ok((report, images))
}

/// Training-mode forward, loss and backward on one batch: the loss, the
/// gradient of every learnable parameter, and the pending batch-norm
/// statistics updates. Parameters are not modified. When the loss is not
/// finite no backward pass is run and the gradient list is empty.
pub fn loss_and_grads(
    model: &Model,
    images: Tensor,
    gts: &[Vec<GroundTruth>],
    loss_cfg: &LossConfig,
) -> Result<(LossOutput, Vec<(ParamId, Tensor)>, Vec<StatUpdate>)> {
    let mut ctx = Ctx::new(&model.store, Tape::new(), Mode::Train);
    let x = ctx.tape.constant(images);
    let outputs = model.forward(&mut ctx, x)?;
    let raw: BTreeMap<Level, Tensor> = outputs.iter().map(|(&l, &v)| (l, ctx.tape.value(v).clone())).collect();
    let loss = assign_and_loss(&raw, gts, loss_cfg)?;
    if !loss.total.is_finite() {
        return Ok((loss, Vec::new(), Vec::new()));
    }
    let seeds = outputs.iter().map(|(l, &v)| (v, loss.grads[l].clone())).collect();
    let grads = ctx.tape.backward(seeds)?;
    let param_grads = ctx.param_grads(&grads);
    let updates = ctx.take_stat_updates();
    Ok((loss, param_grads, updates))
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's steps with a finite loss.
    pub loss: f64,
    pub loss_box: f64,
    pub loss_cls: f64,
    /// Rate used at the epoch's last step.
    pub lr: f64,
    pub map50: f64,
    pub map5095: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub best_map50: f64,
    pub log: Vec<EpochLog>,
    /// Manifests of the written checkpoints (best, last) when an output
    /// directory was given.
    pub checkpoints: Option<(PathBuf, PathBuf)>,
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    step: usize,
    lr: f64,
    recent_losses: &'a [f64],
    non_finite_params: Vec<String>,
    batch: Vec<String>,
}

fn write_nan_dump(out: Option<&Path>, dump: &NanDump<'_>) -> Result<Option<PathBuf>> {
    let Some(dir) = out else { return Ok(None) };
    let path = dir.join("nan_dump.json");
    std::fs::write(&path, serde_json::to_string_pretty(dump)?)?;
    Ok(Some(path))
}

/// Trains a fresh model (initialised from `train_cfg.seed`).
///
/// Each epoch visits every training sample once in a seeded order, in
/// `ceil(len / batch_size)` steps, then evaluates on `val`. With `out`, the
/// metric log goes to `metrics.jsonl` and the best (by mAP@0.5, earliest
/// wins) and last models to `best.{json,bin}` and `last.{json,bin}`.
pub fn run_training(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &dyn Dataset,
    val: &dyn Dataset,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() {
        return Err(MasfError::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(MasfError::Data("validation set is empty".into()));
    }
    for (what, size) in [("model", model_cfg.image_size), ("training set", train.image_size()), ("validation set", val.image_size())] {
        if size != train_cfg.image_size {
            return Err(config_err(format!(
                "{what} image size {size} does not match the training image size {}",
                train_cfg.image_size
            )));
        }
    }
    let mut model = Model::new(model_cfg.clone(), train_cfg.seed)?;
    let mut sgd = Sgd::new(train_cfg);
    let loss_cfg = LossConfig::new(model_cfg.num_classes, model_cfg.image_size);
    let eval_settings = EvalSettings {
        batch_size: train_cfg.batch_size,
        ..EvalSettings::default()
    };
    let steps_per_epoch = train.len().div_ceil(train_cfg.batch_size);
    let total_steps = steps_per_epoch * train_cfg.epochs;
    let warmup_steps = steps_per_epoch * train_cfg.warmup_epochs;

    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("model_config.json"), model_cfg.to_json())?;
            std::fs::write(dir.join("train_config.json"), serde_json::to_string_pretty(train_cfg)?)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };

    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut checkpoints = None;
    let mut step = 0usize;
    let mut nan_streak = 0usize;
    let mut recent: Vec<f64> = Vec::new();
    for epoch in 0..train_cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        SplitMix64::derive(train_cfg.seed, epoch as u64).shuffle(&mut order);
        let (mut sum, mut sum_box, mut sum_cls, mut finite_steps) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = train_cfg.lr0;
        for batch in order.chunks(train_cfg.batch_size) {
            lr = scheduled_lr(step, total_steps, warmup_steps, train_cfg);
            step += 1;
            let samples = batch.iter().map(|&i| train.get(i)).collect::<Result<Vec<_>>>()?;
            let images = stack_samples(&samples)?;
            let gts: Vec<_> = samples.iter().map(|s| s.gts.clone()).collect();

            let (loss, param_grads, updates) = loss_and_grads(&model, images, &gts, &loss_cfg)?;
            recent.push(loss.total);
            if recent.len() > 16 {
                recent.remove(0);
            }
            if !loss.total.is_finite() {
                nan_streak += 1;
                log::warn!("epoch {epoch} step {step}: non-finite loss ({nan_streak} in a row); step skipped");
                if nan_streak >= MAX_NAN_STREAK {
                    let dump = NanDump {
                        epoch,
                        step,
                        lr,
                        recent_losses: &recent,
                        non_finite_params: model
                            .store
                            .entries()
                            .iter()
                            .filter(|e| !e.value.all_finite())
                            .map(|e| e.name.clone())
                            .collect(),
                        batch: samples.iter().map(|s| s.id.clone()).collect(),
                    };
                    let at = write_nan_dump(out, &dump)?;
                    return Err(MasfError::Numerical(format!(
                        "loss was non-finite for {MAX_NAN_STREAK} consecutive steps (epoch {epoch}, step {step}){}",
                        at.map(|p| format!("; diagnostics in {}", p.display())).unwrap_or_default()
                    )));
                }
                continue;
            }
            nan_streak = 0;
            sgd.step(&mut model.store, param_grads, lr);
            apply_stat_updates(&mut model.store, &updates);
            sum += loss.total;
            sum_box += loss.box_loss;
            sum_cls += loss.cls_loss;
            finite_steps += 1;
        }
        let (report, _) = evaluate_model(&model, val, &eval_settings)?;
        let k = finite_steps.max(1) as f64;
        let entry = EpochLog {
            epoch,
            loss: sum / k,
            loss_box: sum_box / k,
            loss_cls: sum_cls / k,
            lr,
            map50: report.map50,
            map5095: report.map5095,
            steps: steps_per_epoch,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (box {:.4}, cls {:.4}) lr {:.5} mAP50 {:.4} mAP50:95 {:.4} [{:.1}s]",
            entry.loss,
            entry.loss_box,
            entry.loss_cls,
            entry.lr,
            entry.map50,
            entry.map5095,
            started.elapsed().as_secs_f64()
        );
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &entry)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        let meta = CheckpointMeta {
            epoch: Some(epoch),
            map50: Some(report.map50),
            map5095: Some(report.map5095),
            seed: Some(train_cfg.seed),
        };
        if report.map50 > best.1 {
            best = (epoch, report.map50);
            if let Some(dir) = out {
                save_checkpoint(&model, &meta, &dir.join("best"))?;
            }
        }
        if let Some(dir) = out {
            let last = save_checkpoint(&model, &meta, &dir.join("last"))?;
            checkpoints = Some((dir.join("best.json"), last));
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        model,
        best_epoch: best.0,
        best_map50: best.1.max(0.0),
        log,
        checkpoints,
    })
}
