//! The two-phase training driver.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

use super::{
    clip_tensor_gradients, history_csv, learning_rate, mixed_loss, mixup_batch, smoothed_weighted_ce, AdamW,
    EpochRecord, LossConfig, TrainConfig, TrainerState,
};
use crate::augment::{EvalTransform, ImageTensor, TrainTransform};
use crate::data::{ClassWeights, DatasetIndex, DatasetSplit, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::model::{batch_tensor, build_model_on, save_checkpoint, CheckpointMeta, CheckpointPaths, ModelBundle};

pub const BEST_STEM: &str = "best";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub history: Vec<EpochRecord>,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub checkpoint: CheckpointPaths,
    pub checkpoints_written: usize,
    pub history_path: PathBuf,
    pub stopped_early: bool,
    pub config_hash: String,
    pub elapsed: Duration,
}

/// Evaluation-mode loss and accuracy over pre-transformed images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(
    bundle: &ModelBundle,
    images: &[ImageTensor],
    labels: &[i64],
    loss: &LossConfig,
    batch_size: usize,
) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0i64;
    tch::no_grad(|| -> Result<()> {
        for (imgs, labs) in images.chunks(batch_size).zip(labels.chunks(batch_size)) {
            let xs = batch_tensor(imgs, bundle.device())?;
            let ys = Tensor::from_slice(labs).to_device(bundle.device());
            let logits = bundle.forward_t(&xs, false).to_kind(Kind::Double);
            loss_sum += smoothed_weighted_ce(&logits, &ys, loss)?.double_value(&[]) * imgs.len() as f64;
            correct += logits.argmax(-1, false).eq_tensor(&ys).sum(Kind::Int64).int64_value(&[]);
        }
        Ok(())
    })?;
    let n = images.len() as f64;
    Ok(Evaluation { loss: loss_sum / n, accuracy: correct as f64 / n })
}

/// A fixed, seeded subset of training images under the evaluation transform.
fn recalibration_batches(
    config: &TrainConfig,
    samples: &[&crate::data::ImageSample],
    transform: &EvalTransform,
    device: tch::Device,
) -> Result<Vec<Tensor>> {
    let wanted = config.bn_recalibration_batches * config.batch_size;
    if wanted == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)));
    order.truncate(wanted);
    order
        .chunks(config.batch_size)
        .filter(|c| c.len() >= 2)
        .map(|chunk| {
            let imgs: Vec<ImageTensor> = chunk.iter().map(|&i| transform.apply(&samples[i].pixels)).collect();
            batch_tensor(&imgs, device)
        })
        .collect()
}

pub fn train(config: &TrainConfig, index: &DatasetIndex, split: &DatasetSplit, out_dir: &Path) -> Result<TrainResult> {
    let started = Instant::now();
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if split.val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    if config.threads > 0 {
        tch::set_num_threads(config.threads as i32);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    std::fs::write(&config_path, config.to_json_pretty()).map_err(|e| Error::io(&config_path, e))?;

    tch::manual_seed(config.seed as i64);
    let device = config.device.resolve();
    let mut loss_cfg = config.loss.clone();
    if loss_cfg.class_weights.is_none() {
        loss_cfg.class_weights = Some(ClassWeights::from_counts(&index.class_counts_of(&split.train))?);
    }
    let mut bundle = build_model_on(config.variant, &config.head, &config.backbone_init()?, device)?;
    let config_hash = config.config_hash();

    let eval_transform = EvalTransform::from(&config.augment);
    let lookup = |id: &str| index.get(id).ok_or_else(|| Error::Config(format!("split references unknown sample {id}")));
    let mut val_images = Vec::with_capacity(split.val.len());
    let mut val_labels = Vec::with_capacity(split.val.len());
    for id in &split.val {
        let s = lookup(id)?;
        val_images.push(eval_transform.apply(&s.pixels));
        val_labels.push(s.label as i64);
    }
    let train_samples = split.train.iter().map(|id| lookup(id)).collect::<Result<Vec<_>>>()?;
    let recalibration = recalibration_batches(config, &train_samples, &eval_transform, device)?;

    let transform = TrainTransform::new(config.augment.clone())?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut optimizer = AdamW::new(config.optimizer.clone());
    let mut state = TrainerState::new(config.patience);
    let checkpoint = CheckpointPaths::new(out_dir, BEST_STEM);
    let history_path = out_dir.join(HISTORY_FILE);
    let mut checkpoints_written = 0;
    let mut stopped_early = false;

    for epoch in 0..config.schedule.total_epochs {
        let trainable = epoch >= config.unfreeze_at();
        if trainable != bundle.backbone_trainable() {
            bundle.set_backbone_trainable(trainable);
        }
        let lr = learning_rate(epoch as f64, &config.schedule);
        let groups = bundle.parameter_groups(lr, config.optimizer.backbone_lr_factor)?;
        let vars = bundle.var_store().variables();
        let head: Vec<(String, Tensor)> = groups.head.iter().map(|n| (n.clone(), vars[n].shallow_clone())).collect();
        let backbone: Vec<(String, Tensor)> = if trainable {
            groups.backbone.iter().map(|n| (n.clone(), vars[n].shallow_clone())).collect()
        } else {
            Vec::new()
        };
        let clip_groups = [
            ("head", head.iter().map(|(_, t)| t.shallow_clone()).collect::<Vec<_>>()),
            ("backbone", backbone.iter().map(|(_, t)| t.shallow_clone()).collect::<Vec<_>>()),
        ];

        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0i64, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                log::debug!("skipping a trailing batch of one sample");
                continue;
            }
            let imgs: Vec<ImageTensor> =
                chunk.iter().map(|&i| transform.apply(&train_samples[i].pixels, &mut aug_rng)).collect();
            let labels: Vec<i64> = chunk.iter().map(|&i| train_samples[i].label as i64).collect();
            let xs = batch_tensor(&imgs, device)?;
            let ys = Tensor::from_slice(&labels).to_device(device);
            let mixed = mixup_batch(&xs, &ys, &mut order_rng, &config.mixup)?;

            AdamW::zero_grad(head.iter().chain(backbone.iter()).map(|(_, t)| t));
            let logits = bundle.train_forward(&mixed.inputs).to_kind(Kind::Double);
            let loss = mixed_loss(&logits, &mixed.labels_i, &mixed.labels_j, mixed.lambda, &loss_cfg)?;
            let loss_value = loss.double_value(&[]);
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: b + 1 });
            }
            loss.backward();
            clip_tensor_gradients(&clip_groups, loss_cfg.clip_max_norm)?;
            optimizer.step(
                head.iter()
                    .map(|(n, t)| (n.as_str(), t, groups.head_lr))
                    .chain(backbone.iter().map(|(n, t)| (n.as_str(), t, groups.backbone_lr))),
            );

            loss_sum += loss_value * chunk.len() as f64;
            correct += tch::no_grad(|| logits.argmax(-1, false).eq_tensor(&ys).sum(Kind::Int64).int64_value(&[]));
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(Error::EmptySplit("train"));
        }

        bundle.recalibrate_batch_norm(&recalibration);
        let val = evaluate(&bundle, &val_images, &val_labels, &loss_cfg, config.batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            lr,
        };
        let decision = state.should_checkpoint(val.accuracy);
        state.history.push(record);
        log::info!(
            "epoch {}/{} lr {:.2e} train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}{} ({:.0?})",
            record.epoch,
            config.schedule.total_epochs,
            lr,
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc,
            if decision.save { " *" } else { "" },
            started.elapsed()
        );
        if decision.save {
            let meta = CheckpointMeta {
                variant: config.variant,
                head_config: config.head.clone(),
                val_acc: val.accuracy,
                epoch: record.epoch,
                config_hash: config_hash.clone(),
                eval_transform,
                class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            };
            save_checkpoint(&bundle, &meta, &checkpoint)?;
            checkpoints_written += 1;
        }
        std::fs::write(&history_path, history_csv(&state.history)).map_err(|e| Error::io(&history_path, e))?;
        if decision.stop {
            stopped_early = record.epoch < config.schedule.total_epochs;
            break;
        }
    }

    Ok(TrainResult {
        history: state.history,
        best_val_acc: state.best_val_acc.unwrap_or(0.0),
        best_epoch: state.best_epoch,
        checkpoint,
        checkpoints_written,
        history_path,
        stopped_early,
        config_hash,
        elapsed: started.elapsed(),
    })
}
