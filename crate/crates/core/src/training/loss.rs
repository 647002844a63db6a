//! Label-smoothed, class-weighted cross-entropy and its Mixup blend.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::data::ClassWeights;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub smoothing: f64,
    /// `None` means "derive from the training split at run time".
    pub class_weights: Option<ClassWeights>,
    pub clip_max_norm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { smoothing: 0.1, class_weights: None, clip_max_norm: 5.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.smoothing) {
            return Err(Error::Config(format!("label smoothing must be in [0, 0.5), got {}", self.smoothing)));
        }
        if !(self.clip_max_norm > 0.0) {
            return Err(Error::Config(format!("clip_max_norm must be positive, got {}", self.clip_max_norm)));
        }
        if let Some(w) = &self.class_weights {
            if w.as_slice().iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Config("class weights must be positive and finite".into()));
            }
        }
        Ok(())
    }
}

fn check_labels(labels: &Tensor, batch: i64, classes: i64) -> Result<()> {
    if labels.size() != [batch] {
        return Err(Error::Shape(format!("expected {batch} labels, got shape {:?}", labels.size())));
    }
    if batch == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let lo = labels.min().int64_value(&[]);
    let hi = labels.max().int64_value(&[]);
    for label in [lo, hi] {
        if label < 0 || label >= classes {
            return Err(Error::LabelOutOfRange { label, classes: classes as usize });
        }
    }
    Ok(())
}

/// Per-sample target puts `1 - eps` on the true class and `eps / (K - 1)` on every
/// other class; each sample's loss is scaled by its true class weight and the batch
/// value is the mean of the weighted per-sample losses.
pub fn smoothed_weighted_ce(logits: &Tensor, labels: &Tensor, config: &LossConfig) -> Result<Tensor> {
    let size = logits.size();
    let [batch, classes] = size[..] else {
        return Err(Error::Shape(format!("logits must be (batch, classes), got {size:?}")));
    };
    if classes < 2 {
        return Err(Error::Shape("at least two classes are required".into()));
    }
    check_labels(labels, batch, classes)?;
    let (kind, device) = (logits.kind(), logits.device());
    let eps = config.smoothing;
    let off = eps / (classes - 1) as f64;
    let labels = labels.to_kind(Kind::Int64).to_device(device);
    let targets = Tensor::full([batch, classes], off, (kind, device)).scatter_value(1, &labels.unsqueeze(1), 1.0 - eps);
    let per_sample = -(targets * logits.log_softmax(-1, kind)).sum_dim_intlist([1i64].as_slice(), false, kind);
    let weights = match &config.class_weights {
        Some(w) => {
            if w.len() as i64 != classes {
                return Err(Error::Shape(format!("{} class weights for {classes} classes", w.len())));
            }
            Tensor::from_slice(w.as_slice()).to_kind(kind).to_device(device).index_select(0, &labels)
        }
        None => Tensor::ones([batch], (kind, device)),
    };
    Ok((per_sample * weights).mean(kind))
}

/// `lambda * CE(y_i) + (1 - lambda) * CE(y_j)`.
pub fn mixed_loss(
    logits: &Tensor,
    labels_i: &Tensor,
    labels_j: &Tensor,
    lambda: f64,
    config: &LossConfig,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let li = smoothed_weighted_ce(logits, labels_i, config)?;
    if lambda == 1.0 {
        return Ok(li);
    }
    let lj = smoothed_weighted_ce(logits, labels_j, config)?;
    if lambda == 0.0 {
        return Ok(lj);
    }
    Ok(li * lambda + lj * (1.0 - lambda))
}
