//! Batch-level Mixup: `x = lambda * x_i + (1 - lambda) * x_perm(i)` with `lambda ~ Beta(alpha, alpha)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub alpha: f64,
    pub apply_prob: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig { alpha: 0.2, apply_prob: 0.5 }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("mixup alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::Config(format!("mixup apply_prob must be in [0, 1], got {}", self.apply_prob)));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct MixedBatch {
    pub inputs: Tensor,
    pub labels_i: Tensor,
    pub labels_j: Tensor,
    pub lambda: f64,
}

impl MixedBatch {
    fn identity(inputs: &Tensor, labels: &Tensor) -> Self {
        MixedBatch {
            inputs: inputs.shallow_clone(),
            labels_i: labels.shallow_clone(),
            labels_j: labels.shallow_clone(),
            lambda: 1.0,
        }
    }

    pub fn is_mixed(&self) -> bool {
        self.lambda < 1.0
    }
}

pub fn sample_lambda<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("Beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

/// Mixes each row with row `partner[i]` at weight `lambda`.
pub fn mix_with(inputs: &Tensor, labels: &Tensor, lambda: f64, partner: &[i64]) -> Result<MixedBatch> {
    let n = inputs.size().first().copied().unwrap_or(0);
    if partner.len() as i64 != n || labels.size() != [n] {
        return Err(Error::Shape(format!(
            "mixup needs {n} labels and partners, got labels {:?} and {} partners",
            labels.size(),
            partner.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mixup lambda must be in [0, 1], got {lambda}")));
    }
    if lambda == 1.0 {
        return Ok(MixedBatch::identity(inputs, labels));
    }
    let idx = Tensor::from_slice(partner).to_device(inputs.device());
    let other = inputs.index_select(0, &idx);
    let mixed = inputs * lambda + other * (1.0 - lambda);
    Ok(MixedBatch {
        inputs: mixed,
        labels_i: labels.shallow_clone(),
        labels_j: labels.index_select(0, &idx.to_kind(Kind::Int64)),
        lambda,
    })
}

/// Applies Mixup to the batch with probability `apply_prob`; otherwise identity with `lambda = 1`.
pub fn mixup_batch<R: Rng + ?Sized>(
    inputs: &Tensor,
    labels: &Tensor,
    rng: &mut R,
    config: &MixupConfig,
) -> Result<MixedBatch> {
    let n = inputs.size().first().copied().unwrap_or(0);
    if n < 2 {
        log::debug!("mixup skipped for a batch of size {n}");
        return Ok(MixedBatch::identity(inputs, labels));
    }
    if !rng.gen_bool(config.apply_prob) {
        return Ok(MixedBatch::identity(inputs, labels));
    }
    let lambda = sample_lambda(rng, config.alpha)?;
    let mut partner: Vec<i64> = (0..n).collect();
    partner.shuffle(rng);
    mix_with(inputs, labels, lambda, &partner)
}
