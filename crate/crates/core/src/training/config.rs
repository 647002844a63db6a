//! The complete training recipe and its two named profiles.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{LossConfig, MixupConfig, OptimizerConfig, ScheduleConfig};
use crate::augment::AugmentConfig;
use crate::data::DEFAULT_FRACTIONS;
use crate::error::{Error, Result};
use crate::model::{BackboneInit, HeadConfig, Variant};

pub const FAST_MAX_EPOCHS: usize = 12;
pub const FULL_EPOCHS: usize = 80;
/// Peak learning rate of the fast profile.
pub const FAST_ETA_MAX: f64 = 3e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Fast,
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Profile::Fast),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile {other:?}, expected fast or full"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Fast => "fast",
            Profile::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DevicePreference {
    Cpu,
    Cuda,
    Auto,
}

impl DevicePreference {
    pub fn resolve(self) -> tch::Device {
        match self {
            DevicePreference::Cpu => tch::Device::Cpu,
            DevicePreference::Cuda => tch::Device::Cuda(0),
            DevicePreference::Auto => tch::Device::cuda_if_available(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub variant: Variant,
    pub pretrained: bool,
    pub backbone_weights: Option<PathBuf>,
    pub head: HeadConfig,
    pub augment: AugmentConfig,
    pub mixup: MixupConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub patience: usize,
    /// Epoch index (0-based) at which the backbone starts training.
    /// `None` unfreezes at the end of warm-up.
    pub unfreeze_epoch: Option<usize>,
    pub seed: u64,
    pub split_fractions: [f64; 3],
    pub device: DevicePreference,
    /// Batches of evaluation-transformed training images used to re-estimate
    /// backbone BatchNorm statistics before each validation pass; 0 disables.
    pub bn_recalibration_batches: usize,
    /// Torch intra-op threads; 0 keeps the library default.
    pub threads: usize,
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Fast => TrainConfig {
                profile,
                variant: Variant::B0,
                pretrained: false,
                backbone_weights: None,
                head: HeadConfig::for_variant(Variant::B0),
                augment: AugmentConfig::with_crop(160),
                mixup: MixupConfig::default(),
                schedule: ScheduleConfig {
                    total_epochs: FAST_MAX_EPOCHS,
                    warmup_epochs: 2,
                    eta_max: FAST_ETA_MAX,
                    ..Default::default()
                },
                loss: LossConfig::default(),
                optimizer: OptimizerConfig::default(),
                batch_size: 32,
                patience: 15,
                unfreeze_epoch: None,
                seed: 42,
                split_fractions: DEFAULT_FRACTIONS,
                device: DevicePreference::Cpu,
                bn_recalibration_batches: 4,
                threads: 0,
            },
            Profile::Full => TrainConfig {
                profile,
                variant: Variant::B3,
                pretrained: true,
                backbone_weights: None,
                head: HeadConfig::for_variant(Variant::B3),
                augment: AugmentConfig::default(),
                mixup: MixupConfig::default(),
                schedule: ScheduleConfig { total_epochs: FULL_EPOCHS, ..Default::default() },
                loss: LossConfig::default(),
                optimizer: OptimizerConfig::default(),
                batch_size: 32,
                patience: 15,
                unfreeze_epoch: None,
                seed: 42,
                split_fractions: DEFAULT_FRACTIONS,
                device: DevicePreference::Auto,
                bn_recalibration_batches: 4,
                threads: 0,
            },
        }
    }

    /// Profile defaults, overlaid by a (possibly partial) JSON document.
    pub fn from_layers(profile: Profile, overlay: Option<&Value>) -> Result<Self> {
        let mut profile = profile;
        if let Some(p) = overlay.and_then(|v| v.get("profile")).and_then(Value::as_str) {
            profile = p.parse()?;
        }
        let mut base = serde_json::to_value(Self::for_profile(profile))?;
        if let Some(overlay) = overlay {
            merge(&mut base, overlay, "")?;
        }
        Ok(serde_json::from_value(base)?)
    }

    pub fn from_file(path: &Path, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        Self::from_layers(profile, Some(&value))
    }

    /// Applies a `dotted.key=value` override. The value is parsed as JSON when
    /// possible and taken as a string otherwise.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
        let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override {key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.augment.validate()?;
        self.mixup.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.head.in_dim != self.variant.feature_dim() {
            return Err(Error::Config(format!(
                "head.in_dim {} does not match the {} feature width {}",
                self.head.in_dim,
                self.variant,
                self.variant.feature_dim()
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| !(*f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {:?}",
                self.split_fractions
            )));
        }
        match self.profile {
            Profile::Fast => {
                if self.variant != Variant::B0 {
                    return Err(Error::Config("the fast profile runs the b0 backbone".into()));
                }
                if self.schedule.total_epochs > FAST_MAX_EPOCHS {
                    return Err(Error::Config(format!(
                        "the fast profile is capped at {FAST_MAX_EPOCHS} epochs, got {}",
                        self.schedule.total_epochs
                    )));
                }
            }
            Profile::Full => {
                if self.variant != Variant::B3 {
                    return Err(Error::Config("the full profile runs the b3 backbone".into()));
                }
                if self.schedule.total_epochs != FULL_EPOCHS {
                    log::warn!("full profile with {} epochs instead of {FULL_EPOCHS}", self.schedule.total_epochs);
                }
            }
        }
        Ok(())
    }

    pub fn backbone_init(&self) -> Result<BackboneInit> {
        BackboneInit::resolve(self.pretrained, self.backbone_weights.as_deref())
    }

    pub fn unfreeze_at(&self) -> usize {
        self.unfreeze_epoch.unwrap_or(self.schedule.warmup_epochs)
    }

    /// SHA-256 over the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

fn merge(base: &mut Value, overlay: &Value, path: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(Error::Config(format!("unknown config key {here:?}"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        let fast = TrainConfig::for_profile(Profile::Fast);
        fast.validate().unwrap();
        assert_eq!(fast.variant, Variant::B0);
        assert!(fast.schedule.total_epochs <= FAST_MAX_EPOCHS);
        let full = TrainConfig::for_profile(Profile::Full);
        assert_eq!((full.variant, full.schedule.total_epochs), (Variant::B3, 80));
        full.validate().unwrap();
    }

    #[test]
    fn fast_profile_epoch_cap() {
        let mut cfg = TrainConfig::for_profile(Profile::Fast);
        cfg.apply_override("schedule.total_epochs=13").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let mut cfg = TrainConfig::for_profile(Profile::Fast);
        cfg.apply_override("mixup.alpha=0.4").unwrap();
        cfg.apply_override("seed=7").unwrap();
        assert_eq!(cfg.mixup.alpha, 0.4);
        assert_eq!(cfg.seed, 7);
        assert!(cfg.apply_override("mixup.gamma=1").is_err());
        assert!(cfg.apply_override("seed=abc").is_err());
        assert!(cfg.apply_override("noequals").is_err());
    }

    #[test]
    fn partial_file_layers_over_profile() {
        let overlay = serde_json::json!({"schedule": {"total_epochs": 3}, "batch_size": 8});
        let cfg = TrainConfig::from_layers(Profile::Fast, Some(&overlay)).unwrap();
        assert_eq!(cfg.schedule.total_epochs, 3);
        assert_eq!(cfg.schedule.eta_max, FAST_ETA_MAX);
        assert_eq!(cfg.batch_size, 8);
        let bad = serde_json::json!({"schedule": {"epochs": 3}});
        assert!(TrainConfig::from_layers(Profile::Fast, Some(&bad)).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::for_profile(Profile::Fast);
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed += 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn round_trip_json() {
        let cfg = TrainConfig::for_profile(Profile::Full);
        let back: TrainConfig = serde_json::from_str(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, back);
    }
}
