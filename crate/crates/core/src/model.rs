//! EfficientNet backbone with the three-layer screening head.
//!
//! The trunk comes from `tch::vision::efficientnet`. Its stock classifier is
//! turned into a fixed identity projection, so the trunk output is exactly
//! the globally pooled feature vector. The head on top is
//! `Linear -> BN -> GELU -> Dropout` twice, then `Linear` to the class logits.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tch::nn::{self, ModuleT};
use tch::{Device, Kind, Tensor};

use crate::augment::{EvalTransform, ImageTensor};
use crate::error::{Error, Result};

const BACKBONE: &str = "backbone";
const HEAD: &str = "head";
const PASSTHROUGH: &str = "backbone.classifier.";

/// Optimizer parameter group indices.
/// Running-statistics momentum of the backbone's BatchNorm layers.
pub const BACKBONE_BN_MOMENTUM: f64 = 0.01;

pub const HEAD_GROUP: usize = 0;
pub const BACKBONE_GROUP: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    B0,
    B3,
}

impl Variant {
    /// Width of the pooled feature vector.
    pub fn feature_dim(self) -> i64 {
        match self {
            Variant::B0 => 1280,
            Variant::B3 => 1536,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::B0 => "b0",
            Variant::B3 => "b3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub in_dim: i64,
    pub hidden_dims: Vec<i64>,
    pub dropout_rates: Vec<f64>,
    pub num_classes: i64,
    pub activation: Activation,
    pub batch_norm: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig::for_variant(Variant::B3)
    }
}

impl HeadConfig {
    pub fn for_variant(variant: Variant) -> Self {
        HeadConfig {
            in_dim: variant.feature_dim(),
            hidden_dims: vec![512, 256],
            dropout_rates: vec![0.45, 0.35],
            num_classes: 2,
            activation: Activation::Gelu,
            batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.len() != 2 || self.dropout_rates.len() != 2 {
            return Err(Error::Config("head needs exactly two hidden layers and two dropout rates".into()));
        }
        if let Some(p) = self.dropout_rates.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Config(format!("dropout rates must be in (0, 1), got {p}")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.in_dim <= 0 || self.hidden_dims.iter().any(|&d| d <= 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Trainable parameters: three affine layers plus two BN scale/shift pairs.
    pub fn parameter_count(&self) -> i64 {
        let dims = [self.in_dim, self.hidden_dims[0], self.hidden_dims[1], self.num_classes];
        let affine: i64 = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let bn: i64 = if self.batch_norm { 2 * (self.hidden_dims[0] + self.hidden_dims[1]) } else { 0 };
        affine + bn
    }
}

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneInit {
    Random,
    Pretrained(PathBuf),
}

impl BackboneInit {
    /// `pretrained = true` without a readable weights file is an error, never a silent random init.
    pub fn resolve(pretrained: bool, weights: Option<&Path>) -> Result<Self> {
        if !pretrained {
            return Ok(BackboneInit::Random);
        }
        match weights {
            Some(p) if p.is_file() => Ok(BackboneInit::Pretrained(p.to_path_buf())),
            Some(p) => Err(Error::PretrainedUnavailable(format!("{} does not exist", p.display()))),
            None => Err(Error::PretrainedUnavailable(
                "no backbone weights file configured (set `backbone_weights` or ANEMIA_BACKBONE_WEIGHTS)".into(),
            )),
        }
    }
}

#[derive(Debug)]
struct Head {
    fc1: nn::Linear,
    bn1: Option<nn::BatchNorm>,
    fc2: nn::Linear,
    bn2: Option<nn::BatchNorm>,
    fc3: nn::Linear,
    dropout: [f64; 2],
}

/// Truncated normal (cut at two standard deviations) with fan-in scaling, zero bias.
fn init_linear(p: nn::Path, fan_in: i64, fan_out: i64) -> nn::Linear {
    let cfg = nn::LinearConfig { ws_init: nn::Init::Const(0.0), bs_init: Some(nn::Init::Const(0.0)), bias: true };
    let mut lin = nn::linear(p, fan_in, fan_out, cfg);
    let std = 1.0 / (fan_in as f64).sqrt();
    tch::no_grad(|| {
        let mut sample = Tensor::randn([fan_out, fan_in], (Kind::Float, lin.ws.device()));
        loop {
            let outside = sample.abs().gt(2.0);
            if outside.sum(Kind::Int64).int64_value(&[]) == 0 {
                break;
            }
            let fresh = Tensor::randn([fan_out, fan_in], (Kind::Float, lin.ws.device()));
            sample = sample.where_self(&outside.logical_not(), &fresh);
        }
        lin.ws.copy_(&(sample * std));
    });
    lin
}

impl Head {
    fn new(p: nn::Path, cfg: &HeadConfig) -> Self {
        let [h1, h2] = [cfg.hidden_dims[0], cfg.hidden_dims[1]];
        let bn = |name: &str, dim| cfg.batch_norm.then(|| nn::batch_norm1d(&p / name, dim, Default::default()));
        Head {
            fc1: init_linear(&p / "fc1", cfg.in_dim, h1),
            bn1: bn("bn1", h1),
            fc2: init_linear(&p / "fc2", h1, h2),
            bn2: bn("bn2", h2),
            fc3: init_linear(&p / "fc3", h2, cfg.num_classes),
            dropout: [cfg.dropout_rates[0], cfg.dropout_rates[1]],
        }
    }

    fn forward_t(&self, z: &Tensor, train: bool) -> Tensor {
        let block = |x: Tensor, fc: &nn::Linear, bn: &Option<nn::BatchNorm>, p: f64| {
            let x = x.apply(fc);
            let x = match bn {
                Some(bn) => x.apply_t(bn, train),
                None => x,
            };
            x.gelu("none").dropout(p, train)
        };
        let x = block(z.shallow_clone(), &self.fc1, &self.bn1, self.dropout[0]);
        let x = block(x, &self.fc2, &self.bn2, self.dropout[1]);
        x.apply(&self.fc3)
    }
}

/// Learning rates per parameter group and the group membership.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGroups {
    pub head_lr: f64,
    pub backbone_lr: f64,
    pub head: Vec<String>,
    pub backbone: Vec<String>,
}

pub struct ModelBundle {
    vs: nn::VarStore,
    backbone: Box<dyn ModuleT>,
    head: Head,
    variant: Variant,
    head_config: HeadConfig,
    head_params: Vec<String>,
    backbone_params: Vec<String>,
    backbone_trainable: bool,
    pub version: String,
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle")
            .field("variant", &self.variant)
            .field("head_config", &self.head_config)
            .field("backbone_trainable", &self.backbone_trainable)
            .field("version", &self.version)
            .finish()
    }
}

pub fn build_model(variant: Variant, head_config: &HeadConfig, init: &BackboneInit) -> Result<ModelBundle> {
    build_model_on(variant, head_config, init, Device::Cpu)
}

pub fn build_model_on(
    variant: Variant,
    head_config: &HeadConfig,
    init: &BackboneInit,
    device: Device,
) -> Result<ModelBundle> {
    head_config.validate()?;
    if head_config.in_dim != variant.feature_dim() {
        return Err(Error::Config(format!(
            "head in_dim {} does not match {variant} feature width {}",
            head_config.in_dim,
            variant.feature_dim()
        )));
    }
    let vs = nn::VarStore::new(device);
    let root = vs.root();
    let bb_path = root.set_group(BACKBONE_GROUP) / BACKBONE;
    let width = variant.feature_dim();
    let backbone: Box<dyn ModuleT> = match variant {
        Variant::B0 => Box::new(tch::vision::efficientnet::b0(&bb_path, width)),
        Variant::B3 => Box::new(tch::vision::efficientnet::b3(&bb_path, width)),
    };
    let head = Head::new(root.set_group(HEAD_GROUP) / HEAD, head_config);

    let mut head_params = Vec::new();
    let mut backbone_params = Vec::new();
    for (name, mut t) in vs.variables() {
        if name.starts_with(PASSTHROUGH) {
            tch::no_grad(|| {
                if t.dim() == 2 {
                    t.copy_(&Tensor::eye(width, (Kind::Float, device)));
                } else {
                    let _ = t.zero_();
                }
            });
            let _ = t.set_requires_grad(false);
        } else if t.requires_grad() {
            if name.starts_with(HEAD) {
                head_params.push(name);
            } else {
                backbone_params.push(name);
            }
        }
    }
    head_params.sort();
    backbone_params.sort();

    let bundle = ModelBundle {
        vs,
        backbone,
        head,
        variant,
        head_config: head_config.clone(),
        head_params,
        backbone_params,
        backbone_trainable: true,
        version: "untrained".into(),
    };
    if let BackboneInit::Pretrained(path) = init {
        bundle.load_backbone_weights(path)?;
    }
    Ok(bundle)
}

impl ModelBundle {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn head_config(&self) -> &HeadConfig {
        &self.head_config
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    pub fn device(&self) -> Device {
        self.vs.device()
    }

    pub fn backbone_trainable(&self) -> bool {
        self.backbone_trainable
    }

    pub fn head_parameter_names(&self) -> &[String] {
        &self.head_params
    }

    pub fn backbone_parameter_names(&self) -> &[String] {
        &self.backbone_params
    }

    /// Copies backbone weights from a safetensors file. Names may carry the
    /// `backbone.` prefix or not; every backbone weight must be present.
    fn load_backbone_weights(&self, path: &Path) -> Result<()> {
        let tensors = Tensor::read_safetensors(path)
            .map_err(|e| Error::PretrainedUnavailable(format!("{}: {e}", path.display())))?;
        let by_name: std::collections::HashMap<String, Tensor> = tensors
            .into_iter()
            .map(|(n, t)| (n.strip_prefix("backbone.").map(str::to_owned).unwrap_or(n), t))
            .collect();
        let mut missing = Vec::new();
        for (name, mut var) in self.vs.variables() {
            let Some(short) = name.strip_prefix("backbone.") else { continue };
            if name.starts_with(PASSTHROUGH) {
                continue;
            }
            match by_name.get(short) {
                Some(src) if src.size() == var.size() => {
                    tch::no_grad(|| var.copy_(&src.to_kind(var.kind())));
                }
                _ => missing.push(name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::PretrainedUnavailable(format!(
                "{} lacks {} backbone tensor(s), first: {}",
                path.display(),
                missing.len(),
                missing[0]
            )));
        }
        Ok(())
    }

    /// Pooled backbone features, shape `(batch, feature_dim)`.
    pub fn features(&self, xs: &Tensor, train: bool) -> Tensor {
        self.backbone.forward_t(xs, train)
    }

    /// Class logits, shape `(batch, num_classes)`.
    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        self.head_forward_t(&self.features(xs, train), train)
    }

    /// Head logits for precomputed features.
    pub fn head_forward_t(&self, features: &Tensor, train: bool) -> Tensor {
        self.head.forward_t(features, train)
    }

    /// Training-mode logits. A frozen backbone runs without gradient tracking
    /// so only the head enters the autograd graph.
    pub fn train_forward(&self, xs: &Tensor) -> Tensor {
        let features =
            if self.backbone_trainable { self.features(xs, true) } else { tch::no_grad(|| self.features(xs, true)) };
        self.head.forward_t(&features, true)
    }

    /// Replaces the backbone's BatchNorm running statistics with the average of
    /// the per-batch statistics over `batches`. With momentum 0.01 the running
    /// estimates of a freshly initialised trunk lag far behind the activations.
    /// Returns the number of layers updated.
    pub fn recalibrate_batch_norm(&self, batches: &[Tensor]) -> usize {
        if batches.is_empty() {
            return 0;
        }
        let vars = self.vs.variables();
        let mut buffers: Vec<(Tensor, Tensor)> = vars
            .iter()
            .filter(|(n, _)| n.starts_with(BACKBONE) && (n.ends_with("running_mean") || n.ends_with("running_var")))
            .map(|(_, t)| (t.shallow_clone(), t.zeros_like()))
            .collect();
        tch::no_grad(|| {
            for xs in batches {
                for (buf, _) in buffers.iter_mut() {
                    let _ = buf.zero_();
                }
                let _ = self.features(xs, true);
                for (buf, acc) in buffers.iter_mut() {
                    let _ = acc.g_add_(&(&*buf / BACKBONE_BN_MOMENTUM));
                }
            }
            for (buf, acc) in buffers.iter_mut() {
                buf.copy_(&(&*acc / batches.len() as f64));
            }
        });
        buffers.len() / 2
    }

    /// Softmax probabilities in evaluation mode without gradient tracking.
    pub fn predict_proba(&self, xs: &Tensor) -> Tensor {
        tch::no_grad(|| self.forward_t(xs, false).softmax(-1, Kind::Double))
    }

    /// Enables or disables gradients for every backbone weight; the head stays trainable.
    pub fn set_backbone_trainable(&mut self, flag: bool) {
        let vars = self.vs.variables();
        for name in &self.backbone_params {
            if let Some(t) = vars.get(name) {
                let _ = t.set_requires_grad(flag);
            }
        }
        self.backbone_trainable = flag;
    }

    /// Parameters that currently require gradients.
    pub fn trainable_parameter_names(&self) -> BTreeSet<String> {
        self.vs.variables().into_iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n).collect()
    }

    pub fn parameter_groups(&self, base_lr: f64, backbone_factor: f64) -> Result<ParameterGroups> {
        if !(base_lr > 0.0) {
            return Err(Error::Config(format!("base learning rate must be positive, got {base_lr}")));
        }
        if !(backbone_factor > 0.0) {
            return Err(Error::Config(format!("backbone lr factor must be positive, got {backbone_factor}")));
        }
        Ok(ParameterGroups {
            head_lr: base_lr,
            backbone_lr: base_lr * backbone_factor,
            head: self.head_params.clone(),
            backbone: self.backbone_params.clone(),
        })
    }

    /// Snapshot of all weights and buffers (detached copies).
    pub fn snapshot(&self) -> std::collections::BTreeMap<String, Tensor> {
        self.vs.variables().into_iter().map(|(n, t)| (n, t.detach().copy())).collect()
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        Ok(self.vs.save(path)?)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        Ok(self.vs.load(path)?)
    }
}

/// Stacks `(3, H, W)` images into a `(N, 3, H, W)` float tensor.
pub fn batch_tensor(images: &[ImageTensor], device: Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.dim() != (c, h, w) {
            return Err(Error::Shape(format!("image {:?} does not match {:?}", img.dim(), (c, h, w))));
        }
        match img.as_slice() {
            Some(s) => data.extend_from_slice(s),
            None => data.extend(img.iter().copied()),
        }
    }
    Ok(Tensor::from_slice(&data).view([images.len() as i64, c as i64, h as i64, w as i64]).to_device(device))
}

/// JSON sidecar written next to every checkpoint's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: Variant,
    pub head_config: HeadConfig,
    pub val_acc: f64,
    pub epoch: usize,
    pub config_hash: String,
    pub eval_transform: EvalTransform,
    pub class_names: Vec<String>,
}

impl CheckpointMeta {
    pub fn version(&self) -> String {
        let hash: String = self.config_hash.chars().take(12).collect();
        format!("{}-{hash}-e{}", self.variant, self.epoch)
    }
}

/// `<stem>.safetensors` and `<stem>.json` inside a directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointPaths {
    pub weights: PathBuf,
    pub meta: PathBuf,
}

impl CheckpointPaths {
    pub fn new(dir: &Path, stem: &str) -> Self {
        CheckpointPaths { weights: dir.join(format!("{stem}.safetensors")), meta: dir.join(format!("{stem}.json")) }
    }

    /// Accepts either the weights file or the sidecar path.
    pub fn from_any(path: &Path) -> Self {
        CheckpointPaths { weights: path.with_extension("safetensors"), meta: path.with_extension("json") }
    }
}

pub fn save_checkpoint(bundle: &ModelBundle, meta: &CheckpointMeta, paths: &CheckpointPaths) -> Result<()> {
    if let Some(dir) = paths.weights.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    bundle.save_weights(&paths.weights)?;
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(&paths.meta, json).map_err(|e| Error::io(&paths.meta, e))
}

pub fn read_checkpoint_meta(paths: &CheckpointPaths) -> Result<CheckpointMeta> {
    let text = std::fs::read_to_string(&paths.meta).map_err(|e| Error::io(&paths.meta, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Frozen evaluation model plus the transform it was trained with.
#[derive(Debug)]
pub struct InferenceModel {
    bundle: ModelBundle,
    meta: CheckpointMeta,
}

impl InferenceModel {
    pub fn load(path: &Path) -> Result<Self> {
        let paths = CheckpointPaths::from_any(path);
        let meta = read_checkpoint_meta(&paths)?;
        let mut bundle = build_model(meta.variant, &meta.head_config, &BackboneInit::Random)?;
        bundle.load_weights(&paths.weights)?;
        bundle.set_backbone_trainable(false);
        bundle.version = meta.version();
        Ok(InferenceModel { bundle, meta })
    }

    /// Wraps an in-memory bundle (used by tests and the evaluation command).
    pub fn from_bundle(mut bundle: ModelBundle, meta: CheckpointMeta) -> Self {
        bundle.set_backbone_trainable(false);
        bundle.version = meta.version();
        InferenceModel { bundle, meta }
    }

    pub fn version(&self) -> &str {
        &self.bundle.version
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn eval_transform(&self) -> EvalTransform {
        self.meta.eval_transform
    }

    /// Class probabilities for one normalised image.
    pub fn predict_tensor(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let xs = batch_tensor(std::slice::from_ref(img), self.bundle.device())?;
        let probs = self.bundle.predict_proba(&xs);
        Ok(Vec::<f64>::try_from(probs.view([-1]))?)
    }

    /// Class probabilities for a batch; one row per image.
    pub fn predict_batch(&self, imgs: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let xs = batch_tensor(imgs, self.bundle.device())?;
        let probs = self.bundle.predict_proba(&xs);
        Ok(Vec::<Vec<f64>>::try_from(probs)?)
    }
}
