use std::collections::BTreeSet;

use anemia_core::model::*;
use anemia_core::training::{smoothed_weighted_ce, AdamW, LossConfig, OptimizerConfig};
use tch::{Device, Kind, Tensor};

fn b0() -> ModelBundle {
    tch::manual_seed(0);
    build_model(Variant::B0, &HeadConfig::for_variant(Variant::B0), &BackboneInit::Random).unwrap()
}

fn input(n: i64, side: i64) -> Tensor {
    Tensor::randn([n, 3, side, side], (Kind::Float, Device::Cpu))
}

fn changed(
    before: &std::collections::BTreeMap<String, Tensor>,
    after: &std::collections::BTreeMap<String, Tensor>,
    names: &[String],
) -> usize {
    names.iter().filter(|n| !before[*n].equal(&after[*n])).count()
}

fn one_step(bundle: &ModelBundle, opt: &mut AdamW) {
    let xs = input(4, 64);
    let ys = Tensor::from_slice(&[0i64, 1, 0, 1]);
    let vars = bundle.var_store().variables();
    AdamW::zero_grad(vars.values());
    let logits = bundle.train_forward(&xs).to_kind(Kind::Double);
    smoothed_weighted_ce(&logits, &ys, &LossConfig::default()).unwrap().backward();
    let groups = bundle.parameter_groups(1e-2, 0.1).unwrap();
    let params: Vec<(String, Tensor, f64)> = groups
        .head
        .iter()
        .map(|n| (n.clone(), vars[n].shallow_clone(), groups.head_lr))
        .chain(groups.backbone.iter().map(|n| (n.clone(), vars[n].shallow_clone(), groups.backbone_lr)))
        .collect();
    opt.step(params.iter().map(|(n, t, lr)| (n.as_str(), t, *lr)));
}

#[test]
fn logits_shape_and_softmax_rows() {
    let bundle = b0();
    let xs = input(4, 64);
    let logits = tch::no_grad(|| bundle.forward_t(&xs, false));
    assert_eq!(logits.size(), vec![4, 2]);
    let probs = bundle.predict_proba(&xs);
    let sums = Vec::<f64>::try_from(probs.sum_dim_intlist([1i64].as_slice(), false, Kind::Double)).unwrap();
    for s in sums {
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn eval_mode_is_deterministic() {
    let bundle = b0();
    let xs = input(2, 64);
    let a = bundle.predict_proba(&xs);
    let b = bundle.predict_proba(&xs);
    assert!(a.equal(&b));
}

#[test]
fn feature_width_matches_variant() {
    let bundle = b0();
    let f = tch::no_grad(|| bundle.features(&input(2, 64), false));
    assert_eq!(f.size(), vec![2, 1280]);
    let mut bad = HeadConfig::for_variant(Variant::B0);
    bad.in_dim = 1536;
    assert!(build_model(Variant::B0, &bad, &BackboneInit::Random).is_err());
}

#[test]
fn frozen_then_unfrozen_training_step() {
    let mut bundle = b0();
    let mut opt = AdamW::new(OptimizerConfig::default());
    bundle.set_backbone_trainable(false);
    let before = bundle.snapshot();
    one_step(&bundle, &mut opt);
    let after = bundle.snapshot();
    assert_eq!(changed(&before, &after, bundle.backbone_parameter_names()), 0);
    assert!(changed(&before, &after, bundle.head_parameter_names()) > 0);

    bundle.set_backbone_trainable(true);
    let before = bundle.snapshot();
    one_step(&bundle, &mut opt);
    let after = bundle.snapshot();
    assert!(changed(&before, &after, bundle.backbone_parameter_names()) > 0);
}

#[test]
fn toggling_restores_trainability() {
    let mut bundle = b0();
    let original = bundle.trainable_parameter_names();
    bundle.set_backbone_trainable(false);
    assert_eq!(bundle.trainable_parameter_names(), bundle.head_parameter_names().iter().cloned().collect());
    bundle.set_backbone_trainable(true);
    assert_eq!(bundle.trainable_parameter_names(), original);
}

#[test]
fn parameter_groups_partition_trainable_set() {
    let bundle = b0();
    let groups = bundle.parameter_groups(1e-3, 0.1).unwrap();
    assert_eq!((groups.head_lr, groups.backbone_lr), (1e-3, 1e-3 * 0.1));
    let head: BTreeSet<_> = groups.head.iter().cloned().collect();
    let backbone: BTreeSet<_> = groups.backbone.iter().cloned().collect();
    assert!(head.is_disjoint(&backbone));
    let union: BTreeSet<_> = head.union(&backbone).cloned().collect();
    assert_eq!(union, bundle.trainable_parameter_names());
    let same = bundle.parameter_groups(1e-3, 1.0).unwrap();
    assert_eq!(same.head_lr, same.backbone_lr);
    assert!(bundle.parameter_groups(1e-3, 0.0).is_err());
    assert!(bundle.parameter_groups(0.0, 0.1).is_err());
}

#[test]
fn head_gradient_matches_finite_differences() {
    let mut bundle = b0();
    bundle.set_backbone_trainable(false);
    bundle.var_store_mut().double();
    let zs = Tensor::randn([4, Variant::B0.feature_dim()], (Kind::Double, Device::Cpu));
    let ys = Tensor::from_slice(&[0i64, 1, 1, 0]);
    let cfg = LossConfig::default();
    let loss_at = |b: &ModelBundle| smoothed_weighted_ce(&b.head_forward_t(&zs, false), &ys, &cfg).unwrap();

    let vars = bundle.var_store().variables();
    for name in ["head.fc1.weight", "head.fc3.weight", "head.fc3.bias"] {
        let mut w = vars[name].shallow_clone();
        w.zero_grad();
        loss_at(&bundle).backward();
        let grad = w.grad().copy();
        let flat = grad.view([-1]);
        let idx = flat.abs().argmax(0, false).int64_value(&[]);
        let analytic = flat.double_value(&[idx]);
        let h = 1e-6;
        let original = w.view([-1]).double_value(&[idx]);
        let set = |v: f64| {
            tch::no_grad(|| {
                let _ = w.view([-1]).get(idx).fill_(v);
            })
        };
        set(original + h);
        let up = tch::no_grad(|| loss_at(&bundle).double_value(&[]));
        set(original - h);
        let down = tch::no_grad(|| loss_at(&bundle).double_value(&[]));
        set(original);
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        assert!(rel < 1e-3, "{name}: analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let bundle = b0();
    let dir = tempfile::tempdir().unwrap();
    let meta = CheckpointMeta {
        variant: Variant::B0,
        head_config: bundle.head_config().clone(),
        val_acc: 0.75,
        epoch: 3,
        config_hash: "abcdef0123456789".into(),
        eval_transform: anemia_core::augment::EvalTransform { resize_px: 73, crop_px: 64 },
        class_names: vec!["anemic".into(), "non_anemic".into()],
    };
    let paths = CheckpointPaths::new(dir.path(), "best");
    save_checkpoint(&bundle, &meta, &paths).unwrap();
    let loaded = InferenceModel::load(&paths.weights).unwrap();
    assert_eq!(loaded.meta(), &meta);
    assert_eq!(loaded.version(), "b0-abcdef012345-e3");
    let xs = input(2, 64);
    assert!(loaded.bundle().predict_proba(&xs).allclose(&bundle.predict_proba(&xs), 1e-6, 1e-6, false));
    let via_sidecar = InferenceModel::load(&paths.meta).unwrap();
    assert_eq!(via_sidecar.version(), loaded.version());
}

#[test]
fn pretrained_without_weights_is_explained() {
    let err = BackboneInit::resolve(true, None).unwrap_err().to_string();
    assert!(err.contains("backbone_weights"), "{err}");
}
