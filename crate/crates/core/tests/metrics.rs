use anemia_core::metrics::*;
use anemia_core::training::EpochRecord;
use proptest::prelude::*;

fn pair_counting_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut concordant = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    concordant += 1.0;
                } else if scores[i] == scores[j] {
                    concordant += 0.5;
                }
            }
        }
    }
    concordant / pairs
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=50).prop_flat_map(|n| {
        (prop::collection::vec((0u8..20).prop_map(|q| f64::from(q) / 19.0), n), prop::collection::vec(any::<bool>(), n))
            .prop_filter("both classes", |(_, l)| l.iter().any(|&b| b) && l.iter().any(|&b| !b))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn auc_equals_pair_counting((scores, labels) in labelled_scores()) {
        let auc = roc_auc(&scores, &labels).unwrap();
        prop_assert!((auc - pair_counting_auc(&scores, &labels)).abs() < 1e-9);
    }

    #[test]
    fn auc_invariant_under_monotone_transform((scores, labels) in labelled_scores()) {
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert!((roc_auc(&scores, &labels).unwrap() - roc_auc(&warped, &labels).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn weighted_averages_are_support_weighted(counts in prop::collection::vec(0u64..60, 4)) {
        let m = ConfusionMatrix::from_counts(vec![counts[..2].to_vec(), counts[2..].to_vec()]).unwrap();
        prop_assume!(m.total() > 0);
        let d = derive_metrics(&m).unwrap();
        let total = m.total() as f64;
        let f1: f64 = d.per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / total;
        prop_assert!((d.weighted_f1 - f1).abs() < 1e-9);
        for v in [d.accuracy, d.sensitivity, d.specificity, d.weighted_f1, d.weighted_precision, d.weighted_recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn figure_matrix_sensitivity_specificity() {
    let m = ConfusionMatrix::from_counts(vec![vec![96, 4], vec![5, 95]]).unwrap();
    let d = derive_metrics(&m).unwrap();
    assert_eq!(d.sensitivity, 0.96);
    assert_eq!(d.specificity, 0.95);
    assert!((d.accuracy - 191.0 / 200.0).abs() < 1e-12);
}

#[test]
fn table_level_weighted_f1_is_consistent() {
    // Anemic precision 0.95 / recall 0.96 and the mirror image for the other class.
    let m = ConfusionMatrix::from_counts(vec![vec![96, 4], vec![5, 95]]).unwrap();
    let d = derive_metrics(&m).unwrap();
    assert!((d.per_class[0].precision - 96.0 / 101.0).abs() < 1e-12);
    let by_hand = (d.per_class[0].f1 * 100.0 + d.per_class[1].f1 * 100.0) / 200.0;
    assert!((d.weighted_f1 - by_hand).abs() < 1e-12);
    assert_eq!((d.weighted_f1 * 1000.0).round() / 1000.0, 0.955, "{}", d.weighted_f1);
    // With per-class precision/recall of exactly (0.95, 0.96) and (0.96, 0.95),
    // both F1 values coincide, so the weighted mean is independent of support.
    let f1 = 2.0 * 0.95 * 0.96 / (0.95 + 0.96);
    for support in [(50.0, 150.0), (100.0, 100.0), (150.0, 50.0)] {
        let w = (f1 * support.0 + f1 * support.1) / (support.0 + support.1);
        assert_eq!((w * 1000.0_f64).round() / 1000.0, 0.955);
    }
}

#[test]
fn shuffled_labels_average_half() {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let scores: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
    let mut labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
    let trials = 10_000;
    let mut sum = 0.0;
    for _ in 0..trials {
        labels.shuffle(&mut rng);
        sum += roc_auc(&scores, &labels).unwrap();
    }
    let mean = sum / trials as f64;
    assert!((mean - 0.5).abs() < 0.02, "{mean}");
}

#[test]
fn export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = confusion(&[0, 0, 1, 1, 1, 0], &[0, 0, 1, 1, 0, 1], 2).unwrap();
    let mut d = derive_metrics(&m).unwrap();
    let scores = [0.9, 0.8, 0.2, 0.3, 0.4, 0.6];
    let positive = [true, true, false, false, true, false];
    d.auc_roc = Some(roc_auc(&scores, &positive).unwrap());
    let roc = roc_points(&scores, &positive).unwrap();
    let history =
        vec![EpochRecord { epoch: 1, train_loss: 0.7, train_acc: 0.5, val_loss: 0.69, val_acc: 0.5, lr: 1e-3 }];
    let files = export_report(&d, &roc, &history, dir.path()).unwrap();
    for f in [&files.metrics, &files.confusion, &files.roc, &files.history] {
        assert!(f.is_file());
    }
    let back = read_metrics(&files.metrics).unwrap();
    assert_eq!(back.confusion, m);
    let again = derive_metrics(&back.confusion).unwrap();
    assert!((again.weighted_f1 - d.weighted_f1).abs() < 1e-9);
    assert!((back.weighted_f1 - d.weighted_f1).abs() < 1e-6);
    let hist = std::fs::read_to_string(&files.history).unwrap();
    assert!(hist.contains("1,0.700000,0.500000,0.690000,0.500000,0.001000"));
    let roc_text = std::fs::read_to_string(&files.roc).unwrap();
    assert_eq!(roc_text.lines().count(), roc.len() + 1);
}

#[test]
fn empty_history_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let m = ConfusionMatrix::from_counts(vec![vec![1, 0], vec![0, 1]]).unwrap();
    let d = derive_metrics(&m).unwrap();
    let files = export_report(&d, &[], &[], dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(&files.history).unwrap(), "epoch,train_loss,train_acc,val_loss,val_acc,lr\n");
}
