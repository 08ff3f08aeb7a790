//! Randomized invariants shared by the `properties` test target and the
//! acceptance runner. Each check runs `cases` generated inputs and returns
//! the first failure, shrunk, as text.

use plasmodium_core::dataset::{split_labels, DatasetSplit};
use plasmodium_core::metrics::{auc_roc, confusion, report, roc_curve, ClassMetrics, ConfusionMatrix, EvaluationReport};
use plasmodium_core::preprocess::{apply_augment, augment, standardize_tensor, AugmentParams};
use plasmodium_core::{AugmentConfig, Label, PreprocessProfile, Scheme};
use plasmodium_nn::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Check = fn(u32) -> Result<(), String>;

pub const ALL: &[(&str, Check)] = &[
    ("confusion matches a counting oracle", confusion_matches_counting_oracle),
    ("report invariants", report_invariants),
    ("MCC bounds and marginal form", mcc_matches_marginal_form),
    ("relabel symmetry", relabel_symmetry),
    ("AUC equals pairwise concordance (<= 8 samples)", auc_equals_concordance),
    ("AUC invariant under increasing maps", auc_monotone_invariance),
    ("ROC curve monotone", roc_curve_monotone),
    ("splits partition the corpus", splits_partition),
    ("splits deterministic per seed", splits_deterministic),
    ("transfer train/validation balanced", transfer_balanced),
    ("augmentation keeps shape and range", augmentation_range),
    ("augmentation reproducible per (epoch, index)", augmentation_reproducible),
    ("flips are involutions", flips_are_involutions),
    ("identity augmentation", identity_augmentation),
    ("standardize idempotent", standardize_idempotent),
];

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new(config).run(&strategy, test).map_err(|e| e.to_string())
}

/// Probability that a random positive outranks a random negative, ties 1/2.
pub fn concordance(truth: &[usize], scores: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &ti) in truth.iter().enumerate() {
        for (j, &tj) in truth.iter().enumerate() {
            if ti == 1 && tj == 0 {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn counts() -> impl Strategy<Value = (u64, u64, u64, u64)> {
    (0u64..500, 0u64..500, 0u64..500, 0u64..500)
}

pub fn confusion_matches_counting_oracle(cases: u32) -> Result<(), String> {
    run(cases, prop::collection::vec((0usize..2, 0usize..2), 0..200), |pairs| {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let cm = confusion(&truth, &pred).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let n = (0..truth.len()).filter(|&k| truth[k] == i && pred[k] == j).count();
                prop_assert_eq!(cm.counts[i][j], n as u64);
            }
        }
        prop_assert_eq!(cm.total() as usize, pairs.len());
        Ok(())
    })
}

fn check_invariants(r: &EvaluationReport, counts: [[u64; 2]; 2]) -> Result<(), TestCaseError> {
    let total: u64 = counts.iter().flatten().sum();
    prop_assert_eq!(r.confusion.total(), total);
    for c in 0..2 {
        prop_assert_eq!(r.per_class[c].support, counts[c][0] + counts[c][1]);
    }
    if total > 0 {
        let acc = (counts[0][0] + counts[1][1]) as f64 / total as f64;
        prop_assert!((r.accuracy - acc).abs() < 1e-12);
    }
    for c in &r.per_class {
        for v in [c.precision, c.recall, c.specificity, c.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if c.precision + c.recall > 0.0 {
            let f1 = 2.0 * c.precision * c.recall / (c.precision + c.recall);
            prop_assert!((c.f1 - f1).abs() < 1e-12);
        }
    }
    let mean = |f: fn(&ClassMetrics) -> f64| (f(&r.per_class[0]) + f(&r.per_class[1])) / 2.0;
    prop_assert!((r.macro_avg.precision - mean(|c| c.precision)).abs() < 1e-12);
    prop_assert!((r.macro_avg.recall - mean(|c| c.recall)).abs() < 1e-12);
    prop_assert!((r.macro_avg.f1 - mean(|c| c.f1)).abs() < 1e-12);
    if total > 0 {
        let weighted = |f: fn(&ClassMetrics) -> f64| {
            r.per_class.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
        };
        prop_assert!((r.weighted_avg.precision - weighted(|c| c.precision)).abs() < 1e-12);
        prop_assert!((r.weighted_avg.recall - weighted(|c| c.recall)).abs() < 1e-12);
        prop_assert!((r.weighted_avg.f1 - weighted(|c| c.f1)).abs() < 1e-12);
    }
    prop_assert!((0.0..=1.0).contains(&r.fpr) && (0.0..=1.0).contains(&r.fnr));
    Ok(())
}

pub fn report_invariants(cases: u32) -> Result<(), String> {
    run(cases, counts(), |(tn, fp, fn_, tp)| {
        let r = report(&ConfusionMatrix::from_counts(tn, fp, fn_, tp), None).unwrap();
        check_invariants(&r, [[tn, fp], [fn_, tp]])
    })
}

pub fn mcc_matches_marginal_form(cases: u32) -> Result<(), String> {
    run(cases, counts(), |(tn, fp, fn_, tp)| {
        let r = report(&ConfusionMatrix::from_counts(tn, fp, fn_, tp), None).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r.mcc));
        let n = (tn + fp + fn_ + tp) as f64;
        // (TP/N - S P) / sqrt(P S (1 - S) (1 - P)) with S, P the true and
        // predicted positive rates
        let s = (tp + fn_) as f64 / n;
        let p = (tp + fp) as f64 / n;
        let den = (p * s * (1.0 - s) * (1.0 - p)).sqrt();
        let want = if n == 0.0 || den == 0.0 { 0.0 } else { (tp as f64 / n - s * p) / den };
        prop_assert!((r.mcc - want).abs() < 1e-9, "{} vs {}", r.mcc, want);
        Ok(())
    })
}

pub fn relabel_symmetry(cases: u32) -> Result<(), String> {
    run(cases, counts(), |(tn, fp, fn_, tp)| {
        let r = report(&ConfusionMatrix::from_counts(tn, fp, fn_, tp), None).unwrap();
        // 0 <-> 1 on both truth and prediction
        let s = report(&ConfusionMatrix::from_counts(tp, fn_, fp, tn), None).unwrap();
        prop_assert!((r.accuracy - s.accuracy).abs() < 1e-12);
        prop_assert!((r.mcc - s.mcc).abs() < 1e-12);
        prop_assert_eq!(&r.per_class[0], &s.per_class[1]);
        prop_assert_eq!(&r.per_class[1], &s.per_class[0]);
        Ok(())
    })
}

pub fn auc_equals_concordance(cases: u32) -> Result<(), String> {
    run(cases, prop::collection::vec((0usize..2, 0u8..6), 2..=8), |samples| {
        let truth: Vec<usize> = samples.iter().map(|s| s.0).collect();
        let scores: Vec<f64> = samples.iter().map(|s| s.1 as f64 / 5.0).collect();
        let both = truth.contains(&0) && truth.contains(&1);
        match auc_roc(&truth, &scores) {
            Ok(a) => {
                prop_assert!(both);
                prop_assert!((a - concordance(&truth, &scores)).abs() < 1e-12);
            }
            Err(_) => prop_assert!(!both),
        }
        Ok(())
    })
}

/// Labels with both classes present.
fn two_class_samples(max_score: u16, len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<(usize, u16)>> {
    prop::collection::vec((0usize..2, 0u16..max_score), len).prop_map(|mut v| {
        v[0].0 = 0;
        v[1].0 = 1;
        v
    })
}

pub fn auc_monotone_invariance(cases: u32) -> Result<(), String> {
    run(cases, two_class_samples(1000, 2..60), |samples| {
        let truth: Vec<usize> = samples.iter().map(|s| s.0).collect();
        let scores: Vec<f64> = samples.iter().map(|s| s.1 as f64 / 1000.0).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (4.0 * s).exp() + s.powi(3)).collect();
        let a = auc_roc(&truth, &scores).unwrap();
        let b = auc_roc(&truth, &mapped).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        Ok(())
    })
}

pub fn roc_curve_monotone(cases: u32) -> Result<(), String> {
    run(cases, two_class_samples(10, 2..40), |samples| {
        let truth: Vec<usize> = samples.iter().map(|s| s.0).collect();
        let scores: Vec<f64> = samples.iter().map(|s| s.1 as f64).collect();
        let pts = roc_curve(&truth, &scores).unwrap();
        prop_assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in pts.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            prop_assert!(w[1].threshold < w[0].threshold);
        }
        Ok(())
    })
}

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![Just(Scheme::Svm), Just(Scheme::Cnn), Just(Scheme::Transfer)]
}

fn label_vec() -> impl Strategy<Value = Vec<Label>> {
    prop::collection::vec(any::<bool>(), 1..300)
        .prop_map(|bits| bits.iter().map(|&b| Label::ALL[b as usize]).collect())
}

pub fn splits_partition(cases: u32) -> Result<(), String> {
    run(cases, (label_vec(), scheme(), any::<u64>()), |(l, scheme, seed)| {
        let Ok(s) = split_labels(&l, scheme, seed) else {
            // only a transfer split may refuse, for want of a balanced core
            prop_assert_eq!(scheme, Scheme::Transfer);
            return Ok(());
        };
        prop_assert_eq!(s.total(), l.len());
        let mut seen = vec![false; l.len()];
        for &i in s.train.iter().chain(&s.validation).chain(&s.test) {
            prop_assert!(!seen[i], "index {} twice", i);
            seen[i] = true;
        }
        prop_assert!(seen.iter().all(|&v| v));
        Ok(())
    })
}

pub fn splits_deterministic(cases: u32) -> Result<(), String> {
    run(cases, (label_vec(), scheme(), any::<u64>()), |(l, scheme, seed)| {
        prop_assert_eq!(split_labels(&l, scheme, seed).ok(), split_labels(&l, scheme, seed).ok());
        Ok(())
    })
}

pub fn transfer_balanced(cases: u32) -> Result<(), String> {
    run(cases, (1usize..400, 1usize..400, any::<u64>()), |(n0, n1, seed)| {
        let mut l = vec![Label::Uninfected; n0];
        l.extend(vec![Label::Parasitized; n1]);
        if let Ok(s) = split_labels(&l, Scheme::Transfer, seed) {
            let t = DatasetSplit::class_counts(&s.train, &l);
            let v = DatasetSplit::class_counts(&s.validation, &l);
            prop_assert_eq!(t[0], t[1]);
            prop_assert_eq!(v[0], v[1]);
        }
        Ok(())
    })
}

fn image() -> impl Strategy<Value = Tensor> {
    (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f32..=1.0, h * w * 3).prop_map(move |v| Tensor::from_vec(&[h, w, 3], v).unwrap())
    })
}

fn augment_config() -> impl Strategy<Value = AugmentConfig> {
    (any::<bool>(), any::<bool>(), 0.0f32..=180.0, 0.0f32..=45.0, 0.0f32..=0.5, any::<u64>()).prop_map(
        |(h, v, r, s, t, seed)| AugmentConfig {
            horizontal_flip: h,
            vertical_flip: v,
            rotation_range: r,
            shear_range: s,
            shift_range: t,
            seed,
        },
    )
}

pub fn augmentation_range(cases: u32) -> Result<(), String> {
    run(cases, (image(), augment_config(), any::<u64>()), |(img, cfg, draw)| {
        let out = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(draw)).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        Ok(())
    })
}

pub fn augmentation_reproducible(cases: u32) -> Result<(), String> {
    run(cases, (image(), augment_config(), 0usize..50, 0usize..1000), |(img, cfg, epoch, index)| {
        let a = augment(&img, &cfg, &mut cfg.sample_rng(epoch, index)).unwrap();
        let b = augment(&img, &cfg, &mut cfg.sample_rng(epoch, index)).unwrap();
        prop_assert_eq!(a, b);
        Ok(())
    })
}

pub fn flips_are_involutions(cases: u32) -> Result<(), String> {
    run(cases, (image(), any::<bool>(), any::<bool>()), |(img, h, v)| {
        let p = AugmentParams {
            horizontal_flip: h,
            vertical_flip: v,
            ..Default::default()
        };
        let twice = apply_augment(&apply_augment(&img, &p).unwrap(), &p).unwrap();
        prop_assert_eq!(twice, img);
        Ok(())
    })
}

pub fn identity_augmentation(cases: u32) -> Result<(), String> {
    run(cases, (image(), any::<u64>()), |(img, draw)| {
        let out = augment(&img, &AugmentConfig::identity(), &mut ChaCha8Rng::seed_from_u64(draw)).unwrap();
        prop_assert_eq!(out, img);
        Ok(())
    })
}

pub fn standardize_idempotent(cases: u32) -> Result<(), String> {
    run(cases, image(), |img| {
        let [h, w, _] = *img.shape() else { unreachable!() };
        let profile = PreprocessProfile::new(h, w);
        let once = standardize_tensor(&img, &profile).unwrap();
        let twice = standardize_tensor(&once, &profile).unwrap();
        prop_assert!(once.max_abs_diff(&img) <= 1e-6);
        prop_assert!(twice.max_abs_diff(&once) <= 1e-6);
        Ok(())
    })
}
