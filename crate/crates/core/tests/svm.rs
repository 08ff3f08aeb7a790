use image::{Rgb, RgbImage};
use plasmodium_core::svm::{
    featurize, grid_search, stratified_folds, train_svm, Features, SvmHyperParams, SvmModel,
    DEFAULT_FOLDS,
};
use plasmodium_core::{Label, PreprocessProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two clusters in `dim` dimensions, centred at -0.5 and +0.5 along every axis.
fn blobs(per_class: usize, dim: usize, spread: f32, seed: u64) -> Features {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Features::new(dim);
    for i in 0..2 * per_class {
        let label = Label::ALL[i % 2];
        let centre = if label == Label::Parasitized { 0.5 } else { -0.5 };
        let row: Vec<f32> = (0..dim).map(|_| centre + rng.gen_range(-spread..spread)).collect();
        f.push(&row, label).unwrap();
    }
    f
}

fn rbf(gamma: f64, a: &[f32], b: &[f32]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    (-gamma * d).exp()
}

fn y(l: Label) -> f64 {
    if l == Label::Parasitized {
        1.0
    } else {
        -1.0
    }
}

/// Checks the Karush-Kuhn-Tucker conditions of the C-SVC dual directly
/// from the support vectors, with every kernel value recomputed in f64.
fn assert_kkt(model: &SvmModel, x: &Features, eps: f64) {
    let c = model.params.c;
    let balance: f64 = model.dual_coef.iter().sum();
    assert!(balance.abs() < 1e-8, "sum of y*alpha = {balance}");
    for i in 0..x.len() {
        let row = x.row(i);
        let alpha = model
            .support_vectors
            .iter()
            .position(|sv| sv.as_slice() == row)
            .map_or(0.0, |k| model.dual_coef[k] * y(x.labels[i]));
        assert!(alpha > -1e-12 && alpha <= c + 1e-9, "alpha {alpha} outside [0, {c}]");
        let f: f64 = model
            .support_vectors
            .iter()
            .zip(&model.dual_coef)
            .map(|(sv, a)| a * rbf(model.params.gamma, sv, row))
            .sum::<f64>()
            - model.intercept;
        let margin = y(x.labels[i]) * f;
        if alpha < 1e-9 {
            assert!(margin >= 1.0 - eps, "sample {i}: alpha 0 with margin {margin}");
        } else if alpha > c - 1e-9 {
            assert!(margin <= 1.0 + eps, "sample {i}: alpha C with margin {margin}");
        } else {
            assert!((margin - 1.0).abs() <= eps, "sample {i}: free alpha with margin {margin}");
        }
        let native = model.decision(row).unwrap();
        assert!((native - f).abs() < 1e-4, "decision {native} vs oracle {f}");
    }
}

#[test]
fn featurize_black_white_and_single_red_pixel() {
    let p = PreprocessProfile::new(4, 4);
    let black = featurize(&RgbImage::new(4, 4), &p).unwrap();
    assert_eq!(black, vec![0.0; 48]);
    let white = featurize(&RgbImage::from_pixel(4, 4, Rgb([255; 3])), &p).unwrap();
    assert_eq!(white, vec![1.0; 48]);
    let mut red = RgbImage::new(4, 4);
    red.put_pixel(0, 0, Rgb([255, 0, 0]));
    let f = featurize(&red, &p).unwrap();
    assert_eq!(f[0], 1.0);
    assert!(f[1..].iter().all(|&v| v == 0.0));
    assert_eq!(featurize(&RgbImage::new(50, 70), &PreprocessProfile::svm()).unwrap().len(), 32 * 32 * 3);
}

#[test]
fn featurize_requires_normalization() {
    let mut p = PreprocessProfile::svm();
    p.normalize = false;
    assert!(featurize(&RgbImage::new(32, 32), &p).is_err());
}

#[test]
fn solution_satisfies_kkt_conditions() {
    for (c, gamma, spread) in [(1.0, 0.5, 0.9), (10.0, 0.1, 1.2), (0.1, 1.0, 0.7)] {
        let x = blobs(30, 4, spread, 11);
        let model = train_svm(&x, SvmHyperParams::new(c, gamma).unwrap()).unwrap();
        assert_kkt(&model, &x, 1e-2);
    }
}

#[test]
fn overlapping_duplicates_are_handled() {
    // the same point with both labels can only be bounded
    let mut x = blobs(10, 3, 0.3, 2);
    let row = x.row(0).to_vec();
    x.push(&row, Label::ALL[1]).unwrap();
    let model = train_svm(&x, SvmHyperParams::new(1.0, 1.0).unwrap()).unwrap();
    assert!(model.dual_coef.iter().all(|a| a.is_finite()));
}

#[test]
fn large_c_fits_separable_training_data() {
    let x = blobs(40, 6, 0.4, 5);
    let model = train_svm(&x, SvmHyperParams::new(1e6, 0.5).unwrap()).unwrap();
    assert_eq!(model.accuracy(&x).unwrap(), 1.0);
}

#[test]
fn swapping_labels_flips_decision_signs() {
    let x = blobs(25, 5, 1.0, 8);
    let params = SvmHyperParams::new(1.0, 0.3).unwrap();
    let a = train_svm(&x, params).unwrap();
    let b = train_svm(&x.with_swapped_labels(), params).unwrap();
    let probe = blobs(20, 5, 1.5, 9);
    for i in 0..probe.len() {
        let (da, db) = (a.decision(probe.row(i)).unwrap(), b.decision(probe.row(i)).unwrap());
        assert!((da + db).abs() < 1e-3, "{da} vs {db}");
        if da.abs() > 1e-3 {
            assert_ne!(a.predict(probe.row(i)).unwrap().0, b.predict(probe.row(i)).unwrap().0);
        }
    }
}

#[test]
fn serialized_model_predicts_identically() {
    let x = blobs(15, 3, 0.8, 1);
    let model = train_svm(&x, SvmHyperParams::new(1.0, 1.0).unwrap()).unwrap();
    let back = SvmModel::from_json(&model.to_json()).unwrap();
    assert_eq!(back.predict_all(&x).unwrap(), model.predict_all(&x).unwrap());
    assert!(SvmModel::from_json("{").is_err());
}

#[test]
fn grid_matches_brute_force_refit_and_selects_a_good_pair() {
    let x = blobs(40, 8, 0.8, 3);
    let cs = [0.1, 1.0, 10.0];
    let gammas = [0.01, 0.1, 1.0];
    let seed = 21;
    let result = grid_search(&x, &cs, &gammas, DEFAULT_FOLDS, seed).unwrap();
    assert_eq!(result.scores.len(), 9);

    // oracle: refit every fold by hand and average the held-out accuracies
    let fold_of = stratified_folds(&x.labels, DEFAULT_FOLDS, seed).unwrap();
    let mut best = (f64::MIN, 0.0, 0.0);
    for &c in &cs {
        for &g in &gammas {
            let mut total = 0.0;
            for f in 0..DEFAULT_FOLDS {
                let fit: Vec<usize> = (0..x.len()).filter(|&i| fold_of[i] != f).collect();
                let held: Vec<usize> = (0..x.len()).filter(|&i| fold_of[i] == f).collect();
                let m = train_svm(&x.subset(&fit), SvmHyperParams::new(c, g).unwrap()).unwrap();
                total += m.accuracy(&x.subset(&held)).unwrap();
            }
            let mean = total / DEFAULT_FOLDS as f64;
            assert!((result.score(c, g).unwrap() - mean).abs() < 1e-12, "C={c} gamma={g}");
            if mean > best.0 {
                best = (mean, c, g);
            }
        }
    }
    assert_eq!((result.best.c, result.best.gamma), (best.1, best.2));
    assert!(best.0 >= 0.95, "best cross-validated accuracy {}", best.0);
}

#[test]
fn grid_order_does_not_change_the_choice() {
    let x = blobs(20, 4, 1.1, 4);
    let a = grid_search(&x, &[0.1, 1.0, 10.0], &[0.1, 1.0], 3, 0).unwrap();
    let b = grid_search(&x, &[10.0, 0.1, 1.0], &[1.0, 0.1], 3, 0).unwrap();
    assert_eq!(a.best, b.best);
}

#[test]
fn single_pair_grid_picks_that_pair() {
    let x = blobs(10, 2, 0.5, 6);
    let r = grid_search(&x, &[3.0], &[0.2], 2, 1).unwrap();
    assert_eq!((r.best.c, r.best.gamma), (3.0, 0.2));
    assert_eq!(r.to_csv().lines().next(), Some("C,gamma,fold_mean_accuracy"));
    assert_eq!(r.to_csv().lines().count(), 2);
}

#[test]
fn folds_partition_and_stay_stratified() {
    let x = blobs(23, 1, 1.0, 0);
    let folds = stratified_folds(&x.labels, 5, 9).unwrap();
    for label in Label::ALL {
        let mut per = [0usize; 5];
        for (i, &f) in folds.iter().enumerate() {
            if x.labels[i] == label {
                per[f] += 1;
            }
        }
        assert_eq!(per.iter().sum::<usize>(), 23);
        assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1, "{per:?}");
    }
}

#[test]
fn degenerate_inputs_are_errors() {
    let mut one_class = Features::new(2);
    for i in 0..6 {
        one_class.push(&[i as f32, 0.0], Label::Uninfected).unwrap();
    }
    let p = SvmHyperParams::new(1.0, 1.0).unwrap();
    assert!(train_svm(&one_class, p).is_err());
    assert!(train_svm(&Features::new(2), p).is_err());
    assert!(grid_search(&one_class, &[1.0], &[1.0], 5, 0).is_err());
    assert!(grid_search(&blobs(10, 2, 0.5, 0), &[], &[1.0], 5, 0).is_err());
    assert!(SvmHyperParams::new(0.0, 1.0).is_err());
    assert!(SvmHyperParams::new(1.0, -1.0).is_err());
}
