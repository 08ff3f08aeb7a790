use std::fs;

use plasmodium_core::cnn_models::CnnArch;
use plasmodium_core::error::CoreError;
use plasmodium_core::export::load_bundle;
use plasmodium_core::pipeline::{
    parse_experiments, reevaluate, run, subset_corpus, RunOptions, GRID_FILE, SPLIT_FILE, SVM_MODEL_FILE,
};
use plasmodium_core::runs::{manifest_hash, read_run, RunKind, BUNDLE_DIR, HISTORY_FILE};
use plasmodium_core::transfer::{Backbone, Regime};
use plasmodium_core::{synthetic, Label, Scheme};

fn options(root: &std::path::Path) -> RunOptions {
    RunOptions {
        runs_dir: root.join("runs"),
        weights_dir: root.join("weights"),
        max_epochs: Some(1),
        svm_grid: (vec![1.0, 10.0], vec![0.01, 0.1]),
        svm_folds: 3,
        ..Default::default()
    }
}

#[test]
fn svm_run_writes_its_artifacts_and_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let corpus = synthetic::images(30, 40, 3);
    let opts = options(root.path());
    let out = run(&corpus, RunKind::Svm, 7, None, &opts).unwrap();
    assert_eq!(out.dir, opts.runs_dir.join("svm-seed7"));
    assert_eq!(out.manifest.scheme, Scheme::Svm);
    assert_eq!(out.report.confusion.total(), 9);
    assert!(out.report.accuracy >= 0.8, "{}", out.report.accuracy);
    for f in [SPLIT_FILE, SVM_MODEL_FILE, GRID_FILE] {
        assert!(out.dir.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(out.dir.join(GRID_FILE)).unwrap().lines().count(), 5);
    assert!(!out.dir.join(BUNDLE_DIR).exists());
    assert!(!out.dir.join(HISTORY_FILE).exists());

    let first = manifest_hash(&out.dir).unwrap();
    run(&corpus, RunKind::Svm, 7, None, &opts).unwrap();
    assert_eq!(manifest_hash(&out.dir).unwrap(), first);

    let again = reevaluate(&out.dir, &corpus).unwrap();
    assert_eq!(again, read_run(&out.dir).unwrap().1);
}

#[test]
fn cnn_run_exports_a_bundle_that_reproduces_the_report() {
    let root = tempfile::tempdir().unwrap();
    let corpus = synthetic::images(12, 64, 5);
    let kind = RunKind::Cnn { arch: CnnArch::A };
    let out = run(&corpus, kind, 1, None, &options(root.path())).unwrap();
    assert_eq!(out.history.as_ref().unwrap().len(), 1);
    assert_eq!(out.manifest.config["optimizer"]["kind"], "rms_prop");
    assert!(out.manifest.profile.as_ref().unwrap().augment.is_some());

    let (_, info) = load_bundle(&out.dir.join(BUNDLE_DIR)).unwrap();
    assert_eq!(info.metadata.manifest_hash.unwrap(), manifest_hash(&out.dir).unwrap());
    assert!(info.preprocess.augment.is_none());
    let f = info.fidelity.unwrap();
    assert_eq!(f.probe_count, (out.report.confusion.total() as usize).min(32));
    assert_eq!(reevaluate(&out.dir, &corpus).unwrap().confusion, out.report.confusion);
}

#[test]
fn transfer_without_a_snapshot_fails_unless_allowed() {
    let root = tempfile::tempdir().unwrap();
    let corpus = synthetic::images(8, 48, 2);
    let kind = RunKind::Transfer {
        backbone: Backbone::Xception,
        regime: Regime::Frozen,
    };
    let mut opts = options(root.path());
    let err = run(&corpus, kind, 0, None, &opts).unwrap_err();
    assert!(matches!(err, CoreError::MissingSnapshot { .. }), "{err}");

    opts.require_pretrained = false;
    opts.export = false;
    let out = run(&corpus, kind, 0, None, &opts).unwrap();
    assert!(out.manifest.warnings.iter().any(|w| w.contains("randomly initialised")));
    assert_eq!(out.manifest.config["frozen_params"].as_array().unwrap().len(), 1);
    assert_eq!(out.manifest.scheme, Scheme::Transfer);
}

#[test]
fn a_given_split_must_match_the_model_scheme() {
    let root = tempfile::tempdir().unwrap();
    let corpus = synthetic::images(10, 32, 0);
    let split = plasmodium_core::dataset::make_split(&corpus, Scheme::Transfer, 0).unwrap();
    let err = run(&corpus, RunKind::Svm, 0, Some(&split), &options(root.path())).unwrap_err();
    assert!(matches!(err, CoreError::Config(_)), "{err}");
}

#[test]
fn balanced_subsets_keep_corpus_order() {
    let corpus = synthetic::images(20, 16, 0);
    let sub = subset_corpus(&corpus, 11, 4).unwrap();
    assert_eq!(sub.len(), 11);
    assert_eq!(sub.iter().filter(|i| i.label == Label::Uninfected).count(), 6);
    let pos: Vec<usize> = sub
        .iter()
        .map(|s| corpus.iter().position(|c| c.source_path == s.source_path).unwrap())
        .collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn experiment_files_list_transfer_cells() {
    let e = parse_experiments(r#"[{"backbone": "vgg19", "regime": "incremental", "seed": 3}]"#).unwrap();
    assert_eq!(e.len(), 1);
    assert_eq!(e[0].seed, 3);
    assert_eq!(
        e[0].kind(),
        RunKind::Transfer {
            backbone: Backbone::Vgg19,
            regime: Regime::Incremental
        }
    );
    assert!(parse_experiments(r#"[{"backbone": "resnet", "regime": "full", "seed": 0}]"#).is_err());
}
