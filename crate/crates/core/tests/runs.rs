use plasmodium_core::cnn_models::CnnArch;
use plasmodium_core::metrics::{confusion, report, EvaluationReport};
use plasmodium_core::runs::{
    compare, compare_mean, manifest_hash, read_run, render_compare, run_id, sha256_hex, write_run, MetricSummary,
    RunKind, RunManifest, HISTORY_FILE, REPORT_TEXT,
};
use plasmodium_core::train::{EpochRecord, TrainingHistory};
use plasmodium_core::transfer::{Backbone, Regime};

fn sample_report(hits: usize) -> EvaluationReport {
    let truth: Vec<usize> = (0..10).map(|i| i % 2).collect();
    let pred: Vec<usize> = truth.iter().enumerate().map(|(i, &t)| if i < hits { t } else { 1 - t }).collect();
    let scores: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    report(&confusion(&truth, &pred).unwrap(), Some((&truth, &scores))).unwrap()
}

fn manifest(kind: RunKind, seed: u64, r: &EvaluationReport) -> RunManifest {
    RunManifest {
        run_id: run_id(kind, seed),
        model: kind,
        seed,
        scheme: kind.scheme(),
        corpus_size: 10,
        split_hash: sha256_hex(b"split"),
        config: serde_json::json!({"batch_size": 4}),
        profile: None,
        metrics: MetricSummary::from(r),
        warnings: vec![],
    }
}

#[test]
fn run_directory_round_trips() {
    let root = tempfile::tempdir().unwrap();
    let kind = RunKind::Cnn { arch: CnnArch::A };
    let r = sample_report(8);
    let m = manifest(kind, 3, &r);
    assert_eq!(m.run_id, "cnn-a-seed3");
    let history = TrainingHistory {
        epochs: vec![EpochRecord {
            epoch: 1,
            lr: 1e-3,
            train_loss: 0.7,
            train_acc: 0.5,
            val_loss: Some(0.6),
            val_acc: Some(0.6),
        }],
        best_epoch: Some(1),
        stopped_early: false,
    };
    let dir = root.path().join(&m.run_id);
    write_run(&dir, &m, &r, Some(&history)).unwrap();
    let (m2, r2) = read_run(&dir).unwrap();
    assert_eq!((m2, r2), (m.clone(), r.clone()));
    assert!(dir.join(HISTORY_FILE).is_file());
    assert!(std::fs::read_to_string(dir.join(REPORT_TEXT)).unwrap().contains("parasitized"));

    // identical inputs give identical files
    let first = manifest_hash(&dir).unwrap();
    write_run(&dir, &m, &r, Some(&history)).unwrap();
    assert_eq!(manifest_hash(&dir).unwrap(), first);
    let other = root.path().join("again");
    write_run(&other, &m, &r, None).unwrap();
    assert_eq!(manifest_hash(&other).unwrap(), first);
    assert!(!other.join(HISTORY_FILE).exists());
}

#[test]
fn compare_copies_report_values_and_marks_gaps() {
    let a = sample_report(7);
    let b = sample_report(9);
    let xception = RunKind::Transfer {
        backbone: Backbone::Xception,
        regime: Regime::Incremental,
    };
    let runs = vec![(manifest(RunKind::Svm, 0, &a), a.clone()), (manifest(xception, 0, &b), b.clone())];
    let rows = compare(&runs).unwrap();
    assert_eq!(rows.len(), 12);
    let svm = rows.iter().find(|r| r.model == RunKind::Svm).unwrap();
    assert_eq!(
        svm.values,
        Some([a.accuracy, a.macro_avg.precision, a.macro_avg.recall, a.macro_avg.f1])
    );
    let x = rows.iter().find(|r| r.model == xception).unwrap();
    assert_eq!(x.values.unwrap()[0], b.accuracy);
    assert_eq!(rows.iter().filter(|r| r.values.is_none()).count(), 10);

    let table = render_compare(&rows);
    assert_eq!(table.lines().count(), 13);
    let svm_line = table.lines().find(|l| l.contains("SVM")).unwrap();
    assert!(svm_line.contains(&format!("{:.4}", a.accuracy)), "{svm_line}");
    let empty = table.lines().find(|l| l.contains("CNN-B")).unwrap();
    assert_eq!(empty.matches(" -").count(), 4, "{empty}");
}

#[test]
fn duplicate_cells_are_rejected() {
    let a = sample_report(5);
    let runs = vec![(manifest(RunKind::Svm, 0, &a), a.clone()), (manifest(RunKind::Svm, 1, &a), a.clone())];
    let err = compare(&runs).unwrap_err();
    assert!(err.to_string().contains("svm-seed0"), "{err}");
}

#[test]
fn seeds_of_one_cell_are_averaged() {
    let a = sample_report(6);
    let b = sample_report(8);
    let kind = RunKind::Cnn { arch: CnnArch::B };
    let runs = vec![(manifest(kind, 0, &a), a.clone()), (manifest(kind, 1, &b), b.clone())];
    let rows = compare_mean(&runs);
    assert_eq!(rows.len(), 12);
    let row = rows.iter().find(|r| r.model == kind).unwrap();
    let v = row.values.unwrap();
    assert!((v[0] - (a.accuracy + b.accuracy) / 2.0).abs() < 1e-12);
    assert!((v[3] - (a.macro_avg.f1 + b.macro_avg.f1) / 2.0).abs() < 1e-12);
    assert!(row.run_id.as_deref().unwrap().contains("mean of 2"));
    assert_eq!(rows.iter().filter(|r| r.values.is_some()).count(), 1);
}
