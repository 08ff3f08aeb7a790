use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use plasmodium_core::synthetic;

fn plasmodium(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plasmodium"))
        .args(args)
        .env("PLASMODIUM_DATA_DIR", root.join("data"))
        .env("PLASMODIUM_WEIGHTS_DIR", root.join("weights"))
        .env("RUST_LOG", "warn")
        .arg("--runs-dir")
        .arg(root.join("runs"))
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn with_corpus(per_class: usize) -> tempfile::TempDir {
    let root = tempfile::tempdir().unwrap();
    synthetic::write_corpus(&root.path().join("data"), per_class, 40, 11).unwrap();
    root
}

#[test]
fn unknown_flags_are_usage_errors() {
    let root = tempfile::tempdir().unwrap();
    let o = plasmodium(root.path(), &["train-cnn", "--arch", "a", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn a_missing_corpus_points_at_its_source() {
    let root = tempfile::tempdir().unwrap();
    let o = plasmodium(root.path(), &["ingest"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(plasmodium_core::dataset::CORPUS_URL));
}

#[test]
fn ingest_counts_both_classes() {
    let root = with_corpus(5);
    let out = stdout(&plasmodium(root.path(), &["ingest"]));
    assert!(out.contains('5'), "{out}");
}

#[test]
fn splits_are_reproducible() {
    let root = with_corpus(20);
    let a = root.path().join("a.json");
    let b = root.path().join("b.json");
    for out in [&a, &b] {
        stdout(&plasmodium(
            root.path(),
            &["split", "--scheme", "transfer", "--seed", "7", "--out", out.to_str().unwrap()],
        ));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    stdout(&plasmodium(root.path(), &["split", "--scheme", "svm"]));
    assert!(root.path().join("runs/splits/svm-seed0.json").is_file());
}

#[test]
fn svm_runs_can_be_scored_again_and_compared() {
    let root = with_corpus(20);
    let grid = ["--c", "1,10", "--gamma", "0.01,0.1", "--folds", "3"];
    let mut args = vec!["train-svm", "--seed", "2"];
    args.extend(grid);
    let trained = stdout(&plasmodium(root.path(), &args));
    assert!(trained.contains("Macro avg"), "{trained}");

    let run = root.path().join("runs/svm-seed2");
    let stored = stdout(&plasmodium(root.path(), &["evaluate", "--stored", run.to_str().unwrap()]));
    let fresh = stdout(&plasmodium(root.path(), &["evaluate", run.to_str().unwrap()]));
    assert_eq!(stored, fresh);
    assert!(stored.starts_with("svm-seed2\n"));
    for label in ["infected", "Accuracy", "Weighted avg"] {
        assert!(stored.contains(label), "{label}");
    }

    let table = stdout(&plasmodium(root.path(), &["report", "--compare"]));
    assert_eq!(table.lines().count(), 13, "{table}");

    let mut grid_args = vec!["grid-search"];
    grid_args.extend(grid);
    let csv = stdout(&plasmodium(root.path(), &grid_args));
    assert!(csv.contains("best: C="), "{csv}");
}

#[test]
fn a_trained_network_is_published_to_the_catalog() {
    let root = with_corpus(8);
    stdout(&plasmodium(root.path(), &["train-cnn", "--arch", "a", "--max-epochs", "1"]));
    let models = root.path().join("models");
    let run = root.path().join("runs/cnn-a-seed0");
    let out = stdout(&plasmodium(
        root.path(),
        &["export", run.to_str().unwrap(), "--out", models.to_str().unwrap()],
    ));
    assert!(out.contains("max deviation"), "{out}");
    let catalog: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(models.join("catalog.json")).unwrap()).unwrap();
    let entry = &catalog["models"][0];
    assert_eq!(entry["id"], "cnn-a-seed0");
    assert!(models.join(entry["path"].as_str().unwrap()).is_file());
}

#[test]
fn transfer_needs_a_snapshot_unless_random_init_is_allowed() {
    let root = with_corpus(6);
    let args = ["train-transfer", "--backbone", "xception", "--regime", "frozen", "--max-epochs", "1", "--no-export"];
    let o = plasmodium(root.path(), &args);
    assert_eq!(o.status.code(), Some(1));

    let exp = root.path().join("exp.json");
    fs::write(&exp, r#"[{"backbone": "xception", "regime": "frozen", "seed": 0}]"#).unwrap();
    let o = plasmodium(
        root.path(),
        &["reproduce", "--experiments", exp.to_str().unwrap(), "--subset", "12", "--max-epochs", "1", "--allow-random-init"],
    );
    stdout(&o);
    assert!(root.path().join("runs/compare.txt").is_file());
    assert!(root.path().join("runs/xception-frozen-seed0/manifest.json").is_file());
}
