use std::path::{Path, PathBuf};
use std::process::Command;

use plasmodium_core::cnn_models::CnnArch;
use plasmodium_core::export::{export_model, load_bundle, BundleMetadata, FIDELITY_TOLERANCE};
use plasmodium_core::transfer::{build_transfer_model, Backbone};
use plasmodium_core::{synthetic, PreprocessProfile, CLASS_NAMES};
use plasmodium_nn::{LayerGraph, Model, Op, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random weights plus non-trivial batch-norm statistics, so a reader that
/// ignored the moving averages would be caught.
fn model_with_random_stats(graph: LayerGraph, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::init(graph, &mut rng).unwrap();
    for i in 0..m.graph().len() {
        if matches!(m.graph().nodes[i].op, Op::BatchNorm { .. }) {
            for t in m.params_mut(i) {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
            }
        }
    }
    m
}

fn probe(n: usize, side: usize, seed: u64) -> Tensor {
    let profile = PreprocessProfile::new(side, side);
    let imgs = synthetic::images(n.div_ceil(2), side as u32, seed);
    let samples: Vec<Tensor> = imgs[..n]
        .iter()
        .map(|i| plasmodium_core::preprocess::standardize(&i.pixels, &profile).unwrap())
        .collect();
    let refs: Vec<&[f32]> = samples.iter().map(|t| t.data()).collect();
    Tensor::stack(&refs, &[side, side, 3]).unwrap()
}

fn meta(name: &str) -> BundleMetadata {
    BundleMetadata {
        model_name: name.into(),
        manifest_hash: Some("ab".repeat(32)),
        metrics: Some(serde_json::json!({"accuracy": 0.5})),
    }
}

#[test]
fn cnn_a_bundle_round_trips_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let arch = CnnArch::A;
    let m = model_with_random_stats(arch.build(&Default::default()).unwrap(), 1);
    let x = probe(32, 128, 0);
    let bundle = export_model(&m, &arch.profile(), meta("cnn-a"), &x, dir.path()).unwrap();
    let f = bundle.info.fidelity.unwrap();
    assert_eq!(f.probe_count, 32);
    assert!(f.max_abs_diff < FIDELITY_TOLERANCE);
    assert_eq!(bundle.info.labels, ["uninfected", "parasitized"]);
    assert_eq!(bundle.info.labels, CLASS_NAMES);

    let (back, info) = load_bundle(dir.path()).unwrap();
    assert_eq!(info, bundle.info);
    assert_eq!(info.preprocess.target_size, (128, 128));
    assert!(info.preprocess.normalize && info.preprocess.augment.is_none());
    assert_eq!(info.metadata, meta("cnn-a"));
    assert!(back.predict(&x).unwrap().max_abs_diff(&m.predict(&x).unwrap()) < FIDELITY_TOLERANCE);
}

#[test]
fn cnn_b_bundle_declares_its_input_size() {
    let dir = tempfile::tempdir().unwrap();
    let arch = CnnArch::B;
    let m = Model::init(arch.build(&Default::default()).unwrap(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let bundle = export_model(&m, &arch.profile(), meta("cnn-b"), &probe(2, 224, 0), dir.path()).unwrap();
    assert_eq!(bundle.info.preprocess.target_size, (224, 224));
    let raw: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("model.json")).unwrap()).unwrap();
    assert_eq!(raw["userDefinedMetadata"]["preprocess"]["target_size"], serde_json::json!([224, 224]));
    assert_eq!(raw["format"], "layers-model");
}

#[test]
fn export_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::init(CnnArch::A.build(&Default::default()).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let wrong = PreprocessProfile::cnn_b();
    assert!(export_model(&m, &wrong, meta("x"), &probe(1, 128, 0), dir.path()).is_err());
    let empty = Tensor::zeros(&[0, 128, 128, 3]);
    assert!(export_model(&m, &CnnArch::A.profile(), meta("x"), &empty, dir.path()).is_err());
    assert!(load_bundle(&dir.path().join("missing")).is_err());
}

fn tfjs_script() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../tools/tfjs_predict.js")
}

fn node_path() -> String {
    std::env::var("NODE_PATH").unwrap_or_else(|_| "/usr/lib/node_modules".into())
}

fn tfjs_available() -> bool {
    Command::new("node")
        .args(["-e", "require('@tensorflow/tfjs')"])
        .env("NODE_PATH", node_path())
        .output()
        .is_ok_and(|o| o.status.success())
}

fn tfjs_predict(bundle: &Path, x: &Tensor) -> Vec<Vec<f32>> {
    let input = bundle.join("probe.f32");
    let bytes: Vec<u8> = x.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&input, bytes).unwrap();
    let out = Command::new("node")
        .arg(tfjs_script())
        .arg(bundle)
        .arg(&input)
        .arg(x.batch().to_string())
        .env("NODE_PATH", node_path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// TensorFlow.js is the consumer of the bundle format, so it is the
/// reference for what the browser will compute.
#[test]
fn tensorflow_js_agrees_with_the_native_engine() {
    if !tfjs_available() {
        eprintln!("skipping: node with @tensorflow/tfjs not found");
        return;
    }
    let mut cases: Vec<(String, LayerGraph)> = vec![
        ("cnn-a".into(), CnnArch::A.build(&Default::default()).unwrap()),
        ("cnn-b".into(), CnnArch::B.build(&Default::default()).unwrap()),
    ];
    for b in Backbone::ALL {
        cases.push((b.name().into(), build_transfer_model(b).unwrap().graph));
    }
    for (seed, (name, graph)) in cases.into_iter().enumerate() {
        let [side, _, _] = graph.input_shape;
        let m = model_with_random_stats(graph, seed as u64);
        let x = probe(2, side, seed as u64);
        let dir = tempfile::tempdir().unwrap();
        export_model(&m, &PreprocessProfile::new(side, side), meta(&name), &x, dir.path()).unwrap();
        let native = m.predict(&x).unwrap();
        let js = tfjs_predict(dir.path(), &x);
        assert_eq!(js.len(), 2, "{name}");
        for (row, want) in js.iter().zip(native.data().chunks(2)) {
            for (a, b) in row.iter().zip(want) {
                assert!((a - b).abs() < FIDELITY_TOLERANCE, "{name}: tfjs {row:?} native {want:?}");
            }
        }
    }
}
