//! End-to-end runs: split, train, evaluate, write `runs/<run-id>/` and
//! export the browser bundle.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use plasmodium_nn::{Model, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnn_models::DropoutRates;
use crate::dataset::{balanced_subset, make_split, DatasetSplit, LabeledImage, SplitManifest};
use crate::error::{CoreError, Result};
use crate::export::{export_model, load_bundle, BundleMetadata, ExportBundle, PROBE_SIZE};
use crate::metrics::{self, EvaluationReport};
use crate::preprocess::{AugmentConfig, PreprocessProfile};
use crate::runs::{
    manifest_hash, read_run, run_id, sha256_hex, write_run, MetricSummary, RunKind, RunManifest,
    BUNDLE_DIR,
};
use crate::svm::{self, Features, SvmModel};
use crate::train::{evaluate, train_model, ImageSet, ImageSource, TensorSet, TrainConfig, TrainingHistory};
use crate::transfer::{build_transfer_model, load_pretrained, run_regime, Backbone, Regime, RegimeSpec};

pub const SPLIT_FILE: &str = "split.json";
pub const SVM_MODEL_FILE: &str = "svm.json";
pub const GRID_FILE: &str = "grid.csv";
/// Raw little-endian f32 probe batch kept next to the bundle, so a run
/// can be exported again without the corpus.
pub const PROBE_FILE: &str = "probe.f32";
pub const CATALOG_FILE: &str = "catalog.json";

/// Standardized training sets above this size are decoded per batch
/// instead of held in memory.
const CACHE_LIMIT_BYTES: usize = 1 << 30;

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub runs_dir: PathBuf,
    pub weights_dir: PathBuf,
    /// Caps every training phase; `None` keeps the configured budgets.
    pub max_epochs: Option<usize>,
    pub augment: bool,
    pub export: bool,
    /// Without it a transfer run refuses to start from random weights.
    pub require_pretrained: bool,
    pub svm_grid: (Vec<f64>, Vec<f64>),
    pub svm_folds: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            runs_dir: PathBuf::from("runs"),
            weights_dir: crate::transfer::weights_dir(),
            max_epochs: None,
            augment: true,
            export: true,
            require_pretrained: true,
            svm_grid: (svm::DEFAULT_C_GRID.to_vec(), svm::DEFAULT_GAMMA_GRID.to_vec()),
            svm_folds: svm::DEFAULT_FOLDS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub report: EvaluationReport,
    pub history: Option<TrainingHistory>,
}

/// One cell of an experiment matrix file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Experiment {
    pub backbone: Backbone,
    pub regime: Regime,
    pub seed: u64,
}

impl Experiment {
    pub fn kind(self) -> RunKind {
        RunKind::Transfer {
            backbone: self.backbone,
            regime: self.regime,
        }
    }
}

pub fn parse_experiments(text: &str) -> Result<Vec<Experiment>> {
    serde_json::from_str(text).map_err(|e| CoreError::Config(format!("malformed experiment file: {e}")))
}

/// Keeps a class-balanced random subset of `total` images, in corpus order.
pub fn subset_corpus(images: &[LabeledImage], total: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    let labels: Vec<_> = images.iter().map(|i| i.label).collect();
    Ok(balanced_subset(&labels, total, seed)?
        .into_iter()
        .map(|i| images[i].clone())
        .collect())
}

pub fn train_config(kind: RunKind) -> TrainConfig {
    match kind {
        RunKind::Cnn { .. } => TrainConfig::rmsprop(),
        _ => TrainConfig::sgd(),
    }
}

/// Trains and evaluates `kind` on `corpus`. The split is derived from
/// `seed` unless one is given; it must use the scheme of `kind`.
pub fn run(
    corpus: &[LabeledImage],
    kind: RunKind,
    seed: u64,
    split: Option<&DatasetSplit>,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    let split = match split {
        Some(s) if s.scheme != kind.scheme() => {
            return Err(CoreError::Config(format!(
                "{} needs a {} split, got {}",
                kind.model_name(),
                kind.scheme(),
                s.scheme
            )))
        }
        Some(s) => s.clone(),
        None => make_split(corpus, kind.scheme(), seed)?,
    };
    let split_json = SplitManifest::new(&split, corpus).to_json();
    let dir = opts.runs_dir.join(run_id(kind, seed));
    fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
    let split_path = dir.join(SPLIT_FILE);
    fs::write(&split_path, &split_json).map_err(|e| CoreError::io(&split_path, e))?;

    let mut warnings = split.warnings.clone();
    info!(
        "{}: {} train, {} validation, {} test",
        run_id(kind, seed),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );

    let test = ImageSet::select(corpus, &split.test);
    let (report, history, model, config, profile) = match kind {
        RunKind::Svm => {
            let (report, model, grid) = run_svm(corpus, &split, opts)?;
            let config = serde_json::json!({
                "C_grid": opts.svm_grid.0,
                "gamma_grid": opts.svm_grid.1,
                "folds": opts.svm_folds,
                "C": model.params.c,
                "gamma": model.params.gamma,
            });
            write_text(&dir.join(SVM_MODEL_FILE), &model.to_json())?;
            write_text(&dir.join(GRID_FILE), &grid)?;
            (report, None, None, config, PreprocessProfile::svm())
        }
        RunKind::Cnn { arch } => {
            let mut config = train_config(kind);
            if let Some(cap) = opts.max_epochs {
                config.max_epochs = config.max_epochs.min(cap);
            }
            let profile = training_profile(arch.profile(), opts);
            let mut model = Model::init(arch.build(&DropoutRates::default())?, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let train = ImageSet::select(corpus, &split.train);
            let val = ImageSet::select(corpus, &split.validation);
            let history = with_cached(&train, &profile, |t| {
                let v: Option<&dyn ImageSource> = (!val.is_empty()).then_some(&val);
                train_model(&mut model, t, v, &profile, &config, seed)
            })?;
            let report = evaluate(&model, &test, &profile, config.batch_size)?;
            let config = serde_json::to_value(&config).expect("config serializes");
            (report, Some(history), Some(model), config, profile)
        }
        RunKind::Transfer { backbone, regime } => {
            let t = build_transfer_model(backbone)?;
            let mut model = Model::init(t.graph, &mut ChaCha8Rng::seed_from_u64(seed))?;
            match load_pretrained(&mut model, &t.spec, &opts.weights_dir) {
                Ok(_) => {}
                Err(e @ CoreError::MissingSnapshot { .. }) if !opts.require_pretrained => {
                    warn!("{e}");
                    warnings.push(format!("{backbone} backbone randomly initialised: no pretrained snapshot"));
                }
                Err(e) => return Err(e),
            }
            let mut spec = RegimeSpec::new(regime, &t.spec, &train_config(kind));
            if let Some(cap) = opts.max_epochs {
                spec = spec.cap_epochs(cap);
            }
            let profile = training_profile(PreprocessProfile::small(), opts);
            let train = ImageSet::select(corpus, &split.train);
            let val = ImageSet::select(corpus, &split.validation);
            let out = with_cached(&train, &profile, |t| {
                let v: Option<&dyn ImageSource> = (!val.is_empty()).then_some(&val);
                run_regime(&mut model, &spec, t, v, &test, &profile, seed)
            })?;
            let config = serde_json::json!({
                "phases": spec.phases.iter().map(|p| &p.config).collect::<Vec<_>>(),
                "trainable_params": out.masks.iter().map(|m| m.trainable_params).collect::<Vec<_>>(),
                "frozen_params": out.masks.iter().map(|m| m.frozen_params).collect::<Vec<_>>(),
            });
            (out.report, Some(TrainingHistory::concat(&out.histories)), Some(model), config, profile)
        }
    };
    let manifest = RunManifest {
        run_id: run_id(kind, seed),
        model: kind,
        seed,
        scheme: split.scheme,
        corpus_size: corpus.len(),
        split_hash: sha256_hex(split_json.as_bytes()),
        config,
        profile: Some(profile),
        metrics: MetricSummary::from(&report),
        warnings,
    };
    write_run(&dir, &manifest, &report, history.as_ref())?;

    if let (Some(model), true) = (&model, opts.export) {
        let profile = manifest.profile.clone().expect("networks record a profile");
        let probe = probe_batch(&test, &profile)?;
        write_probe(&dir.join(PROBE_FILE), &probe)?;
        let meta = BundleMetadata {
            model_name: manifest.run_id.clone(),
            manifest_hash: Some(manifest_hash(&dir)?),
            metrics: Some(serde_json::to_value(&manifest.metrics).expect("metrics serialize")),
        };
        let bundle = export_model(model, &profile, meta, &probe, &dir.join(BUNDLE_DIR))?;
        info!("exported {} (max deviation {:e})", bundle.dir.display(), bundle.info.fidelity.map_or(0.0, |f| f.max_abs_diff));
    }
    Ok(RunOutcome {
        dir,
        manifest,
        report,
        history,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

fn training_profile(base: PreprocessProfile, opts: &RunOptions) -> PreprocessProfile {
    if opts.augment {
        base.with_augment(AugmentConfig::default())
    } else {
        base
    }
}

/// Runs `f` on a standardized in-memory copy of `train` when it fits,
/// otherwise on the images themselves.
fn with_cached<T>(
    train: &ImageSet,
    profile: &PreprocessProfile,
    f: impl FnOnce(&dyn ImageSource) -> Result<T>,
) -> Result<T> {
    let bytes = train.len() * profile.sample_shape().iter().product::<usize>() * 4;
    if bytes <= CACHE_LIMIT_BYTES {
        let cached: TensorSet = train.cached(&profile.without_augment())?;
        f(&cached)
    } else {
        f(train)
    }
}

/// The first [`PROBE_SIZE`] test images, standardized, as one batch.
pub fn probe_batch(test: &dyn ImageSource, profile: &PreprocessProfile) -> Result<Tensor> {
    let n = test.len().min(PROBE_SIZE);
    if n == 0 {
        return Err(CoreError::Data("no test images to probe the export with".into()));
    }
    let eval = profile.without_augment();
    let samples: Vec<Tensor> = (0..n).map(|i| test.standardized(i, &eval)).collect::<Result<_>>()?;
    let refs: Vec<&[f32]> = samples.iter().map(|t| t.data()).collect();
    Ok(Tensor::stack(&refs, &eval.sample_shape())?)
}

fn features(corpus: &[LabeledImage], idx: &[usize]) -> Result<Features> {
    let profile = PreprocessProfile::svm();
    let mut out = Features::new(profile.sample_shape().iter().product());
    for &i in idx {
        out.push(&svm::featurize(&corpus[i].pixels, &profile)?, corpus[i].label)?;
    }
    Ok(out)
}

/// Cross-validates the grid on the training part, refits the best pair
/// on training plus validation and scores the test part.
fn run_svm(corpus: &[LabeledImage], split: &DatasetSplit, opts: &RunOptions) -> Result<(EvaluationReport, SvmModel, String)> {
    let train = features(corpus, &split.train)?;
    let grid = svm::grid_search(&train, &opts.svm_grid.0, &opts.svm_grid.1, opts.svm_folds, split.seed)?;
    info!("svm grid best: C={} gamma={}", grid.best.c, grid.best.gamma);
    let fit_idx: Vec<usize> = split.train.iter().chain(&split.validation).copied().collect();
    let mut model = svm::train_svm(&features(corpus, &fit_idx)?, grid.best)?;
    model.feature_profile = Some(PreprocessProfile::svm());
    let report = svm_report(&model, &features(corpus, &split.test)?)?;
    Ok((report, model, grid.to_csv()))
}

fn svm_report(model: &SvmModel, test: &Features) -> Result<EvaluationReport> {
    let out = model.predict_all(test)?;
    let truth: Vec<usize> = test.labels.iter().map(|l| l.index()).collect();
    let pred: Vec<usize> = out.iter().map(|(l, _)| l.index()).collect();
    let scores: Vec<f64> = out.iter().map(|(_, s)| *s).collect();
    let cm = metrics::confusion(&truth, &pred)?;
    let has_both = truth.contains(&0) && truth.contains(&1);
    metrics::report(&cm, has_both.then_some((&truth[..], &scores[..])))
}

/// Scores the stored model of a finished run again on its recorded test
/// split, resolved against `corpus`.
pub fn reevaluate(dir: &Path, corpus: &[LabeledImage]) -> Result<EvaluationReport> {
    let (manifest, _) = read_run(dir)?;
    let path = dir.join(SPLIT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let split: SplitManifest =
        serde_json::from_str(&text).map_err(|source| CoreError::Json { path: path.clone(), source })?;
    let split = split.resolve(corpus)?;
    match manifest.model {
        RunKind::Svm => {
            let path = dir.join(SVM_MODEL_FILE);
            let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
            svm_report(&SvmModel::from_json(&text)?, &features(corpus, &split.test)?)
        }
        _ => {
            let (model, info) = load_bundle(&dir.join(BUNDLE_DIR))?;
            evaluate(&model, &ImageSet::select(corpus, &split.test), &info.preprocess, 64)
        }
    }
}

fn write_probe(path: &Path, probe: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = probe.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

fn read_probe(path: &Path, sample_shape: [usize; 3]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let per = sample_shape.iter().product::<usize>() * 4;
    if bytes.is_empty() || bytes.len() % per != 0 {
        return Err(CoreError::Data(format!("{} does not hold {sample_shape:?} samples", path.display())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let [h, w, c] = sample_shape;
    Ok(Tensor::from_vec(&[bytes.len() / per, h, w, c], data)?)
}

/// One deployable model in `catalog.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub model: String,
    /// `model.json` relative to the catalog.
    pub path: String,
    pub labels: Vec<String>,
    pub target_size: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub models: Vec<CatalogEntry>,
}

/// Re-exports the bundle of the run in `run_dir` to `models_dir/<run-id>/`
/// (checking fidelity on the stored probe batch) and lists it in
/// `models_dir/catalog.json`.
pub fn publish(run_dir: &Path, models_dir: &Path) -> Result<ExportBundle> {
    let (manifest, _) = read_run(run_dir)?;
    let bundle_dir = run_dir.join(BUNDLE_DIR);
    if !bundle_dir.is_dir() {
        return Err(CoreError::Config(format!(
            "{} has no bundle; only trained networks can be exported",
            run_dir.display()
        )));
    }
    let (model, info) = load_bundle(&bundle_dir)?;
    let probe = read_probe(&run_dir.join(PROBE_FILE), info.preprocess.sample_shape())?;
    let out = models_dir.join(&manifest.run_id);
    let bundle = export_model(&model, &info.preprocess, info.metadata.clone(), &probe, &out)?;

    let path = models_dir.join(CATALOG_FILE);
    let mut catalog: Catalog = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|source| CoreError::Json { path: path.clone(), source })?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Catalog::default(),
        Err(e) => return Err(CoreError::io(&path, e)),
    };
    catalog.models.retain(|m| m.id != manifest.run_id);
    catalog.models.push(CatalogEntry {
        id: manifest.run_id.clone(),
        model: manifest.model.model_name(),
        path: format!("{}/{}", manifest.run_id, plasmodium_nn::io::MODEL_FILE),
        labels: bundle.info.labels.clone(),
        target_size: bundle.info.preprocess.target_size,
        metrics: bundle.info.metadata.metrics.clone(),
    });
    catalog.models.sort_by(|a, b| a.id.cmp(&b.id));
    let mut text = serde_json::to_string_pretty(&catalog).expect("catalog serializes");
    text.push('\n');
    write_text(&path, &text)?;
    Ok(bundle)
}
