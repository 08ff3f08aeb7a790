//! Corpus ingestion from a class-per-directory layout and the three split
//! schemes.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Class index mapping shared by every model, report and bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Uninfected = 0,
    Parasitized = 1,
}

pub const CLASS_NAMES: [&str; 2] = ["uninfected", "parasitized"];

pub const DATA_ENV: &str = "PLASMODIUM_DATA_DIR";
/// Where the thin-smear cell corpus is published.
pub const CORPUS_URL: &str = "https://lhncbc.nlm.nih.gov/publication/pub9932";

/// `$PLASMODIUM_DATA_DIR`, or `data/cell_images` when unset.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/cell_images"))
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Uninfected, Label::Parasitized];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }

    /// Directory name in the NIH release.
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Uninfected => "Uninfected",
            Label::Parasitized => "Parasitized",
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Uninfected => Label::Parasitized,
            Label::Parasitized => Label::Uninfected,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: RgbImage,
    pub label: Label,
    /// Path relative to the corpus root, `/`-separated.
    pub source_path: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub root: String,
    /// Images loaded per class, indexed by [`Label::index`].
    pub per_class: [usize; 2],
    pub skipped: Vec<SkippedFile>,
}

impl IngestSummary {
    pub fn loaded(&self) -> usize {
        self.per_class.iter().sum()
    }
}

impl fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "corpus: {}", self.root)?;
        for label in Label::ALL {
            writeln!(f, "  {:<12} {:>6}", label.name(), self.per_class[label.index()])?;
        }
        writeln!(f, "  {:<12} {:>6}", "total", self.loaded())?;
        write!(f, "  {:<12} {:>6}", "skipped", self.skipped.len())
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub images: Vec<LabeledImage>,
    pub summary: IngestSummary,
}

impl Corpus {
    pub fn labels(&self) -> Vec<Label> {
        self.images.iter().map(|i| i.label).collect()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

struct Candidate {
    path: PathBuf,
    source_path: String,
    label: Label,
}

fn class_dirs(root: &Path) -> Result<[PathBuf; 2]> {
    let entries = fs::read_dir(root).map_err(|e| {
        CoreError::Config(format!("cannot read corpus root {}: {e}", root.display()))
    })?;
    let mut found: [Option<PathBuf>; 2] = [None, None];
    for entry in entries {
        let entry = entry.map_err(|e| CoreError::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_lowercase();
        if let Some(label) = Label::ALL.into_iter().find(|l| l.name() == name) {
            if let Some(prev) = &found[label.index()] {
                return Err(CoreError::Config(format!(
                    "both {} and {} match class `{}`",
                    prev.display(),
                    entry.path().display(),
                    label.name()
                )));
            }
            found[label.index()] = Some(entry.path());
        }
    }
    let [u, p] = found;
    match (u, p) {
        (Some(u), Some(p)) => Ok([u, p]),
        (u, _) => {
            let missing = if u.is_none() {
                Label::Uninfected
            } else {
                Label::Parasitized
            };
            Err(CoreError::Config(format!(
                "class directory `{}` is missing under {}",
                missing.dir_name(),
                root.display()
            )))
        }
    }
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn decode(path: &Path) -> std::result::Result<RgbImage, String> {
    let bytes = fs::read(path).map_err(|e| e.to_string())?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    if img.width() == 0 || img.height() == 0 {
        return Err("image has zero area".into());
    }
    Ok(img.to_rgb8())
}

/// Loads every decodable PNG under `<root>/Uninfected` and
/// `<root>/Parasitized` (directory names matched case-insensitively).
/// Images come back sorted by `source_path`. With `limit_per_class`, the
/// first `n` decodable files of each class in that order are kept.
pub fn ingest_corpus(root: &Path, limit_per_class: Option<usize>) -> Result<Corpus> {
    let dirs = class_dirs(root)?;
    let mut summary = IngestSummary {
        root: root.display().to_string(),
        ..Default::default()
    };
    let mut images = Vec::new();
    for label in Label::ALL {
        let dir = &dirs[label.index()];
        let dir_name = dir.file_name().expect("listed directory").to_string_lossy().into_owned();
        let mut candidates = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))? {
            let entry = entry.map_err(|e| CoreError::io(dir, e))?;
            let path = entry.path();
            if path.is_file() && is_png(&path) {
                let file = entry.file_name().to_string_lossy().into_owned();
                candidates.push(Candidate {
                    source_path: format!("{dir_name}/{file}"),
                    path,
                    label,
                });
            }
        }
        candidates.sort_by(|a, b| a.source_path.cmp(&b.source_path));
        let limit = limit_per_class.unwrap_or(usize::MAX);
        let mut kept = 0;
        let mut pos = 0;
        // decode in parallel chunks so a limit does not decode the whole class
        while kept < limit && pos < candidates.len() {
            let want = (limit - kept).min(candidates.len() - pos);
            let chunk = &candidates[pos..pos + want];
            let decoded: Vec<_> = chunk.par_iter().map(|c| decode(&c.path)).collect();
            for (c, result) in chunk.iter().zip(decoded) {
                match result {
                    Ok(pixels) => {
                        images.push(LabeledImage {
                            pixels,
                            label: c.label,
                            source_path: c.source_path.clone(),
                        });
                        kept += 1;
                    }
                    Err(reason) => {
                        warn!("skipping {}: {reason}", c.source_path);
                        summary.skipped.push(SkippedFile {
                            path: c.source_path.clone(),
                            reason,
                        });
                    }
                }
            }
            pos += want;
        }
        summary.per_class[label.index()] = kept;
    }
    images.sort_by(|a, b| a.source_path.cmp(&b.source_path));
    Ok(Corpus { images, summary })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// 70/15/15 fractions.
    Svm,
    /// 85% train, the rest halved into validation and test.
    Cnn,
    /// 8,000 + 3,000 images per class for train and validation, the rest
    /// for test.
    Transfer,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Svm => "svm",
            Scheme::Cnn => "cnn",
            Scheme::Transfer => "transfer",
        }
    }
}

impl FromStr for Scheme {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svm" => Ok(Scheme::Svm),
            "cnn" => Ok(Scheme::Cnn),
            "transfer" => Ok(Scheme::Transfer),
            other => Err(CoreError::Config(format!("unknown split scheme `{other}`"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const TRANSFER_TRAIN_PER_CLASS: usize = 8_000;
pub const TRANSFER_VAL_PER_CLASS: usize = 3_000;
/// Fractional equivalents of the fixed transfer counts on the 27,558-image
/// release, used when the corpus is too small for them.
pub const TRANSFER_TRAIN_FRACTION: f64 = 0.58;
pub const TRANSFER_VAL_FRACTION: f64 = 0.22;
pub const CNN_TRAIN_FRACTION: f64 = 0.85;
pub const SVM_TRAIN_FRACTION: f64 = 0.70;
pub const SVM_VAL_FRACTION: f64 = 0.15;

/// Indices into the corpus the split was made from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub scheme: Scheme,
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn class_counts(part: &[usize], labels: &[Label]) -> [usize; 2] {
        let mut counts = [0; 2];
        for &i in part {
            counts[labels[i].index()] += 1;
        }
        counts
    }
}

fn floor_frac(n: usize, fraction: f64) -> usize {
    // the epsilon keeps exact products such as 10 * 0.7 from flooring to 6
    ((n as f64) * fraction + 1e-9).floor() as usize
}

/// Splits the corpus under `scheme`; see [`split_labels`].
pub fn make_split(corpus: &[LabeledImage], scheme: Scheme, seed: u64) -> Result<DatasetSplit> {
    let labels: Vec<Label> = corpus.iter().map(|i| i.label).collect();
    split_labels(&labels, scheme, seed)
}

/// Splits sample indices by label alone. The same `(labels, scheme, seed)`
/// always gives the same split.
pub fn split_labels(labels: &[Label], scheme: Scheme, seed: u64) -> Result<DatasetSplit> {
    if labels.is_empty() {
        return Err(CoreError::Data("cannot split an empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = labels.len();
    let mut warnings = Vec::new();
    let (train, validation, test) = match scheme {
        Scheme::Svm | Scheme::Cnn => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let (n_train, n_val) = if scheme == Scheme::Svm {
                (floor_frac(n, SVM_TRAIN_FRACTION), floor_frac(n, SVM_VAL_FRACTION))
            } else {
                let t = floor_frac(n, CNN_TRAIN_FRACTION);
                (t, (n - t) / 2)
            };
            let test = order.split_off(n_train + n_val);
            let validation = order.split_off(n_train);
            (order, validation, test)
        }
        Scheme::Transfer => {
            let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
            for (i, l) in labels.iter().enumerate() {
                pools[l.index()].push(i);
            }
            let fixed = TRANSFER_TRAIN_PER_CLASS + TRANSFER_VAL_PER_CLASS;
            let (per_train, per_val) = if pools.iter().all(|p| p.len() >= fixed) {
                (TRANSFER_TRAIN_PER_CLASS, TRANSFER_VAL_PER_CLASS)
            } else if n >= 2 * fixed {
                return Err(CoreError::Data(format!(
                    "class imbalance prevents a balanced transfer split: {} uninfected, {} \
                     parasitized, need {fixed} of each",
                    pools[0].len(),
                    pools[1].len()
                )));
            } else {
                let per_train = floor_frac(n, TRANSFER_TRAIN_FRACTION) / 2;
                let per_val = floor_frac(n, TRANSFER_VAL_FRACTION) / 2;
                let msg = format!(
                    "corpus of {n} is too small for {TRANSFER_TRAIN_PER_CLASS}/{TRANSFER_VAL_PER_CLASS} \
                     images per class; using {per_train}/{per_val} per class instead"
                );
                warn!("{msg}");
                warnings.push(msg);
                if let Some(short) = pools.iter().position(|p| p.len() < per_train + per_val) {
                    return Err(CoreError::Data(format!(
                        "class imbalance prevents a balanced transfer split: only {} {} images, \
                         need {}",
                        pools[short].len(),
                        Label::ALL[short].name(),
                        per_train + per_val
                    )));
                }
                (per_train, per_val)
            };
            let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
            for pool in &mut pools {
                pool.shuffle(&mut rng);
                train.extend_from_slice(&pool[..per_train]);
                validation.extend_from_slice(&pool[per_train..per_train + per_val]);
                test.extend_from_slice(&pool[per_train + per_val..]);
            }
            train.shuffle(&mut rng);
            validation.shuffle(&mut rng);
            test.shuffle(&mut rng);
            (train, validation, test)
        }
    };
    Ok(DatasetSplit {
        scheme,
        seed,
        train,
        validation,
        test,
        warnings,
    })
}

/// Draws a class-balanced random subset of `total` samples (the odd one,
/// if any, from the uninfected class) and returns its indices in ascending
/// order.
pub fn balanced_subset(labels: &[Label], total: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(total);
    for label in Label::ALL {
        let want = total / 2 + usize::from(label == Label::Uninfected && total % 2 == 1);
        let mut pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if pool.len() < want {
            return Err(CoreError::Data(format!(
                "a balanced subset of {total} needs {want} {label} images, corpus has {}",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..want]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Serialized form of a split: source paths instead of indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub scheme: Scheme,
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn new(split: &DatasetSplit, corpus: &[LabeledImage]) -> Self {
        let paths = |part: &[usize]| part.iter().map(|&i| corpus[i].source_path.clone()).collect();
        Self {
            scheme: split.scheme,
            seed: split.seed,
            train: paths(&split.train),
            validation: paths(&split.validation),
            test: paths(&split.test),
        }
    }

    /// Maps the manifest back onto a corpus; every path must be present.
    pub fn resolve(&self, corpus: &[LabeledImage]) -> Result<DatasetSplit> {
        let index: HashMap<&str, usize> = corpus
            .iter()
            .enumerate()
            .map(|(i, img)| (img.source_path.as_str(), i))
            .collect();
        let lookup = |paths: &[String]| -> Result<Vec<usize>> {
            paths
                .iter()
                .map(|p| {
                    index.get(p.as_str()).copied().ok_or_else(|| {
                        CoreError::Data(format!("split manifest names `{p}`, which is not in the corpus"))
                    })
                })
                .collect()
        };
        Ok(DatasetSplit {
            scheme: self.scheme,
            seed: self.seed,
            train: lookup(&self.train)?,
            validation: lookup(&self.validation)?,
            test: lookup(&self.test)?,
            warnings: Vec::new(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
