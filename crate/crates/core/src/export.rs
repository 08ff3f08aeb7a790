//! Browser-loadable model bundles with the preprocessing contract and a
//! reload fidelity check.

use std::fs;
use std::path::{Path, PathBuf};

use plasmodium_nn::{io, Model, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::CLASS_NAMES;
use crate::error::{CoreError, Result};
use crate::preprocess::PreprocessProfile;

pub const PROBE_SIZE: usize = 32;
pub const FIDELITY_TOLERANCE: f32 = 1e-4;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub model_name: String,
    /// SHA-256 of the training run manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<serde_json::Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub probe_count: usize,
    pub max_abs_diff: f32,
    pub tolerance: f32,
}

/// Everything the browser needs besides the weights, stored as the
/// `userDefinedMetadata` of `model.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub labels: Vec<String>,
    pub preprocess: PreprocessProfile,
    pub metadata: BundleMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<Fidelity>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportBundle {
    pub dir: PathBuf,
    pub info: BundleInfo,
}

fn write_info(dir: &Path, info: &BundleInfo) -> Result<()> {
    let mut file = io::read_model_file(dir)?;
    file.user_defined_metadata = Some(serde_json::to_value(info).expect("bundle info serializes"));
    let path = dir.join(io::MODEL_FILE);
    let text = serde_json::to_string(&file).expect("model file serializes");
    fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
}

/// Writes `model` to `out_dir`, reloads it and compares class
/// probabilities on `probe` (a `[n, h, w, 3]` batch of standardized
/// images). Deviations above the tolerance are an error.
pub fn export_model(
    model: &Model,
    profile: &PreprocessProfile,
    metadata: BundleMetadata,
    probe: &Tensor,
    out_dir: &Path,
) -> Result<ExportBundle> {
    let (h, w) = profile.target_size;
    if model.input_shape() != [h, w, 3] {
        return Err(CoreError::Config(format!(
            "profile size {h}x{w} does not match model input {:?}",
            model.input_shape()
        )));
    }
    if probe.batch() == 0 {
        return Err(CoreError::Data("the export probe set is empty".into()));
    }
    let mut info = BundleInfo {
        labels: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        preprocess: profile.without_augment(),
        metadata,
        fidelity: None,
    };
    let meta = serde_json::to_value(&info).expect("bundle info serializes");
    io::save(model, &info.metadata.model_name, out_dir, Some(meta), io::DEFAULT_SHARD_BYTES)?;
    let (reloaded, _) = io::load(out_dir)?;
    let native = model.predict_batched(probe, PROBE_SIZE)?;
    let bundled = reloaded.predict_batched(probe, PROBE_SIZE)?;
    let fidelity = Fidelity {
        probe_count: probe.batch(),
        max_abs_diff: native.max_abs_diff(&bundled),
        tolerance: FIDELITY_TOLERANCE,
    };
    // NaN compares false, so test for the good case
    if !(fidelity.max_abs_diff < FIDELITY_TOLERANCE) {
        return Err(CoreError::Fidelity {
            max_abs_diff: fidelity.max_abs_diff,
            tolerance: FIDELITY_TOLERANCE,
        });
    }
    info.fidelity = Some(fidelity);
    write_info(out_dir, &info)?;
    Ok(ExportBundle {
        dir: out_dir.to_path_buf(),
        info,
    })
}

/// Loads a bundle written by [`export_model`].
pub fn load_bundle(dir: &Path) -> Result<(Model, BundleInfo)> {
    let (model, meta) = io::load(dir)?;
    let meta = meta.ok_or_else(|| {
        CoreError::Data(format!("{} has no bundle metadata", dir.join(io::MODEL_FILE).display()))
    })?;
    let info: BundleInfo = serde_json::from_value(meta).map_err(|source| CoreError::Json {
        path: dir.join(io::MODEL_FILE),
        source,
    })?;
    Ok((model, info))
}
