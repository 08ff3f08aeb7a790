//! On-disk model format: a `model.json` holding a Keras-style functional
//! topology and a weights manifest, plus little-endian `float32` shard
//! files. This is the layers-model layout browser runtimes load directly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::LayerGraph;
use crate::keras;
use crate::model::Model;
use crate::tensor::Tensor;

pub const MODEL_FILE: &str = "model.json";
pub const FORMAT: &str = "layers-model";
pub const DEFAULT_SHARD_BYTES: usize = 4 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    /// `<layer>/<param>`.
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestGroup {
    pub paths: Vec<String>,
    pub weights: Vec<WeightEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelFile {
    pub format: String,
    pub generated_by: String,
    pub model_topology: serde_json::Value,
    pub weights_manifest: Vec<ManifestGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_defined_metadata: Option<serde_json::Value>,
}

impl ModelFile {
    pub fn graph(&self) -> Result<LayerGraph> {
        keras::from_keras(&self.model_topology)
    }
}

/// Writes `model.json` and weight shards into `dir`, creating it if needed.
pub fn save(
    model: &Model,
    name: &str,
    dir: &Path,
    metadata: Option<serde_json::Value>,
    shard_bytes: usize,
) -> Result<ModelFile> {
    fs::create_dir_all(dir).map_err(|e| NnError::io(dir, e))?;
    let mut entries = Vec::new();
    let mut bytes: Vec<u8> = Vec::new();
    for (i, node) in model.graph().nodes.iter().enumerate() {
        for (spec, t) in model.specs(i).iter().zip(model.params(i)) {
            entries.push(WeightEntry {
                name: format!("{}/{}", node.name, spec.name),
                shape: spec.shape.clone(),
                dtype: "float32".into(),
            });
            bytes.reserve(t.len() * 4);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let shard_bytes = shard_bytes.max(4) / 4 * 4;
    let chunks: Vec<&[u8]> = if bytes.is_empty() {
        Vec::new()
    } else {
        bytes.chunks(shard_bytes).collect()
    };
    let mut paths = Vec::with_capacity(chunks.len());
    for (k, chunk) in chunks.iter().enumerate() {
        let name = format!("group1-shard{}of{}.bin", k + 1, chunks.len());
        let path = dir.join(&name);
        fs::write(&path, chunk).map_err(|e| NnError::io(&path, e))?;
        paths.push(name);
    }
    let file = ModelFile {
        format: FORMAT.into(),
        generated_by: concat!("plasmodium-nn ", env!("CARGO_PKG_VERSION")).into(),
        model_topology: keras::to_keras(model.graph(), name),
        weights_manifest: vec![ManifestGroup {
            paths,
            weights: entries,
        }],
        user_defined_metadata: metadata,
    };
    let path = dir.join(MODEL_FILE);
    let text = serde_json::to_string_pretty(&file).expect("model file serializes");
    fs::write(&path, text).map_err(|e| NnError::io(&path, e))?;
    Ok(file)
}

pub fn read_model_file(dir: &Path) -> Result<ModelFile> {
    let path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&path).map_err(|e| NnError::io(&path, e))?;
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|source| NnError::Json { path, source })?;
    if file.format != FORMAT {
        return Err(NnError::Weights(format!(
            "unsupported model format `{}` in {}",
            file.format,
            dir.display()
        )));
    }
    Ok(file)
}

/// Reads every named tensor of a saved model, in manifest order.
pub fn read_tensors(dir: &Path, file: &ModelFile) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    for group in &file.weights_manifest {
        let mut bytes = Vec::new();
        for p in &group.paths {
            let path = dir.join(p);
            bytes.extend(fs::read(&path).map_err(|e| NnError::io(&path, e))?);
        }
        let mut offset = 0;
        for entry in &group.weights {
            if entry.dtype != "float32" {
                return Err(NnError::Weights(format!(
                    "`{}` has unsupported dtype {}",
                    entry.name, entry.dtype
                )));
            }
            let len: usize = entry.shape.iter().product();
            let end = offset + len * 4;
            if end > bytes.len() {
                return Err(NnError::Weights(format!(
                    "shards of {} end before `{}`",
                    dir.display(),
                    entry.name
                )));
            }
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            out.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)?));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(NnError::Weights(format!(
                "{} trailing bytes in shards of {}",
                bytes.len() - offset,
                dir.display()
            )));
        }
    }
    Ok(out)
}

/// Loads a model saved with [`save`], returning its metadata as well.
pub fn load(dir: &Path) -> Result<(Model, Option<serde_json::Value>)> {
    let file = read_model_file(dir)?;
    let tensors = read_tensors(dir, &file)?;
    let graph = file.graph()?;
    let specs = graph.param_specs()?;
    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut params = Vec::with_capacity(specs.len());
    for (node, node_specs) in graph.nodes.iter().zip(&specs) {
        let mut group = Vec::with_capacity(node_specs.len());
        for spec in node_specs {
            let name = format!("{}/{}", node.name, spec.name);
            let t = by_name
                .remove(&name)
                .ok_or_else(|| NnError::Weights(format!("missing weight `{name}`")))?;
            group.push(t);
        }
        params.push(group);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(NnError::Weights(format!("unexpected weight `{extra}`")));
    }
    Ok((Model::from_params(graph, params)?, file.user_defined_metadata))
}

/// Copies every weight of the model saved in `dir` into the same-named
/// layers of `target`. Every saved weight must find a home with the same
/// shape; layers of `target` absent from the file are left untouched.
/// Returns the number of layers copied.
pub fn load_into(target: &mut Model, dir: &Path) -> Result<usize> {
    let file = read_model_file(dir)?;
    let tensors = read_tensors(dir, &file)?;
    let mut layers = std::collections::BTreeSet::new();
    for (name, tensor) in tensors {
        let (layer, param) = name
            .rsplit_once('/')
            .ok_or_else(|| NnError::Weights(format!("weight name `{name}` lacks a layer")))?;
        let node = target.graph().node_index(layer).ok_or_else(|| {
            NnError::Weights(format!("saved layer `{layer}` does not exist in the target model"))
        })?;
        target.set_param(node, param, tensor)?;
        layers.insert(node);
    }
    Ok(layers.len())
}
