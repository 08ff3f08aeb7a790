//! Run directories (`runs/<run-id>/`) and the cross-run comparison table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnn_models::CnnArch;
use crate::dataset::Scheme;
use crate::error::{CoreError, Result};
use crate::metrics::{render_report, EvaluationReport};
use crate::preprocess::PreprocessProfile;
use crate::train::TrainingHistory;
use crate::transfer::{Backbone, Regime};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const BUNDLE_DIR: &str = "bundle";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunKind {
    Svm,
    Cnn { arch: CnnArch },
    Transfer { backbone: Backbone, regime: Regime },
}

impl RunKind {
    /// The twelve model/mode cells of the comparison table, in row order.
    pub fn matrix() -> Vec<RunKind> {
        let mut out = vec![
            RunKind::Svm,
            RunKind::Cnn { arch: CnnArch::A },
            RunKind::Cnn { arch: CnnArch::B },
        ];
        for backbone in Backbone::ALL {
            for regime in Regime::ALL {
                out.push(RunKind::Transfer { backbone, regime });
            }
        }
        out
    }

    pub fn model_name(self) -> String {
        match self {
            RunKind::Svm => "svm".into(),
            RunKind::Cnn { arch } => arch.name().into(),
            RunKind::Transfer { backbone, regime } => format!("{backbone}-{regime}"),
        }
    }

    pub fn scheme(self) -> Scheme {
        match self {
            RunKind::Svm => Scheme::Svm,
            RunKind::Cnn { .. } => Scheme::Cnn,
            RunKind::Transfer { .. } => Scheme::Transfer,
        }
    }

    fn row_labels(self) -> [&'static str; 3] {
        match self {
            RunKind::Svm => ["Machine learning", "SVM", "RBF kernel, raw pixels"],
            RunKind::Cnn { arch: CnnArch::A } => {
                ["Deep learning", "CNN-A", "dropout, weight init, batch norm"]
            }
            RunKind::Cnn { arch: CnnArch::B } => {
                ["Deep learning", "CNN-B", "dropout, weight init, zero padding"]
            }
            RunKind::Transfer { backbone, regime } => [
                "Transfer learning",
                backbone.display_name(),
                match regime {
                    Regime::Frozen => "frozen backbone",
                    Regime::Incremental => "incremental unfreezing",
                    Regime::Full => "whole network fine-tuned",
                },
            ],
        }
    }
}

pub fn run_id(kind: RunKind, seed: u64) -> String {
    format!("{}-seed{seed}", kind.model_name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub mcc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc_roc: Option<f64>,
}

impl From<&EvaluationReport> for MetricSummary {
    fn from(r: &EvaluationReport) -> Self {
        Self {
            accuracy: r.accuracy,
            macro_precision: r.macro_avg.precision,
            macro_recall: r.macro_avg.recall,
            macro_f1: r.macro_avg.f1,
            mcc: r.mcc,
            auc_roc: r.auc_roc,
        }
    }
}

/// Everything needed to reproduce a run; deliberately free of timestamps
/// and host details so identical runs produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub model: RunKind,
    pub seed: u64,
    pub scheme: Scheme,
    pub corpus_size: usize,
    /// SHA-256 of the split manifest JSON.
    pub split_hash: String,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<PreprocessProfile>,
    pub metrics: MetricSummary,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CoreError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the manifest, both report renderings and (for trained
/// networks) the history into `dir`.
pub fn write_run(
    dir: &Path,
    manifest: &RunManifest,
    report: &EvaluationReport,
    history: Option<&TrainingHistory>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    write(&dir.join(MANIFEST_FILE), &pretty(manifest))?;
    write(&dir.join(REPORT_JSON), &pretty(report))?;
    write(&dir.join(REPORT_TEXT), &render_report(report))?;
    if let Some(h) = history {
        write(&dir.join(HISTORY_FILE), &h.to_csv())?;
    }
    Ok(())
}

pub fn read_run(dir: &Path) -> Result<(RunManifest, EvaluationReport)> {
    Ok((read_json(&dir.join(MANIFEST_FILE))?, read_json(&dir.join(REPORT_JSON))?))
}

/// Hash of the manifest file as written, recorded in exported bundles.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub model: RunKind,
    pub run_id: Option<String>,
    /// Accuracy and macro precision, recall, F1, straight from the run's
    /// report.
    pub values: Option<[f64; 4]>,
}

/// One row per cell of [`RunKind::matrix`], filled from the given runs.
/// Two runs for the same cell are an error.
pub fn compare(runs: &[(RunManifest, EvaluationReport)]) -> Result<Vec<CompareRow>> {
    let mut rows: Vec<CompareRow> = RunKind::matrix()
        .into_iter()
        .map(|model| CompareRow {
            model,
            run_id: None,
            values: None,
        })
        .collect();
    for (m, r) in runs {
        let row = rows
            .iter_mut()
            .find(|row| row.model == m.model)
            .expect("matrix covers every run kind");
        if let Some(prev) = &row.run_id {
            return Err(CoreError::Config(format!(
                "runs `{prev}` and `{}` both fill the {} row",
                m.run_id,
                m.model.model_name()
            )));
        }
        row.run_id = Some(m.run_id.clone());
        row.values = Some([r.accuracy, r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1]);
    }
    Ok(rows)
}

/// Like [`compare`], but several seeds of one cell are averaged. The row
/// names the first run and the seed count.
pub fn compare_mean(runs: &[(RunManifest, EvaluationReport)]) -> Vec<CompareRow> {
    RunKind::matrix()
        .into_iter()
        .map(|model| {
            let cell: Vec<&(RunManifest, EvaluationReport)> = runs.iter().filter(|(m, _)| m.model == model).collect();
            if cell.is_empty() {
                return CompareRow {
                    model,
                    run_id: None,
                    values: None,
                };
            }
            let mut sum = [0.0; 4];
            for (_, r) in &cell {
                let v = [r.accuracy, r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1];
                sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            }
            CompareRow {
                model,
                run_id: Some(format!("{} (mean of {})", cell[0].0.run_id, cell.len())),
                values: Some(sum.map(|s| s / cell.len() as f64)),
            }
        })
        .collect()
}

pub fn render_compare(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:<12} {:<34} {:>9} {:>9} {:>9} {:>9}",
        "Method", "Model", "Mode", "Accuracy", "Precision", "Recall", "F1-score"
    );
    for row in rows {
        let [method, model, mode] = row.model.row_labels();
        let _ = write!(out, "{method:<18} {model:<12} {mode:<34}");
        match row.values {
            Some(v) => {
                for x in v {
                    let _ = write!(out, " {x:>9.4}");
                }
            }
            None => {
                for _ in 0..4 {
                    let _ = write!(out, " {:>9}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_has_twelve_distinct_cells() {
        let m = RunKind::matrix();
        assert_eq!(m.len(), 12);
        let mut names: Vec<_> = m.iter().map(|k| k.model_name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 12);
    }

    #[test]
    fn run_kind_serializes_with_a_tag() {
        let k = RunKind::Transfer {
            backbone: Backbone::Xception,
            regime: Regime::Full,
        };
        let v = serde_json::to_value(k).unwrap();
        assert_eq!(v, serde_json::json!({"kind": "transfer", "backbone": "xception", "regime": "full"}));
        assert_eq!(k.model_name(), "xception-full");
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
