//! Raw-pixel RBF support vector machine with grid-searched `C` and `gamma`.
//!
//! The dual problem is solved by SMO with second-order working-set
//! selection; kernel rows are computed on demand and kept in an LRU cache.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use image::RgbImage;
use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{CoreError, Result};
use crate::preprocess::{standardize, PreprocessProfile};

pub const DEFAULT_C_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];
pub const DEFAULT_GAMMA_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];
pub const DEFAULT_FOLDS: usize = 5;
pub const TOLERANCE: f64 = 1e-3;
const TAU: f64 = 1e-12;
/// Kernel cache budget per trained model.
const CACHE_BYTES: usize = 256 << 20;

/// Flattened, row-major, RGB-interleaved standardized pixels.
pub fn featurize(image: &RgbImage, profile: &PreprocessProfile) -> Result<Vec<f32>> {
    if !profile.normalize {
        return Err(CoreError::Config("SVM features require unit-range normalization".into()));
    }
    Ok(standardize(image, &profile.without_augment())?.into_data())
}

/// Feature rows with their labels, stored contiguously.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub data: Vec<f32>,
    pub labels: Vec<Label>,
}

impl Features {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn from_rows(rows: &[Vec<f32>], labels: &[Label]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut f = Self::new(dim);
        for (r, &l) in rows.iter().zip(labels) {
            f.push(r, l)?;
        }
        Ok(f)
    }

    pub fn push(&mut self, row: &[f32], label: Label) -> Result<()> {
        if row.len() != self.dim {
            return Err(CoreError::Data(format!(
                "feature length {} differs from {}",
                row.len(),
                self.dim
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Data("features must be finite".into()));
        }
        self.data.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..][..self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Features {
        let mut f = Features::new(self.dim);
        for &i in indices {
            f.data.extend_from_slice(self.row(i));
            f.labels.push(self.labels[i]);
        }
        f
    }

    pub fn with_swapped_labels(&self) -> Features {
        Features {
            labels: self.labels.iter().map(|l| l.other()).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmHyperParams {
    #[serde(rename = "C")]
    pub c: f64,
    pub gamma: f64,
}

impl SvmHyperParams {
    pub fn new(c: f64, gamma: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) || !(gamma > 0.0 && gamma.is_finite()) {
            return Err(CoreError::Config(format!(
                "C and gamma must be positive, got C={c}, gamma={gamma}"
            )));
        }
        Ok(Self { c, gamma })
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        for l in 0..8 {
            acc[l] += a[k * 8 + l] * b[k * 8 + l];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for k in chunks * 8..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn rbf(gamma: f64, norm_a: f32, norm_b: f32, ab: f32) -> f64 {
    let d2 = (norm_a as f64 + norm_b as f64 - 2.0 * ab as f64).max(0.0);
    (-gamma * d2).exp()
}

struct KernelCache<'a> {
    x: &'a Features,
    norms: Vec<f32>,
    gamma: f64,
    rows: HashMap<usize, (Arc<[f32]>, u64)>,
    capacity: usize,
    clock: u64,
}

impl<'a> KernelCache<'a> {
    fn new(x: &'a Features, gamma: f64) -> Self {
        let norms = (0..x.len()).map(|i| dot(x.row(i), x.row(i))).collect();
        let capacity = (CACHE_BYTES / (4 * x.len().max(1))).max(2);
        Self {
            x,
            norms,
            gamma,
            rows: HashMap::new(),
            capacity,
            clock: 0,
        }
    }

    fn row(&mut self, i: usize) -> Arc<[f32]> {
        self.clock += 1;
        let clock = self.clock;
        if let Some((row, used)) = self.rows.get_mut(&i) {
            *used = clock;
            return row.clone();
        }
        if self.rows.len() >= self.capacity {
            let oldest = *self
                .rows
                .iter()
                .min_by_key(|(_, (_, used))| *used)
                .map(|(k, _)| k)
                .expect("cache is non-empty");
            self.rows.remove(&oldest);
        }
        let xi = self.x.row(i);
        let ni = self.norms[i];
        let row: Arc<[f32]> = (0..self.x.len())
            .into_par_iter()
            .map(|j| rbf(self.gamma, ni, self.norms[j], dot(xi, self.x.row(j))) as f32)
            .collect::<Vec<_>>()
            .into();
        self.rows.insert(i, (row.clone(), clock));
        row
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub params: SvmHyperParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_profile: Option<PreprocessProfile>,
    pub dim: usize,
    /// `y_i * alpha_i` per support vector, with `y = +1` for parasitized.
    pub dual_coef: Vec<f64>,
    pub support_vectors: Vec<Vec<f32>>,
    pub intercept: f64,
    pub iterations: usize,
    #[serde(skip)]
    sv_norms: Vec<f32>,
}

impl SvmModel {
    fn prepare(&mut self) {
        self.sv_norms = self.support_vectors.iter().map(|v| dot(v, v)).collect();
    }

    /// Signed margin; positive means parasitized.
    pub fn decision(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(CoreError::Data(format!(
                "feature length {} does not match the model's {}",
                x.len(),
                self.dim
            )));
        }
        let nx = dot(x, x);
        let norms: &[f32] = &self.sv_norms;
        let sum: f64 = self
            .support_vectors
            .iter()
            .zip(&self.dual_coef)
            .enumerate()
            .map(|(k, (sv, a))| {
                let ns = norms.get(k).copied().unwrap_or_else(|| dot(sv, sv));
                a * rbf(self.params.gamma, ns, nx, dot(sv, x))
            })
            .sum();
        Ok(sum - self.intercept)
    }

    /// A score of exactly 0 is called uninfected.
    pub fn predict(&self, x: &[f32]) -> Result<(Label, f64)> {
        let s = self.decision(x)?;
        let label = if s > 0.0 {
            Label::Parasitized
        } else {
            Label::Uninfected
        };
        Ok((label, s))
    }

    pub fn predict_all(&self, x: &Features) -> Result<Vec<(Label, f64)>> {
        (0..x.len()).into_par_iter().map(|i| self.predict(x.row(i))).collect()
    }

    pub fn accuracy(&self, x: &Features) -> Result<f64> {
        if x.is_empty() {
            return Ok(0.0);
        }
        let hits = self
            .predict_all(x)?
            .iter()
            .zip(&x.labels)
            .filter(|((p, _), t)| p == *t)
            .count();
        Ok(hits as f64 / x.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("svm model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut m: SvmModel = serde_json::from_str(text)
            .map_err(|e| CoreError::Data(format!("malformed SVM model: {e}")))?;
        if m.dual_coef.len() != m.support_vectors.len()
            || m.support_vectors.iter().any(|v| v.len() != m.dim)
        {
            return Err(CoreError::Data("SVM model has inconsistent support vectors".into()));
        }
        m.prepare();
        Ok(m)
    }
}

fn sign(l: Label) -> f64 {
    match l {
        Label::Parasitized => 1.0,
        Label::Uninfected => -1.0,
    }
}

/// Fits a C-SVC with an RBF kernel.
pub fn train_svm(x: &Features, params: SvmHyperParams) -> Result<SvmModel> {
    let n = x.len();
    if n == 0 {
        return Err(CoreError::Data("cannot train an SVM on no samples".into()));
    }
    if x.labels.iter().all(|&l| l == x.labels[0]) {
        return Err(CoreError::Data("SVM training data contains a single class".into()));
    }
    let c = params.c;
    let y: Vec<f64> = x.labels.iter().map(|&l| sign(l)).collect();
    let mut cache = KernelCache::new(x, params.gamma);
    // K(x, x) = 1 for the RBF kernel
    let qd = vec![1.0f64; n];
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let max_iter = (100 * n).max(10_000_000);
    let mut iter = 0;
    while iter < max_iter {
        // first index: maximal violating -y*G among the "up" set
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let in_up = if y[t] > 0.0 { !upper(alpha[t]) } else { !lower(alpha[t]) };
            if in_up && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else { break };
        let ki = cache.row(i);
        // second index by maximal objective decrease
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best_obj = f64::INFINITY;
        for t in 0..n {
            let in_low = if y[t] > 0.0 { !lower(alpha[t]) } else { !upper(alpha[t]) };
            if !in_low {
                continue;
            }
            let ygt = y[t] * grad[t];
            gmax2 = gmax2.max(ygt);
            let diff = gmax + ygt;
            if diff > 0.0 {
                let quad = qd[i] + qd[t] - 2.0 * ki[t] as f64;
                let obj = -(diff * diff) / if quad > 0.0 { quad } else { TAU };
                if obj <= best_obj {
                    best_obj = obj;
                    j_sel = Some(t);
                }
            }
        }
        let Some(j) = j_sel.filter(|_| gmax + gmax2 >= TOLERANCE) else {
            break;
        };
        iter += 1;
        let kj = cache.row(j);
        let kij = ki[j] as f64;
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (qd[i] + qd[j] + 2.0 * kij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (qd[i] + qd[j] - 2.0 * kij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        // G_t += Q_ti * di + Q_tj * dj with Q_ts = y_t y_s K_ts
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] as f64 * di + y[j] * kj[t] as f64 * dj);
        }
    }
    if iter >= max_iter {
        log::warn!("SMO stopped at the iteration limit ({max_iter}) before convergence");
    }
    // intercept from free vectors, else the midpoint of the feasible range
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };
    let mut model = SvmModel {
        params,
        feature_profile: None,
        dim: x.dim,
        dual_coef: Vec::new(),
        support_vectors: Vec::new(),
        intercept: rho,
        iterations: iter,
        sv_norms: Vec::new(),
    };
    for t in 0..n {
        if alpha[t] > 0.0 {
            model.dual_coef.push(y[t] * alpha[t]);
            model.support_vectors.push(x.row(t).to_vec());
        }
    }
    model.prepare();
    debug!(
        "svm C={} gamma={}: {} iterations, {} support vectors",
        params.c,
        params.gamma,
        iter,
        model.support_vectors.len()
    );
    Ok(model)
}

/// Assigns each sample a fold in `0..k` so that every fold receives an
/// (almost) equal share of each class.
pub fn stratified_folds(labels: &[Label], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(CoreError::Config("cross-validation needs at least 2 folds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.len() < k {
            return Err(CoreError::Data(format!(
                "{k}-fold cross-validation needs at least {k} {label} samples, got {}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold[i] = pos % k;
        }
    }
    Ok(fold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    #[serde(rename = "C")]
    pub c: f64,
    pub gamma: f64,
    pub fold_mean_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: SvmHyperParams,
    pub scores: Vec<GridScore>,
    pub folds: usize,
    pub seed: u64,
}

impl GridSearchResult {
    pub fn score(&self, c: f64, gamma: f64) -> Option<f64> {
        self.scores
            .iter()
            .find(|s| s.c == c && s.gamma == gamma)
            .map(|s| s.fold_mean_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("C,gamma,fold_mean_accuracy\n");
        for s in &self.scores {
            let _ = writeln!(out, "{},{},{}", s.c, s.gamma, s.fold_mean_accuracy);
        }
        out
    }
}

/// Highest score wins; ties go to the lowest `C`, then the lowest `gamma`,
/// so the choice does not depend on the order of the grid.
pub fn select_best(scores: &[GridScore]) -> Option<SvmHyperParams> {
    scores
        .iter()
        .min_by(|a, b| {
            b.fold_mean_accuracy
                .total_cmp(&a.fold_mean_accuracy)
                .then(a.c.total_cmp(&b.c))
                .then(a.gamma.total_cmp(&b.gamma))
        })
        .map(|s| SvmHyperParams {
            c: s.c,
            gamma: s.gamma,
        })
}

/// Scores every `(C, gamma)` pair by stratified k-fold accuracy on `train`.
/// The table keeps the grid order (`C` outer, `gamma` inner).
pub fn grid_search(
    train: &Features,
    cs: &[f64],
    gammas: &[f64],
    folds: usize,
    seed: u64,
) -> Result<GridSearchResult> {
    if cs.is_empty() || gammas.is_empty() {
        return Err(CoreError::Config("the hyperparameter grid is empty".into()));
    }
    let pairs: Vec<SvmHyperParams> = cs
        .iter()
        .flat_map(|&c| gammas.iter().map(move |&g| SvmHyperParams::new(c, g)))
        .collect::<Result<_>>()?;
    let fold_of = stratified_folds(&train.labels, folds, seed)?;
    let parts: Vec<(Features, Features)> = (0..folds)
        .map(|f| {
            let (fit, held): (Vec<usize>, Vec<usize>) =
                (0..train.len()).partition(|&i| fold_of[i] != f);
            (train.subset(&fit), train.subset(&held))
        })
        .collect();
    let cells: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|p| (0..folds).map(move |f| (p, f)))
        .collect();
    let accs: Vec<f64> = cells
        .par_iter()
        .map(|&(p, f)| {
            let (fit, held) = &parts[f];
            train_svm(fit, pairs[p])?.accuracy(held)
        })
        .collect::<Result<_>>()?;
    let scores: Vec<GridScore> = pairs
        .iter()
        .enumerate()
        .map(|(p, hp)| {
            let fold_accuracies = accs[p * folds..(p + 1) * folds].to_vec();
            GridScore {
                c: hp.c,
                gamma: hp.gamma,
                fold_mean_accuracy: fold_accuracies.iter().sum::<f64>() / folds as f64,
                fold_accuracies,
            }
        })
        .collect();
    let best = select_best(&scores).expect("grid is non-empty");
    Ok(GridSearchResult {
        best,
        scores,
        folds,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xor() -> Features {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let labels = [Label::Uninfected, Label::Uninfected, Label::Parasitized, Label::Parasitized];
        Features::from_rows(&rows, &labels).unwrap()
    }

    #[test]
    fn rbf_separates_xor() {
        let x = xor();
        let m = train_svm(&x, SvmHyperParams::new(10.0, 1.0).unwrap()).unwrap();
        for i in 0..4 {
            assert_eq!(m.predict(x.row(i)).unwrap().0, x.labels[i]);
        }
    }

    #[test]
    fn xor_decision_matches_closed_form() {
        // by symmetry all four alphas are equal and the intercept is 0;
        // solve the stationarity condition for alpha by hand
        let x = xor();
        let (c, gamma) = (10.0, 1.0);
        let k1 = (-gamma * 1.0f64).exp();
        let k2 = (-gamma * 2.0f64).exp();
        // for a negative point: sum_j y_j alpha K = alpha * (-1 - k2 + 2 k1) = -1
        let alpha = 1.0 / (1.0 + k2 - 2.0 * k1);
        assert!(alpha < c);
        let m = train_svm(&x, SvmHyperParams::new(c, gamma).unwrap()).unwrap();
        assert!(m.intercept.abs() < 1e-3);
        for coef in &m.dual_coef {
            assert!((coef.abs() - alpha).abs() < 1e-2, "{coef} vs {alpha}");
        }
        for i in 0..4 {
            let s = m.decision(x.row(i)).unwrap();
            assert!((s.abs() - 1.0).abs() < 1e-2, "margin {s}");
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let m = train_svm(&xor(), SvmHyperParams::new(1.0, 1.0).unwrap()).unwrap();
        assert!(m.predict(&[0.0; 3]).is_err());
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Features::from_rows(&[vec![0.0], vec![1.0]], &[Label::Parasitized; 2]).unwrap();
        assert!(train_svm(&x, SvmHyperParams::new(1.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn json_round_trip_preserves_decisions() {
        let x = xor();
        let m = train_svm(&x, SvmHyperParams::new(10.0, 1.0).unwrap()).unwrap();
        let back = SvmModel::from_json(&m.to_json()).unwrap();
        for i in 0..4 {
            assert_eq!(back.decision(x.row(i)).unwrap(), m.decision(x.row(i)).unwrap());
        }
    }

    #[test]
    fn tie_break_prefers_small_c_then_small_gamma() {
        let s = |c, gamma, acc| GridScore {
            c,
            gamma,
            fold_mean_accuracy: acc,
            fold_accuracies: vec![acc],
        };
        let scores = [s(10.0, 0.1, 0.9), s(1.0, 1.0, 0.9), s(1.0, 0.01, 0.9), s(100.0, 0.001, 0.8)];
        assert_eq!(select_best(&scores), Some(SvmHyperParams { c: 1.0, gamma: 0.01 }));
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<Label> = (0..23).map(|i| Label::ALL[(i % 3 == 0) as usize]).collect();
        let f = stratified_folds(&labels, 5, 1).unwrap();
        for k in 0..5 {
            let pos = (0..23).filter(|&i| f[i] == k && labels[i] == Label::Parasitized).count();
            assert!((1..=2).contains(&pos));
        }
    }
}
