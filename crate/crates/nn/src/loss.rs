//! Categorical cross-entropy over softmax outputs.

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Probabilities are clipped to `[CLIP, 1 - CLIP]` before taking logs.
pub const CLIP: f32 = 1e-7;

fn check(probs: &Tensor, labels: &[usize]) -> Result<usize> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(NnError::Shape(format!(
            "{} labels for probabilities of shape {:?}",
            labels.len(),
            shape
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(NnError::Shape(format!("label {bad} out of range for {} classes", shape[1])));
    }
    Ok(shape[1])
}

/// Mean cross-entropy of integer labels under row-wise probabilities.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f32> {
    let k = check(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = probs
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &l)| -(row[l].clamp(CLIP, 1.0 - CLIP) as f64).ln())
        .sum();
    Ok((total / labels.len() as f64) as f32)
}

/// Loss and its gradient with respect to the softmax pre-activation,
/// `(p - onehot) / N`.
pub fn softmax_cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let loss = cross_entropy(probs, labels)?;
    let k = probs.shape()[1];
    let scale = 1.0 / labels.len().max(1) as f32;
    let mut grad = probs.clone();
    for (row, &l) in grad.data_mut().chunks_mut(k).zip(labels) {
        row[l] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss, grad))
}

/// Fraction of rows whose arg-max equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f32> {
    check(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = probs
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f32 / labels.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_matches_hand_computation() {
        let p = Tensor::from_vec(&[2, 2], vec![0.8, 0.2, 0.25, 0.75]).unwrap();
        let loss = cross_entropy(&p, &[0, 0]).unwrap();
        let want = -(0.8f32.ln() + 0.25f32.ln()) / 2.0;
        assert!((loss - want).abs() < 1e-6);
        assert_eq!(accuracy(&p, &[0, 0]).unwrap(), 0.5);
    }

    #[test]
    fn certain_wrong_prediction_is_clipped() {
        let p = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let loss = cross_entropy(&p, &[0]).unwrap();
        assert!((loss - -(CLIP.ln())).abs() < 1e-3);
    }

    #[test]
    fn gradient_is_p_minus_onehot_over_n() {
        let p = Tensor::from_vec(&[2, 2], vec![0.6, 0.4, 0.1, 0.9]).unwrap();
        let (_, g) = softmax_cross_entropy(&p, &[1, 1]).unwrap();
        let want = [0.3, -0.3, 0.05, -0.05];
        for (a, b) in g.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let p = Tensor::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert!(cross_entropy(&p, &[2]).is_err());
        assert!(cross_entropy(&p, &[0, 1]).is_err());
    }
}
