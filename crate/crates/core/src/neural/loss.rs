//! Softmax and categorical cross-entropy.

use super::attention::softmax_in_place;
use super::tensor::Tensor;
use super::NeuralError;

/// Row-wise softmax of `[B, K]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut p = logits.clone();
    p.data_mut().chunks_mut(k).for_each(softmax_in_place);
    p
}

fn check_labels(b: usize, k: usize, labels: &[usize]) -> Result<(), NeuralError> {
    if labels.len() != b {
        return Err(NeuralError::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NeuralError::Label { label: bad, classes: k });
    }
    Ok(())
}

/// Mean of `-ln p[target]` over the batch.
pub fn cce_loss(probs: &Tensor, labels: &[usize]) -> Result<f64, NeuralError> {
    let (b, k) = (probs.shape()[0], probs.shape()[1]);
    check_labels(b, k, labels)?;
    Ok(labels.iter().enumerate().map(|(i, &l)| -probs.data()[i * k + l].ln()).sum::<f64>() / b as f64)
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub probs: Tensor,
    /// Gradient of the loss with respect to the logits.
    pub grad: Tensor,
}

/// Softmax followed by cross-entropy; the gradient is `(p - onehot) / B`.
pub fn softmax_cce(logits: &Tensor, labels: &[usize]) -> Result<LossOutput, NeuralError> {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    check_labels(b, k, labels)?;
    let probs = softmax(logits);
    // ln p computed from the logits directly, so p underflowing to 0 still
    // gives a finite loss.
    let mut loss = 0.0;
    for (i, row) in logits.data().chunks(k).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i]];
    }
    let mut grad = probs.clone();
    for (i, &l) in labels.iter().enumerate() {
        grad.data_mut()[i * k + l] -= 1.0;
    }
    grad.data_mut().iter_mut().for_each(|g| *g /= b as f64);
    Ok(LossOutput { loss: loss / b as f64, probs, grad })
}
