//! Mini-batch training loop.

use serde::{Deserialize, Serialize};

use super::layers::ForwardCtx;
use super::loss::{cce_loss, softmax_cce};
use super::model::Model;
use super::optim::{Adam, AdamConfig};
use super::tensor::Tensor;
use super::NeuralError;

/// Inputs with one class label per leading-axis sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>) -> Result<Self, NeuralError> {
        if x.batch() != labels.len() {
            return Err(NeuralError::Shape(format!("{} samples but {} labels", x.batch(), labels.len())));
        }
        Ok(Dataset { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { x: self.x.gather(idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 10, epochs: 200, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per row of a probability (or logit) matrix.
pub fn predictions(probs: &Tensor) -> Vec<usize> {
    probs.data().chunks(probs.shape()[1]).map(argmax).collect()
}

/// Inference-mode loss, accuracy and probabilities.
pub fn evaluate(model: &mut Model, data: &Dataset) -> Result<(f64, f64, Tensor), NeuralError> {
    let probs = model.predict_proba(&data.x, 64)?;
    let loss = cce_loss(&probs.map(|p| p.max(f64::MIN_POSITIVE)), &data.labels)?;
    let hits = predictions(&probs).iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok((loss, hits as f64 / data.len() as f64, probs))
}

/// Trains with Adam on shuffled mini-batches. Shuffling and dropout draw
/// from per-epoch streams derived from `config.seed`, so a rerun reproduces
/// every curve exactly.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>, NeuralError> {
    use rand::seq::SliceRandom;
    if data.is_empty() {
        return Err(NeuralError::Config("empty training set".into()));
    }
    if config.batch_size == 0 {
        return Err(NeuralError::Config("batch size must be positive".into()));
    }
    let k = model.spec().n_classes;
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= k) {
        return Err(NeuralError::Label { label: bad, classes: k });
    }
    let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..Default::default() });
    let mut curves = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut crate::rng::stream(config.seed, &format!("shuffle/{epoch}")));
        let mut dropout_rng = crate::rng::stream(config.seed, &format!("dropout/{epoch}"));
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let x = data.x.gather(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            model.zero_grad();
            let logits = model.forward_logits(&x, &mut ForwardCtx { training: true, rng: &mut dropout_rng })?;
            let out = softmax_cce(&logits, &labels)?;
            if !out.loss.is_finite() {
                return Err(NeuralError::Diverged { epoch, batch: bi, loss: out.loss });
            }
            model.backward(&out.grad)?;
            adam.update(&mut model.params_mut());
            loss_sum += out.loss * batch.len() as f64;
            hits += predictions(&out.probs).iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let (val_loss, val_acc) = match validation {
            Some(v) => {
                let (l, a, _) = evaluate(model, v)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        curves.push(EpochRecord {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            train_acc: hits as f64 / data.len() as f64,
            val_loss,
            val_acc,
        });
    }
    Ok(curves)
}
