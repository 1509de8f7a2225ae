//! Desk-scale training: minibatch SGD with momentum on the cross-entropy
//! loss, deterministic for a fixed seed.

use ndarray::{Array2, ArrayD};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::log_softmax_rows;
use super::{Architecture, ModelSpec};
use crate::dataset::LabeledDataset;
use crate::error::{HaamError, Result};

/// Hyperparameters for [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 7,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HaamError::InvalidParameter(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HaamError::InvalidParameter(format!(
                "learning rate must be a positive real, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HaamError::InvalidParameter(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Per-epoch mean training losses (nats).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Train a freshly initialized model on the dataset. Deterministic: the same
/// architecture, dataset, and config reproduce bit-identical parameters.
pub fn train(
    architecture: Architecture,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(ModelSpec, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(HaamError::InvalidParameter(
            "cannot train on an empty dataset".into(),
        ));
    }
    let mut model = ModelSpec::init(
        architecture,
        dataset.image_shape(),
        dataset.num_classes(),
        config.seed,
    )?;
    let mut velocities: Vec<ArrayD<f64>> = model
        .param_arrays()
        .iter()
        .map(|a| ArrayD::zeros(a.shape()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = dataset.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        // Fisher-Yates reshuffle each epoch.
        for i in (1..n).rev() {
            indices.swap(i, rng.random_range(0..=i));
        }
        let mut loss_sum = 0.0;
        for (batch_no, chunk) in indices.chunks(config.batch_size).enumerate() {
            let x = dataset.batch_pixels(chunk).mapv(|v| v / 255.0);
            let (logits, trace) = model.forward_batch(&x);
            let log_probs = log_softmax_rows(&logits);

            let b = chunk.len();
            let mut batch_loss = 0.0;
            let mut d_logits = Array2::zeros(logits.dim());
            for (row, &idx) in chunk.iter().enumerate() {
                let label = dataset.label(idx);
                batch_loss -= log_probs[[row, label]];
                for k in 0..dataset.num_classes() {
                    d_logits[[row, k]] = log_probs[[row, k]].exp() / b as f64;
                }
                d_logits[[row, label]] -= 1.0 / b as f64;
            }
            batch_loss /= b as f64;
            if !batch_loss.is_finite() {
                return Err(HaamError::TrainingDiverged {
                    epoch,
                    batch: batch_no,
                });
            }
            loss_sum += batch_loss * b as f64;

            let back = model.backward_batch(&trace, &d_logits);
            for ((mut param, velocity), grad) in model
                .param_arrays_mut()
                .into_iter()
                .zip(velocities.iter_mut())
                .zip(back.param_grads.iter())
            {
                velocity.zip_mut_with(grad, |v, g| {
                    *v = config.momentum * *v - config.learning_rate * g;
                });
                param.zip_mut_with(velocity, |p, v| *p += v);
            }
        }
        epoch_losses.push(loss_sum / n as f64);
    }
    Ok((model, TrainReport { epoch_losses }))
}

/// Fraction of the dataset the model labels correctly.
pub fn accuracy(model: &ModelSpec, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(HaamError::InvalidParameter(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(512) {
        let x = dataset.batch_pixels(chunk);
        let preds = model.predict_batch(&x)?;
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(p, idx)| **p == dataset.label(**idx))
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Fraction of the dataset on which two models predict different classes.
pub fn disagreement_rate(
    a: &ModelSpec,
    b: &ModelSpec,
    dataset: &LabeledDataset,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(HaamError::InvalidParameter(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let mut differ = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(512) {
        let x = dataset.batch_pixels(chunk);
        let pa = a.predict_batch(&x)?;
        let pb = b.predict_batch(&x)?;
        differ += pa.iter().zip(&pb).filter(|(x, y)| x != y).count();
    }
    Ok(differ as f64 / dataset.len() as f64)
}
