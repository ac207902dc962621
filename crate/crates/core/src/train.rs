//! Desk-scale training: minibatch SGD with softmax cross-entropy.
//!
//! Plain SGD keeps the hyperparameter surface minimal for retraining-based
//! tests. Training is a pure function of (initial weights, config seed, data
//! order): repeated runs produce bit-identical weights.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward_with_params, forward};
use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::model::{softmax, Layer, Model};
use crate::rng::rng_split;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(CoreError::Precondition("epochs must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(CoreError::Precondition(
                "learning rate must be positive".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(CoreError::Precondition(
                "batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Train a copy of `arch` on `data`; returns the trained model and its final
/// training accuracy.
pub fn train(arch: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, f64)> {
    cfg.validate()?;
    if data.len() == 0 {
        return Err(CoreError::Precondition("dataset is empty".into()));
    }
    let classes = arch.class_count();
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(CoreError::Precondition(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let mut model = arch.clone();
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_split(cfg.seed, epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            sgd_step(&mut model, data, batch, cfg.learning_rate)?;
        }
    }
    let accuracy = accuracy(&model, data)?;
    Ok((model, accuracy))
}

fn sgd_step(model: &mut Model, data: &Dataset, batch: &[usize], lr: f64) -> Result<()> {
    let batch_len = batch.len() as f64;
    let mut accum: Vec<(Option<Tensor>, Option<Tensor>)> =
        model.layers().iter().map(|_| (None, None)).collect();

    for &idx in batch {
        let (logits, tape) = forward(model, &data.inputs[idx])?;
        let probs = softmax(&logits);
        let p_label = probs.get(data.labels[idx])?;
        let loss = -p_label.max(f64::MIN_POSITIVE).ln();
        if !loss.is_finite() {
            return Err(CoreError::TrainingDiverged(format!(
                "non-finite loss on example {idx}"
            )));
        }
        // d(cross-entropy)/d(logits) = softmax - onehot.
        let mut seed = probs.clone();
        seed.data_mut()[data.labels[idx]] -= 1.0;
        let seed = seed.scale(1.0 / batch_len);
        let (_, grads) = backward_with_params(&tape, &seed)?;
        for (slot, grad) in accum.iter_mut().zip(grads) {
            if let Some(dw) = grad.weights {
                slot.0 = Some(match slot.0.take() {
                    Some(acc) => acc.add(&dw)?,
                    None => dw,
                });
            }
            if let Some(db) = grad.bias {
                slot.1 = Some(match slot.1.take() {
                    Some(acc) => acc.add(&db)?,
                    None => db,
                });
            }
        }
    }

    for (layer, (dw, db)) in model.layers_mut().iter_mut().zip(accum) {
        if let Layer::Dense { weights, bias } | Layer::Conv2d { weights, bias } = layer {
            if let Some(dw) = dw {
                *weights = weights.sub(&dw.scale(lr))?;
            }
            if let Some(db) = db {
                *bias = bias.sub(&db.scale(lr))?;
            }
            if !weights.all_finite() || !bias.all_finite() {
                return Err(CoreError::TrainingDiverged("non-finite weights".into()));
            }
        }
    }
    Ok(())
}

/// Fraction of examples whose argmax logit matches the label.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.len() == 0 {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (input, &label) in data.inputs.iter().zip(&data.labels) {
        let (logits, _) = forward(model, input)?;
        if logits.argmax() == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
