//! Client-side local training and model evaluation.

use crate::datasets::{sample_batch_indices, ClientShard, LabeledExample};
use crate::error::{FedError, Result};
use crate::model::HeterogeneousModel;
use crate::numerics::{self, LossSpec};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainConfig {
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 || self.batch_size == 0 {
            return Err(FedError::Config(
                "local steps and batch size must be ≥ 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(FedError::Config(format!(
                "learning rate must be ≥ 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// `local_steps` mini-batch SGD steps on cross-entropy with a constant rate.
/// Returns a new model; `model` is left untouched.
pub fn local_train(
    model: &HeterogeneousModel,
    shard: &ClientShard,
    cfg: &LocalTrainConfig,
    rng: &mut StreamRng,
) -> Result<HeterogeneousModel> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(FedError::State(format!(
            "client {} has an empty shard",
            shard.client_id
        )));
    }
    let mut trained = model.clone();
    for _ in 0..cfg.local_steps {
        let batch = sample_batch_indices(shard.len(), cfg.batch_size, rng)?;
        let grads = numerics::batch_backward(
            trained.layers(),
            batch.iter().map(|&i| {
                let e = &shard.examples[i];
                (e.features.data(), LossSpec::CrossEntropy { label: e.label })
            }),
        )?;
        numerics::sgd_step(trained.layers_mut(), &grads, cfg.lr)?;
    }
    Ok(trained)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &HeterogeneousModel, data: &[LabeledExample]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(FedError::Argument(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for e in data {
        let p = model.forward(&e.features)?;
        if argmax(p.data()) == e.label {
            correct += 1;
        }
        loss += numerics::cross_entropy(&p, e.label)?;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}
