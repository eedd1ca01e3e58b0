//! Mini-batch training with early stopping on validation loss.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adam::{AdamState, OptimError};
use crate::real::Real;
use crate::transformer::{loss_bce, Model, ModelConfig, ModelError, Pooling, Sequence};
use crate::variant::Variant;

/// Items per forward pass at evaluation time.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::variant")]
    pub variant: Variant,
    /// Overrides the variant's pooling when set.
    #[serde(default)]
    pub pooling: Option<Pooling>,
}

mod defaults {
    use crate::variant::Variant;
    pub fn lr() -> f64 {
        1e-4
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn max_epochs() -> usize {
        50
    }
    pub fn patience() -> usize {
        8
    }
    pub fn variant() -> Variant {
        Variant::Ours
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: defaults::lr(),
            batch_size: defaults::batch_size(),
            max_epochs: defaults::max_epochs(),
            patience: defaults::patience(),
            seed: 0,
            variant: Variant::Ours,
            pooling: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A labeled set of model inputs; label 1.0 is spurious.
#[derive(Copy, Clone, Debug)]
pub struct Split<'a> {
    pub seqs: &'a [Sequence],
    pub labels: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

pub fn write_log_csv<W: Write>(mut w: W, log: &[EpochLog]) -> io::Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,val_accuracy")?;
    for row in log {
        writeln!(w, "{},{:.6},{:.6},{:.4}", row.epoch, row.train_loss, row.val_loss, row.val_accuracy)?;
    }
    Ok(())
}

/// Spurious iff the probability is strictly above one half.
pub fn is_spurious(p: f64) -> bool {
    p > 0.5
}

/// Probabilities for every sequence, evaluated in fixed-size chunks.
pub fn predict<T: Real>(model: &Model<T>, seqs: &[Sequence]) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        let refs: Vec<&Sequence> = chunk.iter().collect();
        out.extend(model.forward(&refs)?);
    }
    Ok(out)
}

/// Mean loss and accuracy on a split.
pub fn evaluate<T: Real>(model: &Model<T>, split: Split<'_>) -> Result<(f64, f64), ModelError> {
    let probs = predict(model, split.seqs)?;
    let n = probs.len().max(1) as f64;
    let loss = probs.iter().zip(split.labels).map(|(&p, &y)| loss_bce(p, y)).sum::<f64>() / n;
    let correct = probs
        .iter()
        .zip(split.labels)
        .filter(|(&p, &y)| is_spurious(p) == (y > 0.5))
        .count();
    Ok((loss, correct as f64 / n))
}

/// Trains a fresh `f32` model and returns the weights of the epoch with the
/// lowest validation loss.
pub fn train(arch: ModelConfig, cfg: &TrainConfig, train: Split<'_>, val: Split<'_>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.seqs.is_empty() || train.seqs.len() != train.labels.len() || val.seqs.len() != val.labels.len() {
        return Err(TrainError::Config("splits must be nonempty and labeled".into()));
    }
    let mut arch = arch;
    if let Some(p) = cfg.pooling {
        arch.pooling = p;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model: Model<f32> = Model::new(arch, &mut rng)?;
    let mut adam = AdamState::new(model.params.len());
    let mut order: Vec<usize> = (0..train.seqs.len()).collect();
    let mut best = (f64::INFINITY, model.params.clone(), 0);
    let mut since_best = 0;
    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let seqs: Vec<&Sequence> = batch.iter().map(|&i| &train.seqs[i]).collect();
            let labels: Vec<f64> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grad) = model.loss_and_grad(&seqs, &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    reason: "loss is not finite".into(),
                });
            }
            total += loss * batch.len() as f64;
            adam.step(&mut model.params, &grad, cfg.lr).map_err(|e| TrainError::Diverged {
                epoch,
                reason: e.to_string(),
            })?;
        }
        let (val_loss, val_accuracy) = if val.seqs.is_empty() {
            (total / train.seqs.len() as f64, f64::NAN)
        } else {
            evaluate(&model, val)?
        };
        log.push(EpochLog {
            epoch,
            train_loss: total / train.seqs.len() as f64,
            val_loss,
            val_accuracy,
        });
        if val_loss < best.0 {
            best = (val_loss, model.params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.params = best.1;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.2,
    })
}
