//! The training loop: class-weighted loss, mini-batches, early stopping
//! with restore-best semantics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::checkpoint::{checkpoint_from_model, Checkpoint};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::manifest::DatasetManifest;
use crate::ops::{self, Mode};
use crate::optim::{optimizer_step, OptimizerKind, OptimizerState};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

/// One labeled input ready for the model: (C, S, S) tensor + class index.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassWeighting {
    None,
    InverseFrequency,
}

impl ClassWeighting {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassWeighting::None => "none",
            ClassWeighting::InverseFrequency => "inverse_frequency",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ClassWeighting::None),
            "inverse_frequency" => Ok(ClassWeighting::InverseFrequency),
            other => Err(Error::Config(format!("unknown class weighting '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub dropout_rate: f64,
    pub seed: u64,
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
    pub class_weighting: ClassWeighting,
}

impl Default for TrainConfig {
    /// Reference hyperparameters: lr 1e-4, batch 16, 50 epochs, Adam,
    /// dropout 0.5.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 50,
            optimizer: OptimizerKind::Adam,
            dropout_rate: 0.5,
            seed: 0,
            early_stop_patience: 5,
            class_weighting: ClassWeighting::InverseFrequency,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Index of the epoch with the lowest validation loss seen (strict
    /// improvement; ties keep the earlier epoch).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.records[self.best_epoch].val_loss
    }
}

/// Early-stopping rule: stop once `current_epoch - best_epoch >= patience`.
pub fn should_stop(current_epoch: usize, best_epoch: usize, patience: usize) -> bool {
    patience > 0 && current_epoch - best_epoch >= patience
}

pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Weights of the best-validation-loss epoch (restore-best).
    pub best: Checkpoint,
}

/// Inverse-frequency class weights from per-class counts:
/// w_c = N_total / (C * N_c). A balanced set gets all-ones.
pub fn class_weights_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    let c = counts.len();
    if c == 0 || total == 0 {
        return Err(Error::Data("cannot weight an empty dataset".into()));
    }
    counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if n == 0 {
                Err(Error::Data(format!("class {i} has zero samples")))
            } else {
                Ok(total as f64 / (c as f64 * n as f64))
            }
        })
        .collect()
}

/// Inverse-frequency weights over a manifest's class table.
pub fn compute_class_weights(manifest: &DatasetManifest) -> Result<Vec<f64>> {
    class_weights_from_counts(&manifest.class_counts())
}

fn label_counts(set: &[Sample], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for s in set {
        counts[s.label] += 1;
    }
    counts
}

fn stack_batch(set: &[Sample], idxs: &[usize]) -> (Tensor, Vec<usize>) {
    let shape = set[idxs[0]].input.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let per = c * h * w;
    let mut data = Vec::with_capacity(idxs.len() * per);
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        data.extend_from_slice(set[i].input.data());
        labels.push(set[i].label);
    }
    (Tensor::from_vec(&[idxs.len(), c, h, w], data), labels)
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Weighted loss and accuracy over a dataset in eval mode.
pub fn evaluate(
    model: &mut ModelGraph,
    set: &[Sample],
    class_weights: &[f64],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut rng = Rng::new(0); // unused in eval mode
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let n = set.len();
    let idxs: Vec<usize> = (0..n).collect();
    for chunk in idxs.chunks(batch_size) {
        let (batch, labels) = stack_batch(set, chunk);
        let (logits, _) = model.forward(&batch, Mode::Eval, &mut rng)?;
        let (loss, _) = ops::softmax_cross_entropy(&logits, &labels, class_weights)?;
        loss_sum += loss * chunk.len() as f64;
        let classes = logits.shape()[1];
        for (i, &label) in labels.iter().enumerate() {
            if argmax_row(&logits.data()[i * classes..(i + 1) * classes]) == label {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Train a model: seeded shuffles, mini-batches (last batch kept short),
/// class-weighted softmax cross-entropy, per-batch optimizer steps, full
/// validation per epoch, early stopping, restore-best.
pub fn train(
    model: &mut ModelGraph,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("train and validation sets must be nonempty".into()));
    }
    model.set_dropout_rate(cfg.dropout_rate);
    let num_classes = model.config.num_classes;
    let class_weights = match cfg.class_weighting {
        ClassWeighting::None => vec![1.0; num_classes],
        ClassWeighting::InverseFrequency => {
            class_weights_from_counts(&label_counts(train_set, num_classes))?
        }
    };

    let root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.substream(streams::SHUFFLE);
    let mut dropout_rng = root.substream(streams::DROPOUT);
    let mut opt = OptimizerState::new(cfg.optimizer);

    let mut history = TrainHistory {
        records: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best_loss = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut best_bn = model.bn.clone();

    let n = train_set.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, labels) = stack_batch(train_set, chunk);
            let (logits, cache) = model.forward(&batch, Mode::Train, &mut dropout_rng)?;
            let (loss, dlogits) = ops::softmax_cross_entropy(&logits, &labels, &class_weights)?;
            if !loss.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}; training aborted"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            for (i, &label) in labels.iter().enumerate() {
                if argmax_row(&logits.data()[i * num_classes..(i + 1) * num_classes]) == label {
                    correct += 1;
                }
            }
            let back = model.backward(&cache, &dlogits, None)?;
            optimizer_step(
                &mut model.params,
                &back.param_grads,
                &model.frozen,
                &mut opt,
                cfg.learning_rate,
            )?;
        }
        let train_loss = loss_sum / n as f64;
        let train_acc = correct as f64 / n as f64;

        let (val_loss, val_acc) = evaluate(model, val_set, &class_weights, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Data(format!(
                "non-finite validation loss at epoch {epoch}; training aborted"
            )));
        }
        history.records.push(EpochRecord {
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            history.best_epoch = epoch;
            best_params = model.params.clone();
            best_bn = model.bn.clone();
        }
        if should_stop(epoch, history.best_epoch, cfg.early_stop_patience) {
            break;
        }
    }
    history.stopped_early = history.records.len() < cfg.epochs;

    // restore-best
    model.params = best_params;
    model.bn = best_bn;
    model.trained_epoch = history.best_epoch + 1;
    let best = checkpoint_from_model(model, None);
    Ok(TrainOutcome { history, best })
}
