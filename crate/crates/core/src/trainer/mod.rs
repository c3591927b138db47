//! Two-stage training: the head on frozen-backbone features, then the
//! backbone tail and head together at a lower learning rate.

mod history;
mod pipeline;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use history::{EpochRecord, Stage, TrainHistory};
pub use pipeline::{head_features, run_two_stage, AccessLog, PreparedData, RunOutcome, TrainedModel};

use crate::backbone::FreezePlan;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::metrics::{confusion, metrics_from_confusion, MetricsReport};
use crate::nn::{cross_entropy, one_hot, HeadConfig, Mode, NetworkGraph};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::seed::derive;
use crate::tensor::Tensor32;

/// Seeds of every stochastic step. None default to entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTuple {
    pub split: u64,
    pub init: u64,
    pub augment: u64,
    pub dropout: u64,
    /// Batch order.
    pub shuffle: u64,
}

impl SeedTuple {
    /// All five seeds derived from one root.
    pub fn from_root(root: u64) -> Self {
        SeedTuple {
            split: derive(root, &[1]),
            init: derive(root, &[2]),
            augment: derive(root, &[3]),
            dropout: derive(root, &[4]),
            shuffle: derive(root, &[5]),
        }
    }
}

impl Default for SeedTuple {
    fn default() -> Self {
        SeedTuple::from_root(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub head: HeadConfig,
    pub head_epochs: usize,
    pub fine_tune_epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_fine_tune: f64,
    pub unfreeze: FreezePlan,
    /// β/ε settings shared by both stages; α comes from the stage rate.
    pub adam: AdamConfig,
    pub seeds: SeedTuple,
    /// Fraction of the training split held out for validation.
    pub validation_fraction: f64,
    /// Stop a stage once validation loss has not improved for this many epochs.
    pub early_stopping: Option<usize>,
    pub augment: AugmentConfig,
    /// Index of the positive class for reports.
    pub positive_class: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head: HeadConfig::default(),
            head_epochs: 30,
            fine_tune_epochs: 20,
            batch_size: 16,
            lr_head: 1e-3,
            lr_fine_tune: 1e-4,
            unfreeze: FreezePlan::new(2),
            adam: AdamConfig::default(),
            seeds: SeedTuple::default(),
            validation_fraction: 0.15,
            early_stopping: None,
            augment: AugmentConfig::default(),
            positive_class: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        for lr in [self.lr_head, self.lr_fine_tune] {
            self.adam.with_alpha(lr).validate()?;
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Validation("validation fraction must lie in [0, 1)".into()));
        }
        if self.head.units.iter().any(|&u| u == 0) {
            return Err(Error::Validation("head layers need at least one unit".into()));
        }
        if let Some(r) = self.head.dropout {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Validation(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        if self.early_stopping == Some(0) {
            return Err(Error::Validation("early-stopping patience must be at least 1".into()));
        }
        if self.positive_class > 1 {
            return Err(Error::Validation("positive class must be 0 or 1".into()));
        }
        self.augment.validate()?;
        if self.lr_fine_tune >= self.lr_head {
            log::warn!(
                "fine-tuning rate {} is not below the head rate {}",
                self.lr_fine_tune,
                self.lr_head
            );
        }
        Ok(())
    }
}

/// Labelled inputs held in memory.
#[derive(Clone, Debug)]
pub struct LabelledSet {
    pub inputs: Arc<Vec<Tensor32>>,
    pub labels: Vec<usize>,
}

impl LabelledSet {
    pub fn new(inputs: Vec<Tensor32>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Validation(format!("{} inputs for {} labels", inputs.len(), labels.len())));
        }
        Ok(LabelledSet {
            inputs: Arc::new(inputs),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Settings of one call to [`fit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitSpec {
    pub stage: Stage,
    pub epochs: usize,
    /// Global index of the first epoch (0-based); keys the seed streams.
    pub first_epoch: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub early_stopping: Option<usize>,
}

/// Mean loss and accuracy of `net` (eval mode) on a set.
pub fn evaluate_loss(net: &NetworkGraph<f32>, set: &LabelledSet, batch_size: usize) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty set".into()));
    }
    let classes = net.output_shape()[0];
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for (chunk, labels) in set.inputs.chunks(batch_size.max(1)).zip(set.labels.chunks(batch_size.max(1))) {
        let refs: Vec<&Tensor32> = chunk.iter().collect();
        let p = net.infer(&Tensor32::stack(&refs)?)?;
        let y = one_hot::<f32>(labels, classes)?;
        loss += cross_entropy(&p, &y)? as f64 * labels.len() as f64;
        correct += p.argmax_rows().iter().zip(labels).filter(|(a, b)| a == b).count();
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

/// Mini-batch Adam over `spec.epochs` epochs. `train(epoch)` supplies the
/// training inputs for a global epoch index (they may change between epochs
/// under augmentation); labels come from `labels`. `on_batch` sees the
/// sample indices of every optimizer batch.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    net: &mut NetworkGraph<f32>,
    state: &mut AdamState<f32>,
    spec: &FitSpec,
    adam: &AdamConfig,
    seeds: &SeedTuple,
    labels: &[usize],
    mut train: impl FnMut(usize) -> Result<Arc<Vec<Tensor32>>>,
    val: Option<&LabelledSet>,
    mut on_batch: impl FnMut(&[usize]),
) -> Result<TrainHistory> {
    let cfg = adam.with_alpha(spec.lr);
    cfg.validate()?;
    if spec.batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    let classes = net.output_shape()[0];
    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    for e in spec.first_epoch..spec.first_epoch + spec.epochs {
        let started = Instant::now();
        let inputs = train(e)?;
        if inputs.len() != labels.len() {
            return Err(Error::Validation(format!("{} training inputs for {} labels", inputs.len(), labels.len())));
        }
        if inputs.is_empty() {
            return Err(Error::Validation("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(seeds.shuffle, &[e as u64])));
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in order.chunks(spec.batch_size).enumerate() {
            on_batch(idx);
            let refs: Vec<&Tensor32> = idx.iter().map(|&i| &inputs[i]).collect();
            let x = Tensor32::stack(&refs)?;
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let y = one_hot::<f32>(&batch_labels, classes)?;
            let (trace, p) = net.forward(&x, Mode::Train, derive(seeds.dropout, &[e as u64, b as u64]))?;
            let loss = cross_entropy(&p, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    stage: spec.stage.name().into(),
                    epoch: e + 1,
                    batch: b,
                    lr: spec.lr,
                });
            }
            loss_sum += loss as f64 * idx.len() as f64;
            correct += p.argmax_rows().iter().zip(&batch_labels).filter(|(a, b)| a == b).count();
            let grads = net.backward_params(&trace, &y)?;
            adam_step(state, net.trainable_params_mut(), &grads.params, &cfg)?;
        }
        let n = labels.len() as f64;
        let (val_loss, val_acc) = match val {
            Some(v) if !v.is_empty() => {
                let (l, a) = evaluate_loss(net, v, spec.batch_size)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        history.records.push(EpochRecord {
            epoch: e + 1,
            stage: spec.stage,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let (Some(patience), Some(l)) = (spec.early_stopping, val_loss) {
            if l < best_val {
                best_val = l;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(history)
}

/// Trains `head` on fixed features with a fresh optimizer state.
pub fn train_head(cfg: &TrainConfig, head: &mut NetworkGraph<f32>, train: &LabelledSet, val: Option<&LabelledSet>) -> Result<TrainHistory> {
    cfg.validate()?;
    let spec = FitSpec {
        stage: Stage::Head,
        epochs: cfg.head_epochs,
        first_epoch: 0,
        lr: cfg.lr_head,
        batch_size: cfg.batch_size,
        early_stopping: cfg.early_stopping,
    };
    let inputs = train.inputs.clone();
    fit(
        head,
        &mut AdamState::new(),
        &spec,
        &cfg.adam,
        &cfg.seeds,
        &train.labels,
        |_| Ok(inputs.clone()),
        val,
        |_| {},
    )
}

/// Fine-tunes `model` (backbone tail followed by the head) on trunk outputs,
/// with a fresh optimizer state and the fine-tuning rate. Epochs are
/// numbered after the head stage.
pub fn fine_tune(
    cfg: &TrainConfig,
    model: &mut NetworkGraph<f32>,
    train: &LabelledSet,
    val: Option<&LabelledSet>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let spec = FitSpec {
        stage: Stage::FineTune,
        epochs: cfg.fine_tune_epochs,
        first_epoch: cfg.head_epochs,
        lr: cfg.lr_fine_tune,
        batch_size: cfg.batch_size,
        early_stopping: cfg.early_stopping,
    };
    let inputs = train.inputs.clone();
    fit(
        model,
        &mut AdamState::new(),
        &spec,
        &cfg.adam,
        &cfg.seeds,
        &train.labels,
        |_| Ok(inputs.clone()),
        val,
        |_| {},
    )
}

/// Class predictions (argmax) of `net` in eval mode.
pub fn predict(net: &NetworkGraph<f32>, inputs: &[Tensor32], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let refs: Vec<&Tensor32> = chunk.iter().collect();
        out.extend(net.infer(&Tensor32::stack(&refs)?)?.argmax_rows());
    }
    Ok(out)
}

/// Metrics of `net` on a held-out set. Never mutates the network.
pub fn evaluate(net: &NetworkGraph<f32>, test: &LabelledSet, positive: usize) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Validation("test split is empty".into()));
    }
    let pred = predict(net, &test.inputs, 64)?;
    Ok(metrics_from_confusion(&confusion(&pred, &test.labels, positive)?))
}
