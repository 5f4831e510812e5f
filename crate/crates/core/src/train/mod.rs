//! Training: loss, optimizer and the epoch loop with early stopping.
//!
//! Each epoch shuffles the training set with a stream derived from
//! `(seed, epoch)`, augments every sample from a second derived stream,
//! forms batches in that order (the last one may be smaller), and takes one
//! Adam step per batch on the deep-supervision loss. After the epoch the
//! validation mDSC is measured in eval mode. Training stops after
//! `patience` epochs without a strict improvement, at `max_epochs`, or once
//! `max_steps` optimizer steps have been taken.

pub mod adam;
pub mod loss;

pub use adam::Adam;
pub use loss::{bce_dice_loss, total_loss, DICE_SMOOTH, HEADS};

use rand::seq::SliceRandom;

use crate::data::{augment, stack_batch, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::FocusNet;
use crate::module::{ForwardCtx, Module};
use crate::rng::{derive_seed, stream};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Loss weights of `[P1, P2, P3, P4, P̂]`.
    pub weights: [f64; HEADS],
    pub max_steps: Option<usize>,
    pub augment: bool,
    pub arbitrary_rotation: bool,
    /// Measure the stopping criterion on the training set instead of the
    /// validation set.
    pub validate_on_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 16,
            max_epochs: 500,
            patience: 50,
            seed: 0,
            weights: [1.0; HEADS],
            max_steps: None,
            augment: true,
            arbitrary_rotation: false,
            validate_on_train: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("train.lr {} must be positive", self.lr));
        }
        if self.batch == 0 {
            return err("train.batch must be positive".into());
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return err(format!(
                "train.patience {} must lie in 1..=train.max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.weights.iter().all(|&w| w == 0.0) {
            return err(format!("train.weights {:?} must be non-negative and not all zero", self.weights));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mdsc: f64,
}

impl std::fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "epoch={} train_loss={:.8} val_mdsc={:.8}", self.epoch, self.train_loss, self.val_mdsc)
    }
}

/// Parameter and buffer values of a model at one point in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T: Real> {
    params: Vec<Vec<T>>,
    buffers: Vec<Vec<T>>,
}

impl<T: Real> Snapshot<T> {
    pub fn of<M: Module<T>>(m: &M) -> Self {
        Snapshot {
            params: m.parameters().iter().map(|p| p.data().to_vec()).collect(),
            buffers: m.buffers().iter().map(|b| b.get()).collect(),
        }
    }

    pub fn restore<M: Module<T>>(&self, m: &mut M) -> Result<()> {
        for (p, v) in m.parameters_mut().into_iter().zip(&self.params) {
            p.set_data(v.clone())?;
        }
        for (b, v) in m.buffers().into_iter().zip(&self.buffers) {
            b.set(v.clone())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mdsc: f64,
    pub best: Snapshot<T>,
    pub steps: usize,
}

/// Trains `model` in place; it ends holding the final weights, and the
/// best-validation weights are returned in the outcome. `on_epoch` sees each
/// log record as soon as it is produced.
pub fn train<T: Real>(
    model: &mut FocusNet<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let val_set = if cfg.validate_on_train { train_set } else { val_set };
    if val_set.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let aug_cfg = AugmentConfig {
        arbitrary_rotation: cfg.arbitrary_rotation,
    };
    let mut opt = Adam::<T>::new(cfg.lr);
    let mut log = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, Snapshot::of(model));
    let mut steps = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &format!("shuffle/{epoch}")));
        let mut aug_rng = stream(cfg.seed, &format!("augment/{epoch}"));
        let samples: Vec<Sample> = order
            .iter()
            .map(|&i| {
                if cfg.augment {
                    augment(&train_set[i], &mut aug_rng, aug_cfg)
                } else {
                    train_set[i].clone()
                }
            })
            .collect();

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in samples.chunks(cfg.batch).enumerate() {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let refs: Vec<&Sample> = chunk.iter().collect();
            let (images, masks) = stack_batch::<T>(&refs)?;
            let mut ctx = ForwardCtx::train(derive_seed(cfg.seed, &format!("dropout/{epoch}/{bi}")));
            let out = model.forward(&images, &mut ctx)?;
            let loss = total_loss(&out.heads, &masks, &cfg.weights)?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: value,
                });
            }
            model.zero_grad();
            loss.backward()?;
            opt.step(model.parameters_mut())?;
            loss_sum += value;
            batches += 1;
            steps += 1;
        }
        if batches == 0 {
            break;
        }

        let val_mdsc = evaluate(model, val_set, 0.5)?.mean.mdsc;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_mdsc,
        };
        on_epoch(&rec);
        log.push(rec);
        if val_mdsc > best.1 {
            best = (epoch, val_mdsc, Snapshot::of(model));
        } else if epoch - best.0 >= cfg.patience {
            break;
        }
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    Ok(TrainOutcome {
        log,
        best_epoch: best.0,
        best_val_mdsc: best.1,
        best: best.2,
        steps,
    })
}
