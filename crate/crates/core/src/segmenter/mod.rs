//! Differentiable segmenters trained with the combined loss.
//!
//! Two models share the [`Segmenter`] interface: a free per-pixel
//! [`LogitField`] that probes the loss geometry directly, and the small
//! [`ConvModel`].

mod adam;
mod checkpoint;
mod conv;

use serde::{Deserialize, Serialize};

pub use adam::AdamState;
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
pub use conv::{ConvArch, ConvModel};

use crate::error::{check_shape, Error, Result};
use crate::eval::{evaluate_slice, pooled_ra};
use crate::field::{BinaryMask2D, ProbabilityMap, ScalarField2D};
use crate::phantom::LabeledSlice;
use crate::rng::SplitMix64;
use crate::smooth_loss::{
    logit_loss_and_gradient, probabilities_from_logits, total_loss, LossBreakdown, LossConfig,
};

const TAG_SHUFFLE: u64 = 21;

pub trait Segmenter: Clone {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn logits(&self, image: &ScalarField2D) -> Result<ScalarField2D>;

    fn forward(&self, image: &ScalarField2D) -> Result<ProbabilityMap> {
        Ok(probabilities_from_logits(&self.logits(image)?))
    }

    /// Loss of `forward(image)` against `target` and its gradient with respect to every parameter.
    fn loss_and_gradient(
        &self,
        image: &ScalarField2D,
        target: &BinaryMask2D,
        cfg: &LossConfig,
    ) -> Result<(LossBreakdown, Vec<f64>)>;

    fn backward(
        &self,
        image: &ScalarField2D,
        target: &BinaryMask2D,
        cfg: &LossConfig,
    ) -> Result<Vec<f64>> {
        self.loss_and_gradient(image, target, cfg).map(|(_, g)| g)
    }
}

/// One free logit per pixel; ignores image content.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitField {
    logits: ScalarField2D,
}

impl LogitField {
    pub fn zeros(width: usize, depth: usize) -> Result<Self> {
        Ok(Self {
            logits: ScalarField2D::filled(width, depth, 0.0)?,
        })
    }

    pub fn from_logits(logits: ScalarField2D) -> Self {
        Self { logits }
    }

    pub fn field(&self) -> &ScalarField2D {
        &self.logits
    }
}

impl Segmenter for LogitField {
    fn params(&self) -> &[f64] {
        self.logits.values()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.logits.values_mut()
    }

    fn logits(&self, image: &ScalarField2D) -> Result<ScalarField2D> {
        check_shape(&self.logits.shape(), &image.shape())?;
        Ok(self.logits.clone())
    }

    fn loss_and_gradient(
        &self,
        image: &ScalarField2D,
        target: &BinaryMask2D,
        cfg: &LossConfig,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        check_shape(&self.logits.shape(), &image.shape())?;
        let (loss, g) = logit_loss_and_gradient(&self.logits, target, cfg)?;
        Ok((loss, g.into_values()))
    }
}

/// Minimizes the total loss over free per-pixel logits, starting from zero.
pub fn optimize_logit_field(
    target: &BinaryMask2D,
    cfg: &LossConfig,
    steps: usize,
    learning_rate: f64,
) -> Result<ProbabilityMap> {
    cfg.validate()?;
    let mut field = LogitField::zeros(target.width(), target.depth())?;
    let mut adam = AdamState::new(field.params().len(), learning_rate);
    for _ in 0..steps {
        let (_, g) = logit_loss_and_gradient(&field.logits, target, cfg)?;
        adam.update(field.params_mut(), g.values())?;
    }
    Ok(probabilities_from_logits(&field.logits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Early stop after this many epochs without a lower validation loss.
    pub patience: usize,
    pub batch_size: usize,
    /// Probability threshold for validation masks.
    pub threshold: f64,
    /// Epochs over which the smoothness weight ramps linearly from 0 to its
    /// full value; the first epoch is pure BCE when this is nonzero.
    pub smoothness_warmup: usize,
    /// Training aborts once every validation map spans less than this
    /// probability range while the smoothness term is active.
    pub min_output_range: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            learning_rate: 1e-3,
            epochs: 30,
            patience: 10,
            batch_size: 1,
            threshold: 0.5,
            smoothness_warmup: 0,
            min_output_range: 1e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "learning rate, epochs and batch size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Loss configuration in effect during `epoch` (1-based).
    pub fn loss_at(&self, epoch: usize) -> LossConfig {
        let ramp = if self.smoothness_warmup == 0 {
            1.0
        } else {
            ((epoch.saturating_sub(1)) as f64 / self.smoothness_warmup as f64).min(1.0)
        };
        LossConfig {
            smoothness_weight: self.loss.smoothness_weight * ramp,
            ..self.loss
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Weight used for this epoch's updates and its `train` breakdown.
    pub smoothness_weight: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub val_dice: f64,
    /// Pooled over validation slices; `None` if every prediction was empty.
    pub val_ra: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub smoothness_weight: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Averages per-sample breakdowns, keeping `total = bce_mean + s * smoothness`.
fn mean_breakdown(items: &[LossBreakdown], s: f64) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let bce_mean = items.iter().map(|l| l.bce_mean).sum::<f64>() / n;
    let smoothness = items.iter().map(|l| l.smoothness).sum::<f64>() / n;
    LossBreakdown {
        bce_mean,
        smoothness,
        total: bce_mean + s * smoothness,
    }
}

fn diverged(epoch: usize, s: f64, reason: impl Into<String>) -> Error {
    Error::Divergence {
        epoch,
        smoothness_weight: s,
        reason: reason.into(),
    }
}

pub struct Validation {
    pub loss: LossBreakdown,
    pub dice: f64,
    pub ra: Option<f64>,
    /// Largest `max - min` of any validation probability map.
    pub output_range: f64,
}

pub fn validate_model<S: Segmenter>(
    model: &S,
    slices: &[LabeledSlice],
    loss: &LossConfig,
    threshold: f64,
) -> Result<Validation> {
    let mut losses = Vec::with_capacity(slices.len());
    let mut evals = Vec::with_capacity(slices.len());
    let mut output_range = 0.0f64;
    for s in slices {
        let p = model.forward(&s.image)?;
        let (lo, hi) = p.min_max();
        output_range = output_range.max(hi - lo);
        losses.push(total_loss(&p, &s.epidermis_gt, loss)?);
        evals.push(evaluate_slice(&p.threshold(threshold), &s.epidermis_gt, s.id)?);
    }
    let dice = evals.iter().map(|e| e.scores.dice).sum::<f64>() / evals.len().max(1) as f64;
    Ok(Validation {
        loss: mean_breakdown(&losses, loss.smoothness_weight),
        dice,
        ra: pooled_ra(&evals),
        output_range,
    })
}

/// Trains with Adam in a seeded per-epoch order and returns the parameters of
/// the epoch with the lowest validation loss.
pub fn train<S: Segmenter>(
    mut model: S,
    train_set: &[LabeledSlice],
    val_set: &[LabeledSlice],
    cfg: &TrainConfig,
) -> Result<(S, TrainRecord)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("train and validation sets must be nonempty".into()));
    }
    let s = cfg.loss.smoothness_weight;
    let n_params = model.params().len();
    let mut adam = AdamState::new(n_params, cfg.learning_rate);
    let mut record = TrainRecord {
        smoothness_weight: s,
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, S)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grad_sum = vec![0.0; n_params];

    for epoch in 1..=cfg.epochs {
        let epoch_loss = cfg.loss_at(epoch);
        order.sort_unstable();
        SplitMix64::keyed(cfg.seed, &[TAG_SHUFFLE, epoch as u64]).shuffle(&mut order);
        let mut losses = Vec::with_capacity(train_set.len());
        for batch in order.chunks(cfg.batch_size) {
            grad_sum.fill(0.0);
            for &i in batch {
                let sample = &train_set[i];
                let (loss, g) = model.loss_and_gradient(&sample.image, &sample.epidermis_gt, &epoch_loss)?;
                if !loss.total.is_finite() {
                    return Err(diverged(epoch, s, format!("non-finite loss {}", loss.total)));
                }
                for (a, b) in grad_sum.iter_mut().zip(&g) {
                    *a += b;
                }
                losses.push(loss);
            }
            let inv = 1.0 / batch.len() as f64;
            grad_sum.iter_mut().for_each(|g| *g *= inv);
            if grad_sum.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, s, "non-finite gradient"));
            }
            adam.update(model.params_mut(), &grad_sum)?;
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(diverged(epoch, s, "non-finite parameters"));
            }
        }

        let val = validate_model(&model, val_set, &cfg.loss, cfg.threshold)?;
        if !val.loss.total.is_finite() {
            return Err(diverged(epoch, s, "non-finite validation loss"));
        }
        if epoch_loss.smoothness_weight > 0.0 && val.output_range < cfg.min_output_range {
            return Err(diverged(
                epoch,
                s,
                format!("output collapsed to a constant (range {:.3e})", val.output_range),
            ));
        }
        record.epochs.push(EpochRecord {
            epoch,
            smoothness_weight: epoch_loss.smoothness_weight,
            train: mean_breakdown(&losses, epoch_loss.smoothness_weight),
            val: val.loss,
            val_dice: val.dice,
            val_ra: val.ra,
        });

        if best.as_ref().is_none_or(|(b, _)| val.loss.total < *b) {
            best = Some((val.loss.total, model.clone()));
            record.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                record.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, record))
}
