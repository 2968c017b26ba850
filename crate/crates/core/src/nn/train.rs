//! Mini-batch Adam training with binary cross-entropy, per-epoch
//! validation, best-checkpoint retention and early stopping.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::math::{self, FakeQuant, Grads};
use super::{MlpModel, Mode};
use crate::window::WindowFeature;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    /// Stop once validation accuracy sits this many percentage points below
    /// its running best...
    pub accuracy_drop: f64,
    /// ...for this many consecutive epochs.
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self { accuracy_drop: 2.0, patience: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub checkpoint_every_epoch: bool,
    pub early_stop: Option<EarlyStopConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            checkpoint_every_epoch: true,
            early_stop: Some(EarlyStopConfig::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("empty dataset")]
    Empty,
    #[error("dataset width {found}, model expects {expected}")]
    Width { expected: usize, found: usize },
    #[error("invalid training config: {0}")]
    BadConfig(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

/// Windows flattened into training matrices: signed bytes cast to f32,
/// labels 0/1.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f32>,
    pub labels: Array1<f32>,
}

impl Dataset {
    pub fn from_windows(windows: &[WindowFeature]) -> Self {
        let width = windows.first().map(|w| w.values.len()).unwrap_or(0);
        let mut features = Array2::zeros((windows.len(), width));
        let mut labels = Array1::zeros(windows.len());
        for (i, w) in windows.iter().enumerate() {
            debug_assert_eq!(w.values.len(), width);
            for (j, &v) in w.values.iter().enumerate() {
                features[[i, j]] = v as f32;
            }
            labels[i] = if w.label.is_attack() { 1.0 } else { 0.0 };
        }
        Self { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

struct Adam {
    m: Grads<f32>,
    v: Grads<f32>,
    step: u64,
}

impl Adam {
    fn new(model: &MlpModel) -> Self {
        Self { m: Grads::zeros_like(model), v: Grads::zeros_like(model), step: 0 }
    }

    fn update(&mut self, model: &mut MlpModel, grads: &Grads<f32>, cfg: &TrainConfig) {
        self.step += 1;
        let lr = cfg.learning_rate as f32;
        let b1 = cfg.beta1 as f32;
        let b2 = cfg.beta2 as f32;
        let eps = cfg.adam_epsilon as f32;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);

        let apply = |p: &mut f32, g: f32, m: &mut f32, v: &mut f32| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };

        for k in 0..model.layers.len() {
            ndarray::Zip::from(&mut model.layers[k].weight)
                .and(&grads.w[k])
                .and(&mut self.m.w[k])
                .and(&mut self.v.w[k])
                .for_each(|p, &g, m, v| apply(p, g, m, v));
            ndarray::Zip::from(&mut model.layers[k].bias)
                .and(&grads.b[k])
                .and(&mut self.m.b[k])
                .and(&mut self.v.b[k])
                .for_each(|p, &g, m, v| apply(p, g, m, v));
            if let (Some(bn), Some(gg), Some(gb)) =
                (model.norms[k].as_mut(), grads.gamma[k].as_ref(), grads.beta[k].as_ref())
            {
                ndarray::Zip::from(&mut bn.gamma)
                    .and(gg)
                    .and(self.m.gamma[k].as_mut().unwrap())
                    .and(self.v.gamma[k].as_mut().unwrap())
                    .for_each(|p, &g, m, v| apply(p, g, m, v));
                ndarray::Zip::from(&mut bn.beta)
                    .and(gb)
                    .and(self.m.beta[k].as_mut().unwrap())
                    .and(self.v.beta[k].as_mut().unwrap())
                    .for_each(|p, &g, m, v| apply(p, g, m, v));
            }
        }
    }
}

/// Inference-mode loss and threshold-0.5 accuracy over a dataset.
pub fn evaluate_dataset(model: &MlpModel, data: &Dataset) -> (f64, f64) {
    let cache = math::forward_batch(model, &data.features, Mode::Infer, None, None);
    let loss = math::bce_loss(&cache.probs, &data.labels) as f64;
    let correct = cache
        .probs
        .column(0)
        .iter()
        .zip(data.labels.iter())
        .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
        .count();
    (loss, correct as f64 / data.len() as f64)
}

/// Trains with Adam on mini-batch BCE. Returns the best checkpoint by
/// validation accuracy together with the per-epoch history. Bit-for-bit
/// reproducible for fixed `(seed, cfg, data)` on one platform.
pub fn train(
    model: MlpModel,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainHistory), TrainError> {
    train_with_observer(model, train_data, val_data, cfg, |_, _, _| {})
}

/// [`train`] with a per-epoch callback receiving the current model, used
/// for epoch checkpointing.
pub fn train_with_observer(
    model: MlpModel,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    observer: impl FnMut(usize, &MlpModel, &EpochStats),
) -> Result<(MlpModel, TrainHistory), TrainError> {
    train_impl(model, train_data, val_data, cfg, None, observer)
}

pub(crate) fn train_impl(
    mut model: MlpModel,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    fake_quant: Option<&FakeQuant>,
    mut observer: impl FnMut(usize, &MlpModel, &EpochStats),
) -> Result<(MlpModel, TrainHistory), TrainError> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(TrainError::Empty);
    }
    let width = model.spec.input_width();
    for data in [train_data, val_data] {
        if data.features.ncols() != width {
            return Err(TrainError::Width { expected: width, found: data.features.ncols() });
        }
    }

    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E3779B97F4A7C15));
    let mut adam = Adam::new(&model);
    let momentum = model.spec.bn_momentum;

    let mut best: Option<(MlpModel, usize, f64)> = None;
    let mut bad_epochs = 0usize;

    let n = train_data.len();
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;

        for (batch_no, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let batch_x = train_data.features.select(Axis(0), chunk);
            let batch_y = Array1::from_iter(chunk.iter().map(|&i| train_data.labels[i]));

            let masks = if model.spec.dropout_rate > 0.0 {
                Some(math::dropout_masks(
                    &model,
                    chunk.len(),
                    model.spec.dropout_rate,
                    &mut dropout_rng,
                ))
            } else {
                None
            };
            let cache =
                math::forward_batch(&model, &batch_x, Mode::Train, masks.as_deref(), fake_quant);
            let loss = math::bce_loss(&cache.probs, &batch_y) as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_no });
            }
            loss_sum += loss * chunk.len() as f64;

            // Running-statistics update from the batch statistics.
            for (k, lc) in cache.layers.iter().enumerate() {
                if let (Some(bn_cache), Some(bn)) = (&lc.bn, model.norms[k].as_mut()) {
                    ndarray::Zip::from(&mut bn.running_mean)
                        .and(&bn_cache.batch_mean)
                        .for_each(|r, &b| *r = momentum * *r + (1.0 - momentum) * b);
                    ndarray::Zip::from(&mut bn.running_var)
                        .and(&bn_cache.batch_var)
                        .for_each(|r, &b| *r = momentum * *r + (1.0 - momentum) * b);
                }
            }

            let grads = math::backward_batch(&model, &cache, &batch_y);
            adam.update(&mut model, &grads, cfg);
        }

        let (val_loss, val_accuracy) = validate(&model, val_data, fake_quant);
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss,
            val_accuracy,
        };
        observer(epoch, &model, &stats);
        history.epochs.push(stats);

        let best_acc = best.as_ref().map(|(_, _, acc)| *acc);
        if best_acc.map(|b| val_accuracy > b).unwrap_or(true) {
            best = Some((model.clone(), epoch, val_accuracy));
        }
        if let Some(es) = &cfg.early_stop {
            let reference = best.as_ref().map(|(_, _, acc)| *acc).unwrap_or(val_accuracy);
            if (reference - val_accuracy) * 100.0 > es.accuracy_drop {
                bad_epochs += 1;
            } else {
                bad_epochs = 0;
            }
            if bad_epochs >= es.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    let (best_model, best_epoch, _) = best.expect("at least one epoch ran");
    history.best_epoch = Some(best_epoch);
    Ok((best_model, history))
}

/// Validation under the same forward semantics that will be deployed:
/// fake-quantized when fine-tuning, plain float otherwise.
fn validate(model: &MlpModel, data: &Dataset, fq: Option<&FakeQuant>) -> (f64, f64) {
    let cache = math::forward_batch(model, &data.features, Mode::Infer, None, fq);
    let loss = math::bce_loss(&cache.probs, &data.labels) as f64;
    let correct = cache
        .probs
        .column(0)
        .iter()
        .zip(data.labels.iter())
        .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
        .count();
    (loss, correct as f64 / data.len() as f64)
}
