//! Minibatch SGD training, evaluation and two-stage fine-tuning.

use std::fmt::Write as _;

use crate::augment::{augment_indexed, AugmentConfig};
use crate::dataset::{to_batch, LabeledImage, SplitDataset};
use crate::error::{FerError, Result};
use crate::label::{EmotionLabel, NUM_CLASSES};
use crate::metrics::{confusion_matrix, ConfusionMatrix};
use crate::model::{argmax, FerModel};
use crate::nn;
use crate::optim::Sgd;
use crate::rng::{mix_seed, RngState};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stage-1 learning rate; stage 2 uses a tenth of it.
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// On-the-fly augmentation; `None` trains on the raw images.
    pub augment: Option<AugmentConfig>,
    /// Emit a progress event every this many batches (0 disables).
    pub report_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 42,
            augment: Some(AugmentConfig::default()),
            report_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FerError::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(FerError::config("batch size must be >= 1"));
        }
        Sgd::new(self.learning_rate, self.momentum)?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// Learning rate used by [`fine_tune_stage2`].
    pub fn stage2_learning_rate(&self) -> f64 {
        self.learning_rate / 10.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Running accuracy over the epoch's (augmented, train-mode) batches.
    pub train_accuracy: f64,
    /// Eval-mode accuracy on the validation set after the epoch.
    pub val_accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_acc,val_acc,loss\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                r.epoch, r.train_accuracy, r.val_accuracy, r.mean_loss
            );
        }
        s
    }
}

/// Progress notifications emitted during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Progress {
    Batch {
        epoch: usize,
        batch: usize,
        batches: usize,
        loss: f64,
    },
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
}

/// Eval-mode predictions for a list of images. Never mutates the model.
pub fn predict_labels(model: &FerModel<f32>, data: &[LabeledImage]) -> Result<Vec<EmotionLabel>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let batch = to_batch(chunk.iter().map(|d| &d.image))?;
        let probs = model.forward_eval(&batch)?;
        for row in probs.data().chunks(NUM_CLASSES) {
            out.push(
                EmotionLabel::from_index(argmax(row))
                    .ok_or_else(|| FerError::Internal("argmax outside class range".into()))?,
            );
        }
    }
    Ok(out)
}

pub fn evaluate(model: &FerModel<f32>, data: &[LabeledImage]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(FerError::input("cannot evaluate on an empty dataset"));
    }
    let predictions = predict_labels(model, data)?;
    let labels: Vec<EmotionLabel> = data.iter().map(|d| d.label).collect();
    let confusion = confusion_matrix(&predictions, &labels)?;
    Ok(Evaluation {
        accuracy: confusion.accuracy()?,
        precision: (0..NUM_CLASSES).map(|i| confusion.precision(i)).collect(),
        recall: (0..NUM_CLASSES).map(|i| confusion.recall(i)).collect(),
        confusion,
    })
}

/// Stage-1 training: every unfrozen parameter is updated.
pub fn train(model: &mut FerModel<f32>, splits: &SplitDataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with_progress(model, splits, cfg, |_| {})
}

pub fn train_with_progress(
    model: &mut FerModel<f32>,
    splits: &SplitDataset,
    cfg: &TrainConfig,
    mut on_progress: impl FnMut(Progress),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.validate.is_empty() {
        return Err(FerError::input("training needs non-empty train and validate sets"));
    }
    let opt = Sgd::new(cfg.learning_rate, cfg.momentum)?;
    let n = splits.train.len();
    let batches = n.div_ceil(cfg.batch_size);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        RngState::derived(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut dropout_rng = RngState::derived(mix_seed(cfg.seed, 0xD80F), epoch as u64);
        let epoch_augment = cfg.augment.as_ref().map(|a| AugmentConfig {
            seed: mix_seed(a.seed ^ cfg.seed, epoch as u64),
            ..a.clone()
        });

        let (mut correct, mut loss_sum) = (0usize, 0.0f64);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<_> = idx
                .iter()
                .map(|&i| match &epoch_augment {
                    Some(a) => augment_indexed(&splits.train[i].image, a, i as u64),
                    None => splits.train[i].image.clone(),
                })
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| splits.train[i].label.index()).collect();
            let batch = to_batch(&images)?;

            let (logits, cache) = model.forward_train(&batch, &mut dropout_rng)?;
            let (loss, dlogits) = nn::softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(FerError::Training(format!(
                    "non-finite loss at epoch {} batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            let grads = model.backward(&cache, &dlogits)?;
            model.apply_gradients(&grads, &opt).map_err(|e| {
                FerError::Training(format!("epoch {} batch {}: {e}", epoch + 1, b + 1))
            })?;

            correct += logits
                .data()
                .chunks(NUM_CLASSES)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            loss_sum += loss as f64 * labels.len() as f64;
            if cfg.report_every > 0 && (b + 1) % cfg.report_every == 0 {
                on_progress(Progress::Batch {
                    epoch: epoch + 1,
                    batch: b + 1,
                    batches,
                    loss: loss as f64,
                });
            }
        }

        let record = EpochRecord {
            epoch: epoch + 1,
            train_accuracy: correct as f64 / n as f64,
            val_accuracy: evaluate(model, &splits.validate)?.accuracy,
            mean_loss: loss_sum / n as f64,
        };
        on_progress(Progress::Epoch(record));
        history.epochs.push(record);
    }
    Ok(history)
}

/// Stage 2: freezes the conv blocks (batch norm included, running statistics
/// fixed) and, if `freeze_first_dense`, the first dense layer; retrains the
/// rest at a tenth of the stage-1 learning rate. Frozen flags are cleared
/// afterwards.
pub fn fine_tune_stage2(
    model: &mut FerModel<f32>,
    splits: &SplitDataset,
    cfg: &TrainConfig,
    freeze_first_dense: bool,
) -> Result<TrainHistory> {
    fine_tune_stage2_with_progress(model, splits, cfg, freeze_first_dense, |_| {})
}

pub fn fine_tune_stage2_with_progress(
    model: &mut FerModel<f32>,
    splits: &SplitDataset,
    cfg: &TrainConfig,
    freeze_first_dense: bool,
    on_progress: impl FnMut(Progress),
) -> Result<TrainHistory> {
    if !model.running_stats_populated() {
        return Err(FerError::config(
            "stage 2 needs a stage-1 trained model (batch-norm statistics are empty)",
        ));
    }
    let stage2 = TrainConfig {
        learning_rate: cfg.stage2_learning_rate(),
        seed: mix_seed(cfg.seed, 2),
        ..cfg.clone()
    };
    model.freeze_blocks(true);
    model.dense[0].set_frozen(freeze_first_dense);
    model.reset_momentum();
    let result = train_with_progress(model, splits, &stage2, on_progress);
    model.freeze_blocks(false);
    for d in &mut model.dense {
        d.set_frozen(false);
    }
    model.reset_momentum();
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FerConfig;
    use crate::synth::synthetic_fer;

    fn tiny_splits(n: usize) -> SplitDataset {
        crate::dataset::split(synthetic_fer(n, 3), (8, 1, 1), 1).unwrap()
    }

    #[test]
    fn zero_epochs_rejected() {
        let mut m = FerModel::new(FerConfig::reduced()).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut m, &tiny_splits(20), &cfg),
            Err(FerError::Config(_))
        ));
    }

    #[test]
    fn stage2_requires_trained_model() {
        let mut m = FerModel::new(FerConfig::reduced()).unwrap();
        let r = fine_tune_stage2(&mut m, &tiny_splits(20), &TrainConfig::default(), true);
        assert!(matches!(r, Err(FerError::Config(_))));
    }

    #[test]
    fn stage2_lr_is_tenth() {
        assert_eq!(TrainConfig::default().stage2_learning_rate(), 0.001);
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_accuracy: 0.5,
                val_accuracy: 0.25,
                mean_loss: 1.0,
            }],
        };
        assert_eq!(h.to_csv(), "epoch,train_acc,val_acc,loss\n1,0.500000,0.250000,1.000000\n");
    }

    #[test]
    fn evaluate_empty_is_error() {
        let m = FerModel::new(FerConfig::reduced()).unwrap();
        assert!(matches!(evaluate(&m, &[]), Err(FerError::Input(_))));
    }
}
