use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{binary_metrics, binary_metrics_lenient, Metrics};
use super::optimizer::AdamW;
use super::pretrain::{DROPOUT_STREAM, MIXUP_STREAM, SHUFFLE_STREAM};
use super::schedule::{layer_lr_scales, lr_at};
use crate::data::VolumeGrid;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::objective::{mixup, smooth_labels, MixupDraw};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub layer_decay: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    /// Beta parameter of the mixup weight; 0 disables mixup.
    pub mixup_alpha: f64,
    pub init_scale: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            base_lr: 1e-3,
            layer_decay: 0.75,
            weight_decay: 0.05,
            warmup_epochs: 5,
            label_smoothing: 0.1,
            dropout: 0.1,
            mixup_alpha: 0.8,
            init_scale: 0.001,
            epochs: 50,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch size and epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return fail(format!("layer decay must lie in (0, 1], got {}", self.layer_decay));
        }
        if !(self.init_scale >= 0.0) || !(self.mixup_alpha >= 0.0) || !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("init scale, mixup alpha and weight decay must be non-negative, LR positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// NaN without a validation split.
    pub val_acc: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<S> {
    /// Best validation ACC, then AUC, then later epoch.
    pub best: Classifier<S>,
    pub best_epoch: usize,
    pub last: Classifier<S>,
    pub optimizer: AdamW<S>,
    pub history: Vec<FinetuneRecord>,
}

/// Positive-class probabilities.
pub fn positive_scores<S: Scalar>(model: &Classifier<S>, volumes: &[VolumeGrid]) -> Result<Vec<f64>> {
    let p = model.predict_proba(volumes)?;
    Ok(p.column(1).iter().map(|v| v.to_f64_lossy()).collect())
}

/// ACC/SEN/SPE/AUC on a labelled split; fails on a single-class split.
pub fn evaluate<S: Scalar>(model: &Classifier<S>, volumes: &[VolumeGrid], labels: &[usize]) -> Result<Metrics> {
    if volumes.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    binary_metrics(&positive_scores(model, volumes)?, labels)
}

fn better(a: &FinetuneRecord, b: &FinetuneRecord) -> bool {
    let acc = |r: &FinetuneRecord| if r.val_acc.is_nan() { f64::NEG_INFINITY } else { r.val_acc };
    match acc(a).total_cmp(&acc(b)) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a.val_auc.unwrap_or(f64::NEG_INFINITY) >= b.val_auc.unwrap_or(f64::NEG_INFINITY),
    }
}

/// Supervised fine-tuning over all tokens with layer-wise learning rates,
/// label smoothing, mixup and dropout.
pub fn finetune<S: Scalar>(
    mut model: Classifier<S>,
    train: (&[VolumeGrid], &[usize]),
    val: (&[VolumeGrid], &[usize]),
    cfg: &FinetuneConfig,
    mut progress: Option<&mut dyn FnMut(&FinetuneRecord)>,
) -> Result<FinetuneOutcome<S>> {
    cfg.validate()?;
    let (train_x, train_y) = train;
    if train_x.is_empty() || train_x.len() != train_y.len() || val.0.len() != val.1.len() {
        return Err(Error::Contract("training split must be non-empty with one label per volume".into()));
    }
    let k = model.cfg.num_classes;
    if let Some(&bad) = train_y.iter().chain(val.1).find(|&&y| y >= k) {
        return Err(Error::Config(format!("label {bad} does not fit a {k}-class head")));
    }
    model.cfg.dropout = cfg.dropout;
    let tokens: Vec<Array2<S>> = train_x
        .iter()
        .map(|v| Ok(model.tokens(v)?.data))
        .collect::<Result<_>>()?;
    let targets = smooth_labels::<S>(train_y, k, cfg.label_smoothing)?;
    let scales = layer_lr_scales(cfg.layer_decay, model.cfg.encoder_depth);
    let mut optimizer = AdamW::new(&model.params);
    let mut history = Vec::new();
    let mut best: Option<(Classifier<S>, FinetuneRecord)> = None;
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.base_lr, cfg.warmup_epochs, cfg.epochs);
        order.shuffle(&mut seed::rng_at(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let inputs: Vec<Array2<S>> = chunk.iter().map(|&i| tokens[i].clone()).collect();
            let t = targets.select(Axis(0), chunk);
            let (inputs, t) = if cfg.mixup_alpha > 0.0 && chunk.len() >= 2 {
                let draw = MixupDraw::sample(chunk.len(), cfg.mixup_alpha, &mut seed::rng_at(cfg.seed, &[MIXUP_STREAM, step]))?;
                mixup(&inputs, t.view(), &draw)?
            } else {
                (inputs, t)
            };
            let dropout_seed = seed::derive(cfg.seed, &[DROPOUT_STREAM, step]);
            let (loss, grads) = model.batch_loss_and_grad(&inputs, t.view(), Some(dropout_seed))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("fine-tuning loss became non-finite at step {step}")));
            }
            optimizer.step(&mut model.params, &grads, lr, cfg.weight_decay, Some(&scales))?;
            loss_sum += loss.to_f64_lossy() * chunk.len() as f64;
            seen += chunk.len();
        }
        let (val_acc, val_auc) = if val.0.is_empty() {
            (f64::NAN, None)
        } else {
            let m = binary_metrics_lenient(&positive_scores(&model, val.0)?, val.1)?;
            (m.acc, m.auc)
        };
        let record = FinetuneRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            val_acc,
            val_auc,
        };
        if let Some(cb) = progress.as_mut() {
            cb(&record);
        }
        if best.as_ref().is_none_or(|(_, b)| better(&record, b)) {
            best = Some((model.clone(), record));
        }
        history.push(record);
    }
    let (best, best_record) = best.expect("at least one epoch");
    Ok(FinetuneOutcome {
        best,
        best_epoch: best_record.epoch,
        last: model,
        optimizer,
        history,
    })
}

/// `epoch,lr,train_loss,val_acc,val_auc`; missing values are written empty.
pub fn write_finetune_history(path: &Path, history: &[FinetuneRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "train_loss", "val_acc", "val_auc"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            if r.val_acc.is_nan() { String::new() } else { r.val_acc.to_string() },
            r.val_auc.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::model::ModelConfig;

    #[test]
    fn memorizes_sixteen_samples() {
        let data = generate_synthetic(&SyntheticConfig::coupled_vs_independent([20, 20, 20], [8, 0, 0], 5)).unwrap();
        let model = Classifier::<f32>::build(&ModelConfig::tiny(), 0, 0.001).unwrap();
        let cfg = FinetuneConfig {
            epochs: 100,
            warmup_epochs: 5,
            mixup_alpha: 0.0,
            label_smoothing: 0.0,
            dropout: 0.0,
            layer_decay: 1.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let out = finetune(model, (&data.volumes, &data.labels), (&data.volumes, &data.labels), &cfg, None).unwrap();
        let acc = evaluate(&out.last, &data.volumes, &data.labels).unwrap().acc;
        assert_eq!(acc, 1.0, "{:?}", out.history.last());
        assert_eq!(out.history.len(), 100);
    }

    #[test]
    fn class_count_mismatch_is_config_error() {
        let data = generate_synthetic(&SyntheticConfig::coupled_vs_independent([20, 20, 20], [2, 0, 0], 5)).unwrap();
        let model = Classifier::<f32>::build(&ModelConfig::tiny(), 0, 0.001).unwrap();
        let labels = vec![0, 1, 2, 1];
        let err = finetune(model, (&data.volumes, &labels), (&[], &[]), &FinetuneConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn checkpoint_selection_order() {
        let r = |epoch, val_acc, val_auc| FinetuneRecord {
            epoch,
            lr: 0.0,
            train_loss: 0.0,
            val_acc,
            val_auc,
        };
        assert!(better(&r(1, 0.9, Some(0.5)), &r(0, 0.8, Some(0.99))));
        assert!(better(&r(1, 0.8, Some(0.9)), &r(0, 0.8, Some(0.7))));
        assert!(better(&r(2, 0.8, Some(0.9)), &r(1, 0.8, Some(0.9))));
        assert!(!better(&r(2, 0.8, None), &r(1, 0.8, Some(0.5))));
    }
}
