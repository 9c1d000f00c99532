use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optimizer::AdamW;
use super::schedule::lr_at;
use crate::data::{sample_mask, TokenSequence, VolumeGrid};
use crate::error::{Error, Result};
use crate::model::{CsCrl, ObjectiveSpec};
use crate::objective::{GramReduction, LossReport, LossWeights};
use crate::scalar::Scalar;
use crate::seed;

pub(crate) const SHUFFLE_STREAM: u64 = 1;
pub(crate) const MASK_STREAM: u64 = 2;
pub(crate) const DROPOUT_STREAM: u64 = 3;
pub(crate) const MIXUP_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub mask_ratio: f64,
    pub weights: LossWeights,
    pub reduction: GramReduction,
    pub seed: u64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            base_lr: 1.5e-4,
            warmup_epochs: 40,
            weight_decay: 0.05,
            epochs: 300,
            mask_ratio: 0.76,
            weights: LossWeights::default(),
            reduction: GramReduction::OffDiagonal,
            seed: 0,
            max_steps: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio must lie in (0, 1), got {}", self.mask_ratio)));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        if self.weights.beta1 < 0.0 || self.weights.beta2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            weights: self.weights,
            reduction: self.reduction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<S> {
    pub model: CsCrl<S>,
    pub optimizer: AdamW<S>,
    pub history: Vec<StepRecord>,
    /// Last epoch that ran, counted from 0.
    pub last_epoch: usize,
}

/// Fresh mask for sample `i` at optimizer step `step`.
pub(crate) fn step_mask_seed(seed: u64, step: usize, i: usize) -> u64 {
    seed::derive(seed, &[MASK_STREAM, step as u64, i as u64])
}

/// Masked-reconstruction pretraining. Each step draws a fresh mask per sample.
pub fn pretrain<S: Scalar>(
    mut model: CsCrl<S>,
    volumes: &[VolumeGrid],
    cfg: &PretrainConfig,
    mut progress: Option<&mut dyn FnMut(&StepRecord)>,
) -> Result<PretrainOutcome<S>> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(Error::Contract("pretraining needs at least one volume".into()));
    }
    let tokens: Vec<TokenSequence<S>> = volumes.iter().map(|v| model.tokens(v)).collect::<Result<_>>()?;
    let n = model.cfg.num_tokens();
    let obj = cfg.objective();
    let mut optimizer = AdamW::new(&model.params);
    let mut history = Vec::new();
    let mut step = 0usize;
    let mut last_epoch = 0;
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        last_epoch = epoch;
        let lr = lr_at(epoch, cfg.base_lr, cfg.warmup_epochs, cfg.epochs);
        order.shuffle(&mut seed::rng_at(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            step += 1;
            let batch = chunk
                .iter()
                .enumerate()
                .map(|(i, &j)| Ok((tokens[j].clone(), sample_mask(n, cfg.mask_ratio, step_mask_seed(cfg.seed, step, i))?)))
                .collect::<Result<Vec<_>>>()?;
            let dropout_seed = seed::derive(cfg.seed, &[DROPOUT_STREAM, step as u64]);
            let (report, total, grads) = match model.batch_loss_and_grad(&batch, &obj, Some(dropout_seed)) {
                Ok(r) => r,
                Err(Error::Numeric(m)) => return Err(Error::Numeric(format!("step {step}: {m}"))),
                Err(e) => return Err(e),
            };
            if !total.is_finite() {
                return Err(Error::Numeric(format!("loss became non-finite at step {step}")));
            }
            optimizer
                .step(&mut model.params, &grads, lr, cfg.weight_decay, None)
                .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
            let record = StepRecord {
                epoch,
                step,
                lr,
                report,
            };
            if let Some(cb) = progress.as_mut() {
                cb(&record);
            }
            history.push(record);
        }
    }
    Ok(PretrainOutcome {
        model,
        optimizer,
        history,
        last_epoch,
    })
}

/// `epoch,step,lr,L_pixel,L_c,L_nc,L_all`, one row per optimizer step.
pub fn write_pretrain_history(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "step", "lr", "L_pixel", "L_c", "L_nc", "L_all"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.lr.to_string(),
            r.report.pixel.to_string(),
            r.report.connectome.to_string(),
            r.report.nonconnectome.to_string(),
            r.report.total.to_string(),
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

    fn volumes(n: usize) -> Vec<VolumeGrid> {
        let cfg = SyntheticConfig::coupled_vs_independent([20, 20, 20], [n / 2, 0, 0], 1);
        generate_synthetic(&cfg).unwrap().volumes
    }

    fn short() -> PretrainConfig {
        PretrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 4,
            base_lr: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let vols = volumes(8);
        let model = CsCrl::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
        let a = pretrain(model.clone(), &vols, &short(), None).unwrap();
        let b = pretrain(model, &vols, &short(), None).unwrap();
        assert_eq!(a.history.len(), 6);
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn max_steps_and_history_csv() {
        let vols = volumes(8);
        let model = CsCrl::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
        let cfg = PretrainConfig {
            max_steps: Some(3),
            ..short()
        };
        let out = pretrain(model, &vols, &cfg, None).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.optimizer.step, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        write_pretrain_history(&path, &out.history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,step,lr,L_pixel,L_c,L_nc,L_all\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = PretrainConfig {
            warmup_epochs: 5,
            epochs: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PretrainConfig {
            mask_ratio: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn divergence_names_the_step() {
        let vols = volumes(4);
        let mut model = CsCrl::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
        let id = model.params.find("decoder.head.weight").unwrap();
        model.params.get_mut(id).data[0] = f32::NAN;
        let err = pretrain(model, &vols, &short(), None).unwrap_err();
        assert!(err.to_string().contains("step 1"), "{err}");
    }
}
