use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use serde::Serialize;

use crate::data::{MaskPartition, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{Classifier, CsCrl, Gradients, ObjectiveSpec, ParamStore};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    /// Minimum entries drawn from each tensor.
    pub per_tensor: usize,
    /// Minimum entries drawn overall.
    pub min_total: usize,
    pub tolerance: f64,
    /// Finite-difference step relative to the parameter magnitude.
    pub rel_step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            per_tensor: 4,
            min_total: 200,
            tolerance: 1e-4,
            rel_step: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub group: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    /// Tensors whose analytic gradient is identically zero.
    pub dead: Vec<String>,
    pub groups: BTreeSet<usize>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

const FLOOR: f64 = 0.1;
const DENOM_FLOOR: f64 = 1e-6;

/// Compares `analytic` with central differences of `loss`, perturbing the store
/// reached through `store_mut` one entry at a time.
pub fn check_gradients<M>(
    model: &mut M,
    store_mut: impl Fn(&mut M) -> &mut ParamStore<f64>,
    loss: impl Fn(&M) -> Result<f64>,
    analytic: &Gradients<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = seed::rng(cfg.seed);
    let (sizes, names, groups): (Vec<usize>, Vec<String>, Vec<usize>) = {
        let store = store_mut(model);
        let mut sizes = Vec::new();
        let mut names = Vec::new();
        let mut groups = Vec::new();
        for p in store.iter() {
            sizes.push(p.len());
            names.push(p.name.clone());
            groups.push(p.group);
        }
        (sizes, names, groups)
    };
    let per = cfg.per_tensor.max(cfg.min_total.div_ceil(sizes.len().max(1)));
    let dead = names
        .iter()
        .zip(&analytic.data)
        .filter(|(_, g)| g.iter().all(|&v| v == 0.0))
        .map(|(n, _)| n.clone())
        .collect();

    let mut entries = Vec::new();
    for (t, &len) in sizes.iter().enumerate() {
        let picks = sample(&mut rng, len, per.min(len)).into_vec();
        for k in picks {
            let theta = store_mut(model).iter().nth(t).expect("tensor").data[k];
            let h = cfg.rel_step * theta.abs().max(FLOOR);
            let set = |m: &mut M, v: f64| store_mut(m).iter_mut().nth(t).expect("tensor").data[k] = v;
            set(model, theta + h);
            let plus = loss(model);
            set(model, theta - h);
            let minus = loss(model);
            set(model, theta);
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic.data[t][k];
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            entries.push(GradCheckEntry {
                param: names[t].clone(),
                group: groups[t],
                index: k,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let report = GradCheckReport {
        groups: entries.iter().map(|e| e.group).collect(),
        entries,
        max_rel_error,
        dead,
    };
    let failing: Vec<String> = report
        .entries
        .iter()
        .filter(|e| !(e.rel_error < cfg.tolerance))
        .map(|e| format!("{}[{}] (rel error {:.3e})", e.param, e.index, e.rel_error))
        .collect();
    if !failing.is_empty() {
        return Err(Error::GradCheck(failing.join(", ")));
    }
    Ok(report)
}

/// Gradient check of the pretraining objective on a fixed batch.
pub fn grad_check_pretrain(
    model: &CsCrl<f64>,
    batch: &[(TokenSequence<f64>, MaskPartition)],
    obj: &ObjectiveSpec,
    dropout_seed: Option<u64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, _, grads) = model.batch_loss_and_grad(batch, obj, dropout_seed)?;
    let mut probe = model.clone();
    check_gradients(
        &mut probe,
        |m| &mut m.params,
        |m| Ok(m.batch_loss(batch, obj, dropout_seed)?.1),
        &grads,
        cfg,
    )
}

/// Gradient check of the fine-tuning loss on fixed inputs and soft targets.
pub fn grad_check_finetune(
    model: &Classifier<f64>,
    inputs: &[Array2<f64>],
    targets: ArrayView2<f64>,
    dropout_seed: Option<u64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, grads) = model.batch_loss_and_grad(inputs, targets, dropout_seed)?;
    let mut probe = model.clone();
    check_gradients(
        &mut probe,
        |m| &mut m.params,
        |m| m.batch_loss(inputs, targets, dropout_seed),
        &grads,
        cfg,
    )
}
