use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{
    CliError, CliResult, EvaluateArgs, FinetuneArgs, GenDataArgs, GradCheckArgs, GradTarget, PretrainArgs, SweepArgs,
};
use crate::data::{encode_volume, generate_synthetic, load_manifest, sample_mask, DatasetIndex, Split, SyntheticConfig, VolumeGrid};
use crate::error::{Error, Result};
use crate::model::{Classifier, CsCrl, ModelConfig, ObjectiveSpec, ParamStore};
use crate::objective::{smooth_labels, LossWeights, Mode};
use crate::seed;
use crate::training::{
    evaluate as evaluate_split, finetune as run_finetune, grad_check_finetune, grad_check_pretrain, load_checkpoint,
    pretrain as run_pretrain, save_checkpoint, write_finetune_history, write_pretrain_history, CheckpointMeta,
    FinetuneConfig, GradCheckConfig, GradCheckReport, Metrics, PretrainConfig, StepRecord,
};

pub(super) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(super) fn write_json(path: &Path, value: &Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

/// Dataset index from a directory holding `manifest.csv` or from a manifest path.
pub(super) fn open_data(path: &Path) -> Result<(DatasetIndex, PathBuf)> {
    let manifest = if path.is_dir() { path.join("manifest.csv") } else { path.to_path_buf() };
    Ok((load_manifest(&manifest)?, manifest))
}

/// SHA-256 over the manifest bytes followed by every loaded volume's encoding.
pub(super) fn data_hash(manifest: &Path, volumes: &[VolumeGrid]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(std::fs::read(manifest).map_err(|e| Error::io(manifest, e))?);
    for v in volumes {
        h.update(encode_volume(v));
    }
    Ok(hex::encode(h.finalize()))
}

pub(super) fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path).map_err(|e| Error::io(path, e))?)))
}

pub(super) fn load_split(path: &Path, split: Split) -> Result<(Vec<VolumeGrid>, Vec<usize>, Vec<String>, String)> {
    let (index, manifest) = open_data(path)?;
    let (volumes, labels) = index.load_split(split)?;
    let ids = index.entries.iter().filter(|e| e.split == split).map(|e| e.id.clone()).collect();
    let hash = data_hash(&manifest, &volumes)?;
    Ok((volumes, labels, ids, hash))
}

pub(super) fn echo<A: Serialize>(command: &str, args: &A, resolved: Value, inputs: Value) -> Result<Value> {
    Ok(json!({
        "command": command,
        "args": serde_json::to_value(args)?,
        "resolved": resolved,
        "inputs": inputs,
    }))
}

/// Loaded parameters with the architecture to rebuild them into.
pub(super) struct LoadedCheckpoint {
    pub params: ParamStore<f32>,
    pub cfg: ModelConfig,
    pub meta: Option<CheckpointMeta>,
    pub hash: String,
}

impl LoadedCheckpoint {
    pub fn is_classifier(&self) -> bool {
        self.params.find("head.weight").is_some()
    }

    pub fn classifier(&self) -> Result<Classifier<f32>> {
        if !self.is_classifier() {
            return Err(Error::Schema("checkpoint has no classification head; fine-tune it first".into()));
        }
        Classifier::with_params(&self.cfg, self.params.clone())
    }

    pub fn pretrained(&self) -> Result<CsCrl<f32>> {
        if self.params.find("decoder.mask_token").is_none() {
            return Err(Error::Schema("checkpoint has no decoder; use a pretraining checkpoint".into()));
        }
        CsCrl::with_params(&self.cfg, self.params.clone())
    }
}

/// Reads a checkpoint; the architecture comes from its metadata, else from `fallback`.
pub(super) fn load(path: &Path, fallback: &ModelConfig) -> Result<LoadedCheckpoint> {
    let ckpt = load_checkpoint::<f32>(path)?;
    let cfg = ckpt.meta.as_ref().map_or_else(|| fallback.clone(), |m| m.model.clone());
    Ok(LoadedCheckpoint {
        params: ckpt.params,
        cfg,
        meta: ckpt.meta,
        hash: file_hash(path)?,
    })
}

fn check_dims(cfg: &ModelConfig, volumes: &[VolumeGrid]) -> Result<()> {
    match volumes.first() {
        Some(v) if v.dims() != cfg.volume_dims || v.channels() != cfg.channels => Err(Error::Config(format!(
            "data volumes are {:?} x {} channels but the model expects {:?} x {}; pick a matching --preset",
            v.dims(),
            v.channels(),
            cfg.volume_dims,
            cfg.channels
        ))),
        _ => Ok(()),
    }
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let fracs_ok = (0.0..1.0).contains(&a.val_frac) && (0.0..1.0).contains(&a.test_frac) && a.val_frac + a.test_frac < 1.0;
    if !fracs_ok {
        return Err(CliError::Usage("--val-frac and --test-frac must be in [0, 1) and sum below 1".into()));
    }
    if a.n_per_class == 0 || a.dim < 2 {
        return Err(CliError::Usage("--n-per-class must be positive and --dim at least 2".into()));
    }
    let val = (a.n_per_class as f64 * a.val_frac).round() as usize;
    let test = (a.n_per_class as f64 * a.test_frac).round() as usize;
    let train = a.n_per_class.saturating_sub(val + test);
    let cfg = SyntheticConfig::coupled_vs_independent([a.dim; 3], [train, val, test], a.seed);
    let ds = generate_synthetic(&cfg)?;
    ds.write(&a.out)?;
    let record = echo("gen-data", a, json!({"per_class": [train, val, test]}), Value::Null)?;
    write_json(&a.out.join("gen-data.run.json"), &record)?;
    println!(
        "wrote {} volumes ({train}/{val}/{test} per class for train/val/test) to {}",
        ds.volumes.len(),
        a.out.display()
    );
    Ok(())
}

fn default_warmup(explicit: Option<usize>, standard: usize, epochs: usize) -> usize {
    explicit.unwrap_or(if epochs > standard { standard } else { epochs / 10 })
}

pub(super) fn pretrain_config(a: &PretrainArgs) -> Result<PretrainConfig> {
    Ok(PretrainConfig {
        batch_size: a.batch_size,
        base_lr: a.lr,
        warmup_epochs: default_warmup(a.warmup, 40, a.epochs),
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        mask_ratio: a.mask_ratio,
        weights: LossWeights::from_beta1(a.beta1)?,
        reduction: a.gram_reduction,
        seed: a.seed,
        max_steps: a.max_steps,
    })
}

pub(super) fn finetune_config(a: &FinetuneArgs) -> FinetuneConfig {
    FinetuneConfig {
        batch_size: a.batch_size,
        base_lr: a.lr,
        layer_decay: a.layer_decay,
        weight_decay: a.weight_decay,
        warmup_epochs: default_warmup(a.warmup, 5, a.epochs),
        label_smoothing: a.label_smoothing,
        dropout: a.dropout,
        mixup_alpha: a.mixup_alpha,
        init_scale: a.init_scale,
        epochs: a.epochs,
        seed: a.seed,
    }
}

fn write_gram_history(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "mean_sigma_g1", "mean_sigma_g2"])?;
    for r in history {
        let g2 = if r.report.mean_sigma_g2.is_nan() { String::new() } else { r.report.mean_sigma_g2.to_string() };
        w.write_record([r.step.to_string(), r.report.mean_sigma_g1.to_string(), g2])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pretrains on the training split; returns the trained model and its run record.
pub(super) fn pretrain_in(a: &PretrainArgs, quiet: bool) -> CliResult<(CsCrl<f32>, Value)> {
    let cfg = pretrain_config(a)?;
    let model_cfg = a.preset.config().with_mode(a.mode);
    let (volumes, _, _, hash) = load_split(&a.data, Split::Train)?;
    check_dims(&model_cfg, &volumes)?;
    let model = CsCrl::<f32>::build(&model_cfg, a.seed)?;
    let epochs = cfg.epochs;
    let mut report = |r: &StepRecord| {
        let boundary = r.step % volumes.len().div_ceil(cfg.batch_size) == 0;
        if !quiet && boundary && (r.epoch % 10 == 0 || r.epoch + 1 == epochs) {
            println!(
                "epoch {:>4}/{epochs}  lr {:.3e}  L_all {:.5}  L_pixel {:.5}  sigma(G1) {:.3}  sigma(G2) {:.3}",
                r.epoch + 1,
                r.lr,
                r.report.total,
                r.report.pixel,
                r.report.mean_sigma_g1,
                r.report.mean_sigma_g2
            );
        }
    };
    let outcome = run_pretrain(model, &volumes, &cfg, Some(&mut report))?;
    create_dir(&a.out)?;
    write_pretrain_history(&a.out.join("pretrain_history.csv"), &outcome.history)?;
    write_gram_history(&a.out.join("pretrain_gram.csv"), &outcome.history)?;
    let record = echo(
        "pretrain",
        a,
        json!({
            "beta1": cfg.weights.beta1,
            "beta2": cfg.weights.beta2,
            "warmup_epochs": cfg.warmup_epochs,
            "model": model_cfg,
            "steps": outcome.history.len(),
        }),
        json!({"data_sha256": hash}),
    )?;
    let meta = CheckpointMeta {
        mode: a.mode,
        model: model_cfg,
        config: record.clone(),
        epoch: outcome.last_epoch,
        seed: a.seed,
        optimizer_step: outcome.optimizer.step,
        content_hash: String::new(),
    };
    save_checkpoint(&a.out.join("pretrain.ckpt"), &outcome.model.params, Some(&outcome.optimizer), Some(meta))?;
    Ok((outcome.model, record))
}

pub fn pretrain(a: &PretrainArgs) -> CliResult<()> {
    let (_, record) = pretrain_in(a, false)?;
    println!("resolved beta2 = {}", record["resolved"]["beta2"]);
    println!("wrote {}", a.out.join("pretrain.ckpt").display());
    Ok(())
}

/// Fine-tunes from `init`; writes checkpoints and history, returns the selected classifier.
pub(super) fn finetune_in(a: &FinetuneArgs, init: Option<&LoadedCheckpoint>, quiet: bool) -> CliResult<Classifier<f32>> {
    let cfg = finetune_config(a);
    let (train_x, train_y, _, train_hash) = load_split(&a.data, Split::Train)?;
    let (val_x, val_y, _, val_hash) = load_split(&a.data, Split::Val)?;
    let classes = train_y.iter().chain(&val_y).max().map_or(2, |&k| (k + 1).max(2));
    let (model, mode, ckpt_hash) = match init {
        Some(c) => {
            let mut model_cfg = c.cfg.clone();
            model_cfg.num_classes = classes;
            check_dims(&model_cfg, &train_x)?;
            let m = Classifier::from_pretrained(&model_cfg, &c.params, a.seed, a.init_scale)?;
            (m, c.meta.as_ref().map_or(model_cfg.mode, |m| m.mode), Some(c.hash.clone()))
        }
        None => {
            let mut model_cfg = a.preset.config();
            model_cfg.num_classes = classes;
            check_dims(&model_cfg, &train_x)?;
            (Classifier::build(&model_cfg, a.seed, a.init_scale)?, model_cfg.mode, None)
        }
    };
    let mut report = |r: &crate::training::FinetuneRecord| {
        if !quiet {
            let auc = r.val_auc.map_or("-".to_string(), |v| format!("{v:.4}"));
            println!(
                "epoch {:>4}/{}  lr {:.3e}  train_loss {:.5}  val_acc {:.4}  val_auc {auc}",
                r.epoch + 1,
                cfg.epochs,
                r.lr,
                r.train_loss,
                r.val_acc
            );
        }
    };
    let outcome = run_finetune(model, (&train_x, &train_y), (&val_x, &val_y), &cfg, Some(&mut report))?;
    create_dir(&a.out)?;
    write_finetune_history(&a.out.join("finetune_history.csv"), &outcome.history)?;
    let record = echo(
        "finetune",
        a,
        json!({
            "warmup_epochs": cfg.warmup_epochs,
            "model": outcome.best.cfg,
            "best_epoch": outcome.best_epoch,
        }),
        json!({"train_sha256": train_hash, "val_sha256": val_hash, "ckpt_sha256": ckpt_hash}),
    )?;
    let meta = |epoch: usize| CheckpointMeta {
        mode,
        model: outcome.best.cfg.clone(),
        config: record.clone(),
        epoch,
        seed: a.seed,
        optimizer_step: 0,
        content_hash: String::new(),
    };
    save_checkpoint(&a.out.join("finetune.ckpt"), &outcome.best.params, None, Some(meta(outcome.best_epoch)))?;
    let last_epoch = outcome.history.last().map_or(0, |r| r.epoch);
    save_checkpoint(
        &a.out.join("finetune_last.ckpt"),
        &outcome.last.params,
        Some(&outcome.optimizer),
        Some(meta(last_epoch)),
    )?;
    Ok(outcome.best)
}

pub fn finetune(a: &FinetuneArgs) -> CliResult<()> {
    if a.ckpt.is_some() && a.from_scratch {
        return Err(CliError::Usage("--ckpt and --from-scratch are mutually exclusive".into()));
    }
    let init = match &a.ckpt {
        Some(p) => {
            let c = load(p, &a.preset.config())?;
            if c.params.find("decoder.mask_token").is_none() {
                return Err(Error::Schema(format!("{} is not a pretraining checkpoint", p.display())).into());
            }
            Some(c)
        }
        None => None,
    };
    finetune_in(a, init.as_ref(), false)?;
    println!("wrote {}", a.out.join("finetune.ckpt").display());
    Ok(())
}

pub(super) fn metrics_json(split: Split, m: &Metrics) -> Value {
    json!({
        "split": split.as_str(),
        "acc": m.acc,
        "sen": m.sen,
        "spe": m.spe,
        "auc": m.auc,
        "confusion": {"tp": m.confusion.tp, "fp": m.confusion.fp, "tn": m.confusion.tn, "fn": m.confusion.fn_},
    })
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let ckpt = load(&a.ckpt, &a.preset.config())?;
    let model = ckpt.classifier()?;
    let (volumes, labels, ids, hash) = load_split(&a.data, a.split)?;
    check_dims(&model.cfg, &volumes)?;
    let scores = crate::training::positive_scores(&model, &volumes)?;
    let m = evaluate_split(&model, &volumes, &labels)?;
    create_dir(&a.out)?;
    let preds = a.out.join(format!("predictions_{}.csv", a.split));
    let mut w = csv::Writer::from_path(&preds)?;
    w.write_record(["id", "label", "score"])?;
    for ((id, y), s) in ids.iter().zip(&labels).zip(&scores) {
        w.write_record([id.clone(), y.to_string(), s.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&preds, e))?;
    let mut record = echo("evaluate", a, Value::Null, json!({"data_sha256": hash, "ckpt_sha256": ckpt.hash}))?;
    record["metrics"] = metrics_json(a.split, &m);
    write_json(&a.out.join(format!("evaluate_{}.json", a.split)), &record)?;
    let auc = m.auc.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("{} ACC {:.4}  SEN {:.4}  SPE {:.4}  AUC {auc}", a.split, m.acc, m.sen, m.spe);
    Ok(())
}

fn random_tokens(cfg: &ModelConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((cfg.num_tokens(), cfg.token_len()), |_| rng.random::<f64>())
}

fn print_report(label: &str, r: &GradCheckReport) {
    println!(
        "{label}: {} entries over groups {:?}, max relative error {:.3e}",
        r.entries.len(),
        r.groups,
        r.max_rel_error
    );
    if !r.dead.is_empty() {
        println!("{label}: zero-gradient tensors {}", r.dead.join(", "));
    }
}

pub fn grad_check(a: &GradCheckArgs) -> CliResult<()> {
    let check = GradCheckConfig {
        min_total: a.samples,
        tolerance: a.tolerance,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let base = ModelConfig::tiny();
    let mut rng = seed::rng(a.seed);
    let mut reports = Vec::new();
    let mut failure = None;
    if a.target != GradTarget::Finetune {
        let modes = a.mode.map_or(vec![Mode::Cscrl, Mode::Mae], |m| vec![m]);
        for mode in modes {
            let cfg = base.clone().with_mode(mode);
            let model = CsCrl::<f64>::build(&cfg, a.seed)?;
            let batch = (0..2)
                .map(|i| {
                    let tokens = crate::data::TokenSequence {
                        data: random_tokens(&cfg, &mut rng),
                        indices: (0..cfg.num_tokens()).collect(),
                        grid: cfg.grid(),
                        patch_size: cfg.patch_size,
                        channels: cfg.channels,
                    };
                    Ok((tokens, sample_mask(cfg.num_tokens(), 0.75, seed::derive(a.seed, &[i]))?))
                })
                .collect::<Result<Vec<_>>>()?;
            let obj = ObjectiveSpec {
                weights: LossWeights::default(),
                reduction: a.gram_reduction,
            };
            let label = format!("pretrain/{mode}");
            match grad_check_pretrain(&model, &batch, &obj, None, &check) {
                Ok(r) => {
                    print_report(&label, &r);
                    reports.push((label, r));
                }
                Err(e) => failure = failure.or(Some(Error::GradCheck(format!("{label}: {e}")))),
            }
        }
    }
    if a.target != GradTarget::Pretrain {
        let model = Classifier::<f64>::build(&base, a.seed, 1.0)?;
        let inputs: Vec<Array2<f64>> = (0..3).map(|_| random_tokens(&base, &mut rng)).collect();
        let targets = smooth_labels::<f64>(&[0, 1, 1], 2, 0.1)?;
        match grad_check_finetune(&model, &inputs, targets.view(), None, &check) {
            Ok(r) => {
                print_report("finetune", &r);
                reports.push(("finetune".into(), r));
            }
            Err(e) => failure = failure.or(Some(Error::GradCheck(format!("finetune: {e}")))),
        }
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = dir.join("gradcheck.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["check", "param", "group", "index", "analytic", "numeric", "rel_error"])?;
        for (label, r) in &reports {
            for e in &r.entries {
                w.write_record([
                    label.clone(),
                    e.param.clone(),
                    e.group.to_string(),
                    e.index.to_string(),
                    e.analytic.to_string(),
                    e.numeric.to_string(),
                    e.rel_error.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_json(&dir.join("grad-check.run.json"), &echo("grad-check", a, Value::Null, Value::Null)?)?;
    }
    match failure {
        Some(e) => Err(e.into()),
        None => {
            println!("gradient check passed (tolerance {:e})", a.tolerance);
            Ok(())
        }
    }
}

fn sweep_cell_args(a: &SweepArgs, beta1: f64, mask_ratio: f64, dir: &Path) -> (PretrainArgs, FinetuneArgs) {
    use clap::Parser;
    let data = a.data.to_string_lossy().into_owned();
    let out = dir.to_string_lossy().into_owned();
    let p = super::Cli::parse_from([
        "cscrl",
        "pretrain",
        "--data",
        &data,
        "--mode",
        &a.mode.to_string(),
        "--beta1",
        &beta1.to_string(),
        "--mask-ratio",
        &mask_ratio.to_string(),
        "--epochs",
        &a.pretrain_epochs.to_string(),
        "--seed",
        &a.seed.to_string(),
        "--out",
        &out,
    ]);
    let f = super::Cli::parse_from([
        "cscrl",
        "finetune",
        "--data",
        &data,
        "--ckpt",
        &dir.join("pretrain.ckpt").to_string_lossy(),
        "--epochs",
        &a.finetune_epochs.to_string(),
        "--seed",
        &a.seed.to_string(),
        "--out",
        &out,
    ]);
    match (p.command, f.command) {
        (super::Command::Pretrain(mut p), super::Command::Finetune(mut f)) => {
            p.preset = a.preset;
            f.preset = a.preset;
            (p, f)
        }
        _ => unreachable!("fixed subcommands"),
    }
}

/// Same as running `pretrain`, `finetune --ckpt` and `evaluate` with the cell's flags.
pub fn sweep(a: &SweepArgs) -> CliResult<()> {
    if a.beta1.is_empty() || a.mask_ratio.is_empty() {
        return Err(CliError::Usage("sweep ranges must each list at least one value".into()));
    }
    create_dir(&a.out)?;
    let path = a.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["beta1", "mask_ratio", "acc", "auc"])?;
    let mut cells = Vec::new();
    for &b1 in &a.beta1 {
        for &m in &a.mask_ratio {
            let dir = a.out.join(format!("beta1_{b1}_mask_{m}"));
            let (pa, fa) = sweep_cell_args(a, b1, m, &dir);
            pretrain_in(&pa, true)?;
            let ckpt = load(&dir.join("pretrain.ckpt"), &a.preset.config())?;
            finetune_in(&fa, Some(&ckpt), true)?;
            let model = load(&dir.join("finetune.ckpt"), &a.preset.config())?.classifier()?;
            let (volumes, labels, _, _) = load_split(&a.data, a.split)?;
            let metrics = evaluate_split(&model, &volumes, &labels)?;
            let auc = metrics.auc.map_or(String::new(), |v| v.to_string());
            w.write_record([b1.to_string(), m.to_string(), metrics.acc.to_string(), auc.clone()])?;
            w.flush().map_err(|e| Error::io(&path, e))?;
            println!("beta1 {b1}  mask {m}  ACC {:.4}  AUC {}", metrics.acc, if auc.is_empty() { "-" } else { &auc });
            cells.push(json!({"beta1": b1, "mask_ratio": m, "metrics": metrics_json(a.split, &metrics)}));
        }
    }
    let mut record = echo("sweep", a, Value::Null, Value::Null)?;
    record["cells"] = Value::Array(cells);
    write_json(&a.out.join("sweep.run.json"), &record)?;
    println!("wrote {}", path.display());
    Ok(())
}
