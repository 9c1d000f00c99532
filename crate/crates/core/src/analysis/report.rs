use std::path::Path;

use super::attention::HubReport;
use super::features::VarianceProfile;
use super::landscape::LossSurface;
use super::reconstruct::ReconstructionRecord;
use super::spectrum::SpectralProfile;
use crate::error::{Error, Result};
use crate::model::AttentionMap;
use crate::scalar::Scalar;

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// `layer,head,row,col,value`, one row per head entry.
pub fn write_attention<S: Scalar>(path: &Path, map: &AttentionMap<S>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "head", "row", "col", "value"])?;
    for (h, a) in map.heads.iter().enumerate() {
        for ((r, c), v) in a.indexed_iter() {
            w.write_record([map.layer.to_string(), h.to_string(), r.to_string(), c.to_string(), v.to_string()])?;
        }
    }
    finish(w, path)
}

/// Head-averaged map in the attention schema, with `head` set to `mean`.
pub fn write_attention_mean<S: Scalar>(path: &Path, map: &AttentionMap<S>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "head", "row", "col", "value"])?;
    for ((r, c), v) in map.head_average().indexed_iter() {
        w.write_record([map.layer.to_string(), "mean".into(), r.to_string(), c.to_string(), v.to_string()])?;
    }
    finish(w, path)
}

pub fn write_hubs(path: &Path, report: &HubReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "patch", "gx", "gy", "gz", "score"])?;
    for h in &report.hubs {
        let [gx, gy, gz] = h.coords;
        w.write_record([
            h.rank.to_string(),
            h.patch.to_string(),
            gx.to_string(),
            gy.to_string(),
            gz.to_string(),
            h.score.to_string(),
        ])?;
    }
    finish(w, path)
}

/// Blocks are numbered from 1.
pub fn write_variance(path: &Path, profile: &VarianceProfile) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["block", "normalized_depth", "variance"])?;
    for (l, (d, v)) in profile.normalized_depth().iter().zip(&profile.variances).enumerate() {
        w.write_record([(l + 1).to_string(), d.to_string(), v.to_string()])?;
    }
    finish(w, path)
}

pub fn write_spectrum(path: &Path, profile: &SpectralProfile) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["block", "freq_over_pi", "log_amp"])?;
    for (l, b) in profile.blocks.iter().enumerate() {
        for (f, a) in b.freq_over_pi.iter().zip(&b.log_amp) {
            w.write_record([(l + 1).to_string(), f.to_string(), a.to_string()])?;
        }
    }
    finish(w, path)
}

pub fn write_spectrum_delta(path: &Path, profile: &SpectralProfile) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["block", "delta_log_amp"])?;
    for (l, b) in profile.blocks.iter().enumerate() {
        w.write_record([(l + 1).to_string(), b.delta.to_string()])?;
    }
    finish(w, path)
}

/// Infinite losses are written as `inf`.
pub fn write_landscape(path: &Path, surface: &LossSurface) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["alpha", "beta", "loss"])?;
    for ((i, j), v) in surface.values.indexed_iter() {
        w.write_record([surface.alphas[i].to_string(), surface.betas[j].to_string(), v.to_string()])?;
    }
    finish(w, path)
}

pub fn write_reconstructions(path: &Path, records: &[ReconstructionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "masked_mse"])?;
    for r in records {
        w.write_record([r.id.clone(), r.masked_mse.to_string()])?;
    }
    finish(w, path)
}
