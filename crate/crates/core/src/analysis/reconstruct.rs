use std::path::Path;

use ndarray::Axis;
use rayon::prelude::*;

use crate::data::{sample_mask, unpatchify, write_volume, MaskPartition, TokenSequence, VolumeGrid};
use crate::error::{Error, Result};
use crate::model::CsCrl;
use crate::objective::pixel_loss;
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionRecord {
    pub id: String,
    pub masked_mse: f64,
}

pub struct ReconstructionDump {
    pub original: VolumeGrid,
    pub masked: VolumeGrid,
    pub reconstruction: VolumeGrid,
    pub partition: MaskPartition,
    pub masked_mse: f64,
}

/// Reconstruction of one volume under `part`, plus its masked-input view.
///
/// The MSE is computed over masked patches of the stored `f32` reconstruction.
pub fn reconstruct_volume<S: Scalar>(model: &CsCrl<S>, volume: &VolumeGrid, part: &MaskPartition) -> Result<ReconstructionDump> {
    let tokens = model.tokens(volume)?;
    let out = model.forward(&tokens, part)?;
    let rebuilt = TokenSequence {
        data: out.y_all,
        ..tokens.clone()
    };
    let reconstruction = unpatchify(&rebuilt)?;
    let mut hidden = tokens.clone();
    for &i in &part.masked_idx {
        hidden.data.row_mut(i).fill(S::zero());
    }
    let masked = unpatchify(&hidden)?;
    let masked_mse = masked_region_mse(volume, &reconstruction, model.cfg.patch_size, part)?;
    Ok(ReconstructionDump {
        original: volume.clone(),
        masked,
        reconstruction,
        partition: part.clone(),
        masked_mse,
    })
}

/// Pixel loss between two volumes restricted to the masked patches of `part`.
pub fn masked_region_mse(original: &VolumeGrid, reconstruction: &VolumeGrid, patch_size: usize, part: &MaskPartition) -> Result<f64> {
    let a = crate::data::patchify::<f64>(original, patch_size)?;
    let b = crate::data::patchify::<f64>(reconstruction, patch_size)?;
    if a.count() != part.token_count() || b.count() != a.count() {
        return Err(Error::Geometry("partition does not cover the reconstruction".into()));
    }
    let target = a.data.select(Axis(0), &part.masked_idx);
    let pred = b.data.select(Axis(0), &part.masked_idx);
    pixel_loss(pred.view(), target.view())
}

/// Writes `<id>_original.vol`, `<id>_masked.vol` and `<id>_recon.vol` per sample into `dir`.
///
/// Sample `i` is masked with seed `derive(seed, [i])`.
pub fn dump_reconstructions<S: Scalar>(
    model: &CsCrl<S>,
    volumes: &[VolumeGrid],
    ids: &[String],
    mask_ratio: f64,
    mask_seed: u64,
    dir: &Path,
) -> Result<Vec<ReconstructionRecord>> {
    if ids.len() != volumes.len() {
        return Err(Error::Contract(format!("{} ids for {} volumes", ids.len(), volumes.len())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = model.cfg.num_tokens();
    let dumps: Vec<ReconstructionDump> = volumes
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let part = sample_mask(n, mask_ratio, seed::derive(mask_seed, &[i as u64]))?;
            reconstruct_volume(model, v, &part)
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(dumps.len());
    for (id, d) in ids.iter().zip(dumps) {
        write_volume(&d.original, &dir.join(format!("{id}_original.vol")))?;
        write_volume(&d.masked, &dir.join(format!("{id}_masked.vol")))?;
        write_volume(&d.reconstruction, &dir.join(format!("{id}_recon.vol")))?;
        records.push(ReconstructionRecord {
            id: id.clone(),
            masked_mse: d.masked_mse,
        });
    }
    Ok(records)
}
