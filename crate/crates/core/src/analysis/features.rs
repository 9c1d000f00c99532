use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::data::VolumeGrid;
use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::scalar::Scalar;

/// Population variance over every entry of a feature map.
pub fn population_variance<S: Scalar>(map: ArrayView2<S>) -> f64 {
    let n = map.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = map.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
    map.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n
}

/// Per-block feature variance, averaged over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceProfile {
    pub variances: Vec<f64>,
}

impl VarianceProfile {
    /// `(l + 1) / depth` for block `l`.
    pub fn normalized_depth(&self) -> Vec<f64> {
        let d = self.variances.len() as f64;
        (1..=self.variances.len()).map(|l| l as f64 / d).collect()
    }
}

/// Block output feature maps of every volume, as `f64`, indexed `[sample][block]`.
pub(crate) fn block_outputs<S: Scalar, M: EncoderModel<S>>(
    model: &M,
    volumes: &[VolumeGrid],
) -> Result<Vec<Vec<Array2<f64>>>> {
    if volumes.is_empty() {
        return Err(Error::Contract("feature analysis needs at least one volume".into()));
    }
    volumes
        .par_iter()
        .map(|v| {
            let cache = model.encode_full(&model.tokens(v)?)?;
            Ok((0..model.config().encoder_depth)
                .map(|l| cache.block_output(l).mapv(|x| x.to_f64_lossy()))
                .collect())
        })
        .collect()
}

pub fn feature_variance<S: Scalar, M: EncoderModel<S>>(model: &M, volumes: &[VolumeGrid]) -> Result<VarianceProfile> {
    let maps = block_outputs(model, volumes)?;
    let depth = model.config().encoder_depth;
    let b = maps.len() as f64;
    let variances = (0..depth)
        .map(|l| maps.iter().map(|s| population_variance(s[l].view())).sum::<f64>() / b)
        .collect();
    Ok(VarianceProfile { variances })
}
