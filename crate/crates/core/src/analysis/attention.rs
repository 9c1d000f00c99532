use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::data::{grid_coords, VolumeGrid};
use crate::error::{Error, Result};
use crate::model::{AttentionMap, EncoderModel};
use crate::scalar::Scalar;

/// Batch-averaged per-head attention of encoder block `layer` (0-based) on full token sequences.
pub fn attention_map<S: Scalar, M: EncoderModel<S>>(
    model: &M,
    volumes: &[VolumeGrid],
    layer: usize,
) -> Result<AttentionMap<S>> {
    let depth = model.config().encoder_depth;
    if layer >= depth {
        return Err(Error::Config(format!("attention layer {layer} out of range for {depth} blocks")));
    }
    if volumes.is_empty() {
        return Err(Error::Contract("attention map needs at least one volume".into()));
    }
    let per_sample: Vec<Vec<Array2<S>>> = volumes
        .par_iter()
        .map(|v| {
            let cache = model.encode_full(&model.tokens(v)?)?;
            Ok(cache.blocks[layer].attention.clone())
        })
        .collect::<Result<_>>()?;
    let inv = S::one() / S::c(volumes.len() as f64);
    let mut heads = per_sample[0].clone();
    for sample in &per_sample[1..] {
        for (acc, h) in heads.iter_mut().zip(sample) {
            *acc += h;
        }
    }
    for h in &mut heads {
        h.mapv_inplace(|v| v * inv);
    }
    Ok(AttentionMap { layer, heads })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hub {
    pub rank: usize,
    pub patch: usize,
    pub coords: [usize; 3],
    pub score: f64,
}

/// Top patches by attention column sum, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct HubReport {
    pub hubs: Vec<Hub>,
}

/// Ranks the columns of a square attention map by their sums.
///
/// Ties keep ascending patch index.
pub fn hub_patches<S: Scalar>(attn: ArrayView2<S>, grid: [usize; 3], k: usize) -> Result<HubReport> {
    let n = attn.nrows();
    if attn.ncols() != n {
        return Err(Error::Contract(format!("attention map must be square, got {:?}", attn.dim())));
    }
    if n != grid.iter().product::<usize>() {
        return Err(Error::Contract(format!("{n} tokens do not match patch grid {grid:?}")));
    }
    if k > n {
        return Err(Error::Config(format!("requested {k} hub patches from {n} tokens")));
    }
    let sums: Vec<f64> = attn
        .sum_axis(Axis(0))
        .iter()
        .map(|v| v.to_f64_lossy())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
    let hubs = order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, patch)| Hub {
            rank: rank + 1,
            patch,
            coords: grid_coords(patch, grid),
            score: sums[patch],
        })
        .collect();
    Ok(HubReport { hubs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CsCrl, ModelConfig};
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn column_sum_fixture() {
        // Column sums 0.9, 1.5, 0.6.
        let a = array![[0.3, 0.5, 0.2], [0.3, 0.5, 0.2], [0.3, 0.5, 0.2]];
        let r = hub_patches(a.view(), [3, 1, 1], 3).unwrap();
        let patches: Vec<usize> = r.hubs.iter().map(|h| h.patch).collect();
        assert_eq!(patches, vec![1, 0, 2]);
        assert!((r.hubs[0].score - 1.5).abs() < 1e-12);
        assert!((r.hubs[1].score - 0.9).abs() < 1e-12);
        assert_eq!(r.hubs[0].rank, 1);
    }

    #[test]
    fn ties_keep_ascending_index() {
        let a = Array2::<f64>::from_elem((8, 8), 0.125);
        let r = hub_patches(a.view(), [2, 2, 2], 5).unwrap();
        let patches: Vec<usize> = r.hubs.iter().map(|h| h.patch).collect();
        assert_eq!(patches, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn coordinates_follow_token_order() {
        let mut a = Array2::<f64>::zeros((125, 125));
        a.column_mut(31).fill(1.0);
        let r = hub_patches(a.view(), [5, 5, 5], 1).unwrap();
        assert_eq!(r.hubs[0].patch, 31);
        assert_eq!(r.hubs[0].coords, [1, 1, 1]);
    }

    #[test]
    fn k_above_token_count_is_rejected() {
        let a = Array2::<f64>::zeros((8, 8));
        assert!(matches!(hub_patches(a.view(), [2, 2, 2], 9), Err(Error::Config(_))));
        assert!(hub_patches(a.view(), [2, 2, 2], 8).is_ok());
    }

    fn tiny() -> CsCrl<f64> {
        CsCrl::build(&ModelConfig::tiny(), 3).unwrap()
    }

    fn volume(seed: u64) -> VolumeGrid {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed);
        let v = (0..8000).map(|_| rng.random::<f32>()).collect();
        VolumeGrid::new([20, 20, 20], 1, v).unwrap()
    }

    #[test]
    fn rows_are_distributions_and_layer_is_checked() {
        let m = tiny();
        let map = attention_map(&m, &[volume(0), volume(1)], 1).unwrap();
        assert_eq!(map.heads.len(), 2);
        for h in &map.heads {
            for row in h.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-5);
            }
        }
        assert!(matches!(attention_map(&m, &[volume(0)], 2), Err(Error::Config(_))));
    }

    #[test]
    fn zero_query_gives_uniform_map() {
        let mut m = tiny();
        let id = m.params.find("encoder.blocks.0.attn.q.weight").unwrap();
        m.params.get_mut(id).data.iter_mut().for_each(|w| *w = 0.0);
        let qb = m.params.find("encoder.blocks.0.attn.q.bias").unwrap();
        m.params.get_mut(qb).data.iter_mut().for_each(|w| *w = 0.0);
        let map = attention_map(&m, &[volume(4)], 0).unwrap();
        for h in &map.heads {
            assert!(h.iter().all(|&p| (p - 1.0 / 8.0).abs() < 1e-12));
        }
    }

    #[test]
    fn identical_batch_equals_single_sample() {
        let m = tiny();
        let v = volume(5);
        let one = attention_map(&m, std::slice::from_ref(&v), 0).unwrap();
        let three = attention_map(&m, &[v.clone(), v.clone(), v], 0).unwrap();
        for (a, b) in one.heads.iter().zip(&three.heads) {
            assert!((a - b).iter().all(|d| d.abs() < 1e-12));
        }
    }

    fn perm_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (prop::collection::vec(0.0f64..1.0, 64), Just((0..8).collect::<Vec<usize>>()).prop_shuffle())
    }

    proptest! {
        #[test]
        fn row_permutation_keeps_ranking((vals, perm) in perm_strategy()) {
            let a = Array2::from_shape_vec((8, 8), vals).unwrap();
            let pa = a.select(Axis(0), &perm);
            let r1 = hub_patches(a.view(), [2, 2, 2], 8).unwrap();
            let r2 = hub_patches(pa.view(), [2, 2, 2], 8).unwrap();
            let p1: Vec<usize> = r1.hubs.iter().map(|h| h.patch).collect();
            let p2: Vec<usize> = r2.hubs.iter().map(|h| h.patch).collect();
            prop_assert_eq!(p1, p2);
        }

        #[test]
        fn joint_permutation_relabels_hubs((vals, perm) in perm_strategy()) {
            let a = Array2::from_shape_vec((8, 8), vals).unwrap();
            let pa = a.select(Axis(0), &perm).select(Axis(1), &perm);
            let r1 = hub_patches(a.view(), [2, 2, 2], 8).unwrap();
            let r2 = hub_patches(pa.view(), [2, 2, 2], 8).unwrap();
            // Column j of the permuted map is column perm[j] of the original.
            for (h1, h2) in r1.hubs.iter().zip(&r2.hubs) {
                prop_assert!((h1.score - h2.score).abs() < 1e-12);
            }
            for h in &r2.hubs {
                let orig = r1.hubs.iter().find(|x| x.patch == perm[h.patch]).unwrap();
                prop_assert!((orig.score - h.score).abs() < 1e-12);
            }
        }
    }
}
