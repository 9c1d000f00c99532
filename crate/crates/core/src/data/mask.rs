use ndarray::Array2;
use rand::seq::SliceRandom;

use super::tokens::TokenSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

/// A visible/masked split of `N` token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPartition {
    pub ratio: f64,
    /// Ascending.
    pub visible_idx: Vec<usize>,
    /// Ascending.
    pub masked_idx: Vec<usize>,
    pub seed: u64,
}

impl MaskPartition {
    pub fn token_count(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    /// Builds a partition from explicit visible indices (the rest are masked).
    pub fn from_visible(n: usize, visible: &[usize]) -> Result<Self> {
        let mut is_visible = vec![false; n];
        for &i in visible {
            if i >= n {
                return Err(Error::Geometry(format!("visible index {i} out of range for {n} tokens")));
            }
            if is_visible[i] {
                return Err(Error::Geometry(format!("visible index {i} repeated")));
            }
            is_visible[i] = true;
        }
        let visible_idx: Vec<usize> = (0..n).filter(|&i| is_visible[i]).collect();
        let masked_idx: Vec<usize> = (0..n).filter(|&i| !is_visible[i]).collect();
        if visible_idx.is_empty() || masked_idx.is_empty() {
            return Err(Error::DegenerateMask {
                n,
                ratio: masked_idx.len() as f64 / n.max(1) as f64,
                visible: visible_idx.len(),
                masked: masked_idx.len(),
            });
        }
        Ok(Self {
            ratio: masked_idx.len() as f64 / n as f64,
            visible_idx,
            masked_idx,
            seed: 0,
        })
    }
}

/// Number of masked tokens for `n` tokens at ratio `m`: `floor(n * m)`.
pub fn masked_count(n: usize, m: f64) -> usize {
    // Guard against 0.76 * 125 = 94.99999... style rounding below an integer.
    let raw = n as f64 * m;
    let nearest = raw.round();
    if (raw - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        raw.floor() as usize
    }
}

/// Uniformly random split with `floor(N * m)` masked tokens, deterministic in `seed`.
pub fn sample_mask(n: usize, m: f64, seed: u64) -> Result<MaskPartition> {
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::Config(format!("mask ratio must lie in (0, 1), got {m}")));
    }
    let masked = masked_count(n, m);
    let visible = n.saturating_sub(masked);
    if n < 2 || masked == 0 || visible == 0 {
        return Err(Error::DegenerateMask {
            n,
            ratio: m,
            visible,
            masked,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut visible_idx = order[..visible].to_vec();
    let mut masked_idx = order[visible..].to_vec();
    visible_idx.sort_unstable();
    masked_idx.sort_unstable();
    Ok(MaskPartition {
        ratio: m,
        visible_idx,
        masked_idx,
        seed,
    })
}

fn gather<S: Scalar>(tokens: &TokenSequence<S>, idx: &[usize]) -> Result<TokenSequence<S>> {
    let mut data = Array2::<S>::zeros((idx.len(), tokens.token_len()));
    for (r, &i) in idx.iter().enumerate() {
        if i >= tokens.count() {
            return Err(Error::Geometry(format!(
                "token index {i} out of range for {} tokens",
                tokens.count()
            )));
        }
        data.row_mut(r).assign(&tokens.data.row(i));
    }
    Ok(TokenSequence {
        data,
        indices: idx.iter().map(|&i| tokens.indices[i]).collect(),
        grid: tokens.grid,
        patch_size: tokens.patch_size,
        channels: tokens.channels,
    })
}

/// Splits a full sequence into (visible, masked targets), both ascending by original index.
pub fn split_tokens<S: Scalar>(
    tokens: &TokenSequence<S>,
    part: &MaskPartition,
) -> Result<(TokenSequence<S>, TokenSequence<S>)> {
    if part.token_count() != tokens.count() {
        return Err(Error::Geometry(format!(
            "partition covers {} tokens but sequence has {}",
            part.token_count(),
            tokens.count()
        )));
    }
    Ok((gather(tokens, &part.visible_idx)?, gather(tokens, &part.masked_idx)?))
}
