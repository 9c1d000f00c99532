use ndarray::{Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::block::{backward_blocks, run_blocks, BlockCache, TransformerBlock};
use super::config::ModelConfig;
use super::layers::{Dropout, LayerNorm, LayerNormCache, Linear, INIT_STD};
use super::params::{Gradients, ParamId, ParamStore};
use crate::data::MaskPartition;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shared decoder: mask-token fill, position rows, blocks, norm and pixel head.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub mask_token: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<S> {
    pub blocks: Vec<BlockCache<S>>,
    norm: LayerNormCache<S>,
    normed: Array2<S>,
}

impl Decoder {
    pub(crate) fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let group = cfg.top_group();
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let token = (0..cfg.decoder_dim).map(|_| S::c(normal.sample(rng))).collect();
        let mask_token = store.add("decoder.mask_token", vec![cfg.decoder_dim], token, group);
        let blocks = (0..cfg.decoder_depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("decoder.blocks.{i}"),
                    cfg.decoder_dim,
                    cfg.decoder_heads,
                    cfg.mlp_ratio,
                    group,
                    rng,
                )
            })
            .collect();
        let norm = LayerNorm::new(store, "decoder.norm", cfg.decoder_dim, group);
        let head = Linear::new(store, "decoder.head", cfg.decoder_dim, cfg.token_len(), group, rng);
        Self {
            mask_token,
            blocks,
            norm,
            head,
            dim: cfg.decoder_dim,
        }
    }

    /// Full-length sequence with `z` at the visible positions and the mask token elsewhere.
    pub fn assemble<S: Scalar>(&self, store: &ParamStore<S>, z: ArrayView2<S>, part: &MaskPartition) -> Result<Array2<S>> {
        if z.nrows() != part.visible_idx.len() || z.ncols() != self.dim {
            return Err(Error::Contract(format!(
                "decoder input {:?} does not match {} visible tokens of width {}",
                z.dim(),
                part.visible_idx.len(),
                self.dim
            )));
        }
        let mut full = Array2::<S>::zeros((part.token_count(), self.dim));
        for (row, &i) in z.rows().into_iter().zip(&part.visible_idx) {
            full.row_mut(i).assign(&row);
        }
        let token = store.view1(self.mask_token);
        for &i in &part.masked_idx {
            full.row_mut(i).assign(&token);
        }
        Ok(full)
    }

    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        pos: &Array2<S>,
        z: ArrayView2<S>,
        part: &MaskPartition,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Array2<S>, DecoderCache<S>)> {
        if part.token_count() != pos.nrows() {
            return Err(Error::Contract(format!(
                "partition covers {} tokens, decoder grid has {}",
                part.token_count(),
                pos.nrows()
            )));
        }
        let mut x = self.assemble(store, z, part)?;
        x += pos;
        let (h, blocks) = run_blocks(&self.blocks, store, x, dropout, "decoder")?;
        let (normed, norm) = self.norm.forward(store, h.view());
        let y = self.head.forward(store, normed.view());
        Ok((y, DecoderCache { blocks, norm, normed }))
    }

    /// Returns the gradient with respect to the visible-token input `z`.
    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cache: &DecoderCache<S>,
        dy: ArrayView2<S>,
        part: &MaskPartition,
        grads: &mut Gradients<S>,
    ) -> Array2<S> {
        let dnormed = self.head.backward(store, cache.normed.view(), dy, grads);
        let dh = self.norm.backward(store, &cache.norm, dnormed.view(), grads);
        let dx = backward_blocks(&self.blocks, store, &cache.blocks, dh, grads);
        {
            let mut gt = grads.view1_mut(self.mask_token);
            gt += &dx.select(Axis(0), &part.masked_idx).sum_axis(Axis(0));
        }
        dx.select(Axis(0), &part.visible_idx)
    }
}
