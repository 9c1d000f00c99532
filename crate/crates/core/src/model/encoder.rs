use ndarray::{Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::block::{backward_blocks, run_blocks, BlockCache, TransformerBlock};
use super::config::ModelConfig;
use super::layers::{Dropout, LayerNorm, LayerNormCache, Linear};
use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Patch embedding, transformer stack and final layer-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<S> {
    tokens: Array2<S>,
    pub blocks: Vec<BlockCache<S>>,
    pre_norm: Array2<S>,
    norm: LayerNormCache<S>,
    /// Final latent, one row per input token.
    pub output: Array2<S>,
}

impl<S: Scalar> EncoderCache<S> {
    /// Output of block `i` (before the final layer-norm for the last block).
    pub fn block_output(&self, i: usize) -> &Array2<S> {
        match self.blocks.get(i + 1) {
            Some(next) => &next.input,
            None => &self.pre_norm,
        }
    }
}

impl Encoder {
    pub(crate) fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let patch_embed = Linear::new(store, "encoder.patch_embed", cfg.token_len(), cfg.encoder_dim, 0, rng);
        let blocks = (0..cfg.encoder_depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("encoder.blocks.{i}"),
                    cfg.encoder_dim,
                    cfg.encoder_heads,
                    cfg.mlp_ratio,
                    i + 1,
                    rng,
                )
            })
            .collect();
        let norm = LayerNorm::new(store, "encoder.norm", cfg.encoder_dim, cfg.top_group());
        Self {
            patch_embed,
            blocks,
            norm,
        }
    }

    /// Affine map of each token to the encoder width.
    pub fn embed<S: Scalar>(&self, store: &ParamStore<S>, tokens: ArrayView2<S>) -> Result<Array2<S>> {
        if tokens.ncols() != self.patch_embed.fan_in {
            return Err(Error::Contract(format!(
                "token length {} does not match embedding width {}",
                tokens.ncols(),
                self.patch_embed.fan_in
            )));
        }
        Ok(self.patch_embed.forward(store, tokens))
    }

    /// Embeds `tokens`, adds the position rows at `indices`, runs the blocks and the final norm.
    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        pos: &Array2<S>,
        tokens: ArrayView2<S>,
        indices: &[usize],
        dropout: &mut Dropout<'_>,
    ) -> Result<EncoderCache<S>> {
        if indices.len() != tokens.nrows() {
            return Err(Error::Contract(format!(
                "{} tokens but {} position indices",
                tokens.nrows(),
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= pos.nrows()) {
            return Err(Error::Contract(format!("token index {bad} outside the {}-token grid", pos.nrows())));
        }
        let mut x = self.embed(store, tokens)?;
        x += &pos.select(Axis(0), indices);
        let (pre_norm, blocks) = run_blocks(&self.blocks, store, x, dropout, "encoder")?;
        let (output, norm) = self.norm.forward(store, pre_norm.view());
        Ok(EncoderCache {
            tokens: tokens.to_owned(),
            blocks,
            pre_norm,
            norm,
            output,
        })
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cache: &EncoderCache<S>,
        dout: ArrayView2<S>,
        grads: &mut Gradients<S>,
    ) {
        let dpre = self.norm.backward(store, &cache.norm, dout, grads);
        let dx = backward_blocks(&self.blocks, store, &cache.blocks, dpre, grads);
        self.patch_embed.backward(store, cache.tokens.view(), dx.view(), grads);
    }
}
