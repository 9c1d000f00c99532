//! The CS-CRL network, its MAE baseline wiring and the fine-tuning classifier.

mod block;
mod classifier;
mod config;
mod decoder;
mod encoder;
mod layers;
mod network;
mod params;
mod position;

pub use block::{BlockCache, TransformerBlock};
pub use classifier::Classifier;
pub use config::ModelConfig;
pub use decoder::{Decoder, DecoderCache};
pub use encoder::{Encoder, EncoderCache};
pub use layers::{gelu, gelu_grad, softmax_rows, Dropout, LayerNorm, LayerNormCache, Linear};
pub use network::{gram, reconstruct, AttentionMap, CsCrl, GramMatrix, LatentPair, ObjectiveSpec, PretrainOutput};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use position::{axis_block, position_encoding};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Copies every `dst` tensor accepted by `select` from the same-named tensor in `src`.
pub(crate) fn copy_matching<S: Scalar>(dst: &mut ParamStore<S>, src: &ParamStore<S>, select: impl Fn(&str) -> bool) -> Result<()> {
    for p in dst.iter_mut().filter(|p| select(&p.name)) {
        let id = src
            .find(&p.name)
            .ok_or_else(|| Error::Schema(format!("missing tensor {}", p.name)))?;
        let s = src.get(id);
        if s.shape != p.shape {
            return Err(Error::Schema(format!(
                "tensor {} has shape {:?}, expected {:?}",
                p.name, s.shape, p.shape
            )));
        }
        p.data.clone_from(&s.data);
    }
    Ok(())
}

/// Read access to an encoder for full-sequence diagnostics.
pub trait EncoderModel<S: Scalar>: Sync {
    fn config(&self) -> &ModelConfig;
    fn tokens(&self, volume: &crate::data::VolumeGrid) -> Result<crate::data::TokenSequence<S>>;
    fn encode_full(&self, tokens: &crate::data::TokenSequence<S>) -> Result<EncoderCache<S>>;
}

impl<S: Scalar> EncoderModel<S> for CsCrl<S> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn tokens(&self, volume: &crate::data::VolumeGrid) -> Result<crate::data::TokenSequence<S>> {
        CsCrl::tokens(self, volume)
    }

    fn encode_full(&self, tokens: &crate::data::TokenSequence<S>) -> Result<EncoderCache<S>> {
        CsCrl::encode_full(self, tokens)
    }
}

impl<S: Scalar> EncoderModel<S> for Classifier<S> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn tokens(&self, volume: &crate::data::VolumeGrid) -> Result<crate::data::TokenSequence<S>> {
        Classifier::tokens(self, volume)
    }

    fn encode_full(&self, tokens: &crate::data::TokenSequence<S>) -> Result<EncoderCache<S>> {
        Classifier::encode_full(self, tokens)
    }
}
