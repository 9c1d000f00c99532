use serde::{Deserialize, Serialize};

use crate::data::patch_grid;
use crate::error::{Error, Result};
use crate::objective::Mode;

/// Network geometry and widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub volume_dims: [usize; 3],
    pub channels: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub mode: Mode,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// 50^3 volumes, 10^3 patches, 1000-wide 12-block encoder, 600-wide 4-block decoder.
    /// The encoder uses 10 heads because 1000 does not split evenly into 12.
    pub fn paper() -> Self {
        Self {
            volume_dims: [50, 50, 50],
            channels: 1,
            patch_size: 10,
            encoder_dim: 1000,
            encoder_depth: 12,
            encoder_heads: 10,
            decoder_dim: 600,
            decoder_depth: 4,
            decoder_heads: 6,
            mlp_ratio: 4,
            dropout: 0.0,
            mode: Mode::Cscrl,
            num_classes: 2,
        }
    }

    /// 20^3 volumes with a 32-wide 2-block encoder and a 24-wide 1-block decoder.
    pub fn tiny() -> Self {
        Self {
            volume_dims: [20, 20, 20],
            encoder_dim: 32,
            encoder_depth: 2,
            encoder_heads: 2,
            decoder_dim: 24,
            decoder_depth: 1,
            decoder_heads: 2,
            ..Self::paper()
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 {
            return fail("channels must be at least 1".into());
        }
        patch_grid(self.volume_dims, self.patch_size).map_err(|e| Error::Config(e.to_string()))?;
        for (name, dim, heads) in [
            ("encoder", self.encoder_dim, self.encoder_heads),
            ("decoder", self.decoder_dim, self.decoder_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return fail(format!("{name}_dim {dim} is not divisible by {name}_heads {heads}"));
            }
            if dim < 6 {
                return fail(format!("{name}_dim {dim} is below the 6 needed for 3D positions"));
            }
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return fail("encoder and decoder need at least one block".into());
        }
        if self.mlp_ratio < 1 {
            return fail("mlp_ratio must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        Ok(())
    }

    pub fn grid(&self) -> [usize; 3] {
        let p = self.patch_size.max(1);
        [
            self.volume_dims[0] / p,
            self.volume_dims[1] / p,
            self.volume_dims[2] / p,
        ]
    }

    pub fn num_tokens(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn token_len(&self) -> usize {
        self.patch_size.pow(3) * self.channels
    }

    /// Layer group of the projectors, decoder and heads.
    pub fn top_group(&self) -> usize {
        self.encoder_depth + 1
    }
}
