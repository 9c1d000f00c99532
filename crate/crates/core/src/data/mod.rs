//! Volume containers, patch and mask geometry, synthetic data and dataset ingestion.

mod codec;
mod manifest;
mod mask;
mod synthetic;
mod tokens;
mod volume;

pub use codec::{decode_volume, encode_volume, read_volume, write_volume, VOLUME_MAGIC, VOLUME_VERSION};
pub use manifest::{load_manifest, DatasetIndex, IndexEntry, Split};
pub use mask::{masked_count, sample_mask, split_tokens, MaskPartition};
pub use synthetic::{generate_synthetic, psd_cholesky, region_means, SyntheticConfig, SyntheticDataset};
pub use tokens::{grid_coords, patch_grid, patchify, unpatchify, TokenSequence};
pub use volume::VolumeGrid;
