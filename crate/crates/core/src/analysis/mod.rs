//! Post-hoc diagnostics over trained encoders: attention maps and hub
//! patches, per-block feature variance and Fourier profiles, loss landscapes,
//! and reconstruction dumps. Each result has a CSV writer in [`report`].

mod attention;
mod features;
mod landscape;
mod reconstruct;
pub mod report;
mod spectrum;

pub use attention::{attention_map, hub_patches, Hub, HubReport};
pub use features::{feature_variance, population_variance, VarianceProfile};
pub use landscape::{
    filter_normalized_direction, loss_landscape, perturb, regularized_nll, tokenize_split, Direction, LandscapeSpec,
    LossSurface,
};
pub use reconstruct::{
    dump_reconstructions, masked_region_mse, reconstruct_volume, ReconstructionDump, ReconstructionRecord,
};
pub use spectrum::{bin_spectrum, fourier_profile, map_spectrum, mean_amplitude, BlockSpectrum, SpectralProfile, AMPLITUDE_FLOOR};
