//! Attention-distance statistics, radial Fourier spectra and FLOPs
//! accounting.

mod distance;
mod flops;
mod spectrum;

pub use distance::{attention_distance, distance_survey, AttentionMapSource, AttentionMaps, DistanceStats};
pub use flops::{flops_report, ComponentCount, FlopsReport, FLOPS_CONVENTION};
pub use spectrum::{
    centered_log_magnitude, radial_bin_index, radial_spectrum, radial_spectrum_batch, radial_spectrum_with_bins,
    SpectrumProfile, MAX_RADIUS, SPECTRUM_BINS,
};
