//! Synthetic data, image I/O and evaluation metrics.

pub mod io;
mod metrics;
mod synth;

pub use metrics::{psnr, region_metrics, ssim, MetricsReport, SSIM_C1, SSIM_C2, SSIM_WINDOW};
pub use synth::{
    synth_dataset, synth_shadow_sample, synth_shadow_sample_with, ShadowSample, SynthOptions,
    MASK_RETRIES, MAX_COVERAGE, MIN_COVERAGE, PENUMBRA,
};
