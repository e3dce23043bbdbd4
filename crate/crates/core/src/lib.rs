//! Masked denoising diffusion for unsupervised anomaly detection on
//! synthetic phantom images.
//!
//! The pipeline trains a small convolutional denoiser on healthy images
//! only, regularized by patch masking in pixel space (IPM), frequency
//! space (FPM), or a CutMix combination of both (FPM-CM). At inference
//! an unseen image is noised to a fixed timestep, reconstructed in one
//! shot, and scored per pixel by absolute reconstruction error.
//!
//! Module map:
//! - [`tensor`]: dense f32 tensors with reverse-mode autodiff and Adam
//! - [`spectral`]: 2D DFT/IDFT (radix-2 FFT plus direct summation)
//! - [`noise`]: multi-octave 2D simplex noise
//! - [`masking`]: patch sampling and the IPM / FPM / FPM-CM augmentations
//! - [`diffusion`]: noise schedules, forward process, training objective
//! - [`denoiser`]: time-conditioned U-Net and checkpoint format
//! - [`data`]: phantom generation, anomaly injection, on-disk tensor files
//! - [`eval`]: anomaly maps, post-processing, Dice and AUPRC

pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod eval;
pub mod masking;
pub mod noise;
pub mod seeds;
pub mod spectral;
pub mod tensor;
