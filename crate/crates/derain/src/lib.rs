//! Channel-wise conditional-variational single-image deraining.
//!
//! The crate trains one small conditional variational autoencoder per color
//! channel, guided by a per-channel rain-density estimator, and derains by
//! averaging decoder samples drawn from a learned prior. A synthetic rain
//! generator supplies paired data at desk scale.
//!
//! The `derain` binary wraps the full pipeline (`synth`, `train`, `derain`,
//! `eval`, `check`); each capability also has a runnable example:
//!
//! - `cargo run --example synthesize_dataset`: rain synthesis and manifests
//! - `cargo run --example train_tiny`: the training API and its logs
//! - `cargo run --example derain_image`: end-to-end restoration
//! - `cargo run --example evaluate_metrics`: PSNR, SSIM, CED, bright pixels
//! - `cargo run --example bright_channel_prior`: why removal is channel-wise
//! - `cargo run --example sample_count_sweep`: quality vs latent sample budget
//! - `cargo run --example gradient_check`: autodiff vs finite differences
//! - `cargo run --example kl_monte_carlo`: closed-form KL vs sampling

pub mod checkpoint;
pub mod error;
pub mod image;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod selfcheck;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use image::{load_image, save_image, ImageTensor, PatchSpec};
pub use synth::{
    build_dataset, density_ground_truth, load_manifest, synthesize_rain, synthetic_clean_image,
    DatasetManifest, RainParams,
};
