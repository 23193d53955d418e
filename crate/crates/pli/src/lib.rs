//! Desk-scale 3D polarized light imaging (3D-PLI) analysis pipeline.
//!
//! The crate covers the whole path from a synthetic hippocampus-like phantom to
//! subfield-style cluster maps: sinusoidal light profiles are fitted into
//! parameter maps, a small convolutional encoder is trained with a contrastive
//! objective on spatially adjacent patch pairs, features are sampled along a
//! layered surface mesh, reduced with confound regression and PCA, and finally
//! clustered and scored against ground-truth band labels.
//!
//! Each capability has a runnable example:
//!
//! | Example | What it shows |
//! |---------|---------------|
//! | `phantom_truth` | generate a phantom volume, its label bands and surfaces |
//! | `fit_profiles` | render a measurement stack and recover parameter maps |
//! | `train_encoder` | contrastive training of the texture encoder |
//! | `feature_maps` | sliding-window feature inference over sections |
//! | `baseline_features` | fractional anisotropy + mean transmittance maps |
//! | `surface_sampling` | depth sampling, smoothing and unfolded rasters |
//! | `reduce_features` | confound regression and PCA on vertex features |
//! | `cluster_metrics` | k-means plus purity/ARI/mutual-information scoring |
//! | `full_pipeline` | the end-to-end experiment on a small phantom |
//!
//! Run one with `cargo run -p pli --example phantom_truth`. The same stages are
//! reachable as subcommands of the `pli` binary for scripted runs.

pub mod baseline;
pub mod cluster;
pub mod config;
pub mod error;
pub mod featmap;
pub mod mesh;
pub mod phantom;
pub mod pipeline;
pub mod reduce;
mod rng;
pub mod signal;
pub mod ssl;
pub mod surface;
pub mod tensor_io;

pub use error::{Error, Result};
