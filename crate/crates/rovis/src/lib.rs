//! Online video instance segmentation with track queries.
//!
//! The crate contains a self-contained f64 reverse-mode autodiff core, a
//! miniature query-based segmentation model (conv backbone, multi-scale pixel
//! decoder, masked cross-attention decoder with per-layer class/mask heads),
//! bipartite matching and point-sampled mask losses, a two-frame training
//! loop with track-query augmentation, an online tracker with two-stage NMS,
//! volumetric-IoU AP evaluation, and a synthetic moving-shapes data
//! generator with on-disk dataset formats. The `rovis` binary exposes the
//! gen-data / train / infer / eval pipeline.

pub mod data;
pub mod error;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod track;
pub mod train;

pub use error::{Error, Result};
