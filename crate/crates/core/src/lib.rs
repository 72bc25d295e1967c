//! Tiled small-target detection for high-resolution frames.
//!
//! A frame is cut into overlapping patches ([`tiling`]), each patch is
//! contrast-stretched ([`enhance`]) and run through a pluggable detector
//! ([`detect`]), and the patch-level results are projected back and merged
//! ([`pipeline`]). Around that sit a precision/recall/AP harness ([`eval`]),
//! a seeded synthetic scene generator with exact annotations ([`synth`]),
//! box-exact augmentations ([`augment`]) and the command-line front end
//! ([`cli`]).

pub mod augment;
pub mod cli;
pub mod detect;
pub mod enhance;
pub mod eval;
mod format;
pub mod model;
pub mod overlay;
pub mod pipeline;
pub mod synth;
pub mod tiling;

pub use model::{
    clip_box, iou, load_manifest, save_manifest, BBox, DatasetManifest, Detection,
    GroundTruthBox, ImageBuffer, ManifestEntry,
};
