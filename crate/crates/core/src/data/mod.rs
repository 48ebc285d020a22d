//! Image I/O, manifests, stratified splitting and the synthetic dataset generator.

pub mod image;
pub mod manifest;
pub mod split;
pub mod synth;

pub use image::{decode_image, encode_png, encode_pnm, write_image, ycbcr_to_rgb, RasterImage};
pub use manifest::{class_counts, reference_fixture_manifest, DatasetManifest, ManifestEntry, REFERENCE_CLASSES};
pub use split::{stratified_split, Splits};
pub use synth::{synth_generate, synth_in_memory, reference_profile, ClassShape, ShapeKind, SynthSpec};
