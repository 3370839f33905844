//! File formats: images, masks, manifests, the binary container, and the synthetic dataset generator.

pub mod container;
pub mod manifest;
pub mod patches;
pub mod pnm;
pub mod synth;

pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestRecord};
pub use pnm::{decode_image, decode_mask, decode_p6, decode_pfm, encode_mask, encode_p6_gamma, encode_pfm};
pub use synth::{generate_scene, generate_synthetic, SyntheticScene, SyntheticSceneSpec};
