//! Pixel-wise individual identification from hyperspectral image cubes.
//!
//! The crate covers the full experiment pipeline: cube and annotation I/O,
//! spatial denoising, the three spectral input representations (full spectrum,
//! PCA compression, synthesized RGB), a from-scratch MLP classifier with the
//! Adam optimizer and a step-decay schedule, stratified image-disjoint split
//! construction, evaluation, and figure-artifact rendering. A seeded synthetic
//! scene generator makes the whole pipeline verifiable at desk scale.

pub mod cube;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod mlp;
pub mod preprocess;
pub mod transforms;

pub use cube::{AnnotationSet, BandImage, BoundingBox, CubeHeader, HsCube};
pub use dataset::{SplitKind, SplitPlan, SplitTargets, SynthConfig};
pub use error::{Error, Result};
pub use eval::{EvalReport, RegionRule, SpectraSummary};
pub use mlp::{AdamState, Checkpoint, Mlp, TrainConfig, TrainOutcome};
pub use preprocess::SpectralSample;
pub use transforms::{ColorTables, InputMode, PcaModel, TransformState};

/// Derives a subsystem seed from a root seed and a purpose tag (FNV-1a fold).
///
/// Every source of randomness in the pipeline (split sampling, weight init,
/// shuffling, dropout, scene generation) draws from its own derived seed so
/// subsystems stay independently reproducible.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ root;
    for byte in tag.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h ^= root.rotate_left(17);
    h.wrapping_mul(0x1000_0000_01b3)
}
