//! Training-time input transformations: CutMix mixing, AugMix chains,
//! phase randomization, overlay blending, and texture/noise dataset
//! generation. Every operation is a pure function of (input, rng).

pub mod augmix;
pub mod cutmix;
pub mod phase;
pub mod texture_noise;
pub mod transforms;

pub use augmix::{augmix, AugmentedTriple, AugmixConfig};
pub use cutmix::{cutmix, cutmix_with_lambda, sample_cutmix_mask, BoxCoords, MixedSample};
pub use phase::{blend, phase_randomize};
pub use texture_noise::{
    generate_texture_noise_dataset, load_overlay_pool, Manifest, ManifestEntry, PairChecks,
    PairStatus,
};
pub use transforms::{primitive_transform, TransformKind};
