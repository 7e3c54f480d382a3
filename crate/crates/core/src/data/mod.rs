//! Samples, annotations, synthetic scenes, augmentations and dataset files.

pub mod augment;
pub mod io;
pub mod synth;
pub mod types;

pub use augment::{
    corrupt_masks, default_min_mask_area, filter_small_masks, horizontal_flip, jitter_box,
    normalize_depth, sample_pretrain_target,
};
pub use io::{load_dataset, load_rgbd_sample, read_manifest, write_manifest, ManifestEntry};
pub use synth::{generate_synthetic_scene, SceneConfig};
pub use types::{
    flip_mask, mask_area, tight_box, BoxPrompt, Mask, PlaneAnnotation, PseudoLabelSet, RgbdSample,
    NON_PLANE_ID_BASE,
};
