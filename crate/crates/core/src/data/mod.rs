//! Annotation ingestion, ground-truth density generation, augmentation, ROI
//! masking, dataset splits and synthetic scenes.

pub mod annotations;
pub mod augment;
pub mod density;
pub mod image;
pub mod roi;
pub mod splits;
pub mod synth;

pub use annotations::{load_annotations, CrowdSample, HeadAnnotations, LoadedSample, Sidecar};
pub use augment::{augment, cap_longest_side, horizontal_mirror, random_crop, scale_sample, AugmentationConfig};
pub use density::{downsample_density, generate_density_map, ground_truth_at_scale, read_raw, write_raw, DensityMap, DEFAULT_SIGMA};
pub use roi::{apply_roi_mask, RoiMask};
pub use splits::{kfold_splits, Fold};
pub use synth::{synthesize_scene, DensityProfile};
