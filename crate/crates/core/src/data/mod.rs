//! Synthetic scenes, their on-disk format, and training-target encoding.

pub mod gaussian;
pub mod io;
pub mod mask;
pub mod synth;
pub mod targets;

pub use gaussian::{gaussian_radius, owned_regions, render_center_heatmap, AssignedThing};
pub use mask::{BBox, LabelMap, Mask, Rle};
pub use synth::{generate_sample, DataConfig, InstanceAnnotation, PanopticSample};
pub use targets::{assign_stage, build_targets, render_stuff_target, SampleTargets, StageTargets, TargetSpec};
