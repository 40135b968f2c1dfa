//! Semi-supervised volumetric segmentation by multi-planar co-training.
//!
//! A volume is cut into sagittal, coronal and axial slice stacks, one 2D
//! segmenter is trained per plane, and the three per-plane hard predictions
//! are fused voxelwise (two-plane agreement, else the most confident plane)
//! into pseudo-labels for unlabeled volumes. Students are then retrained on
//! the union of manual and pseudo-labeled data.
//!
//! Module map:
//! - [`volume`]: containers, Hounsfield windowing, DMPV/DMPL file formats.
//! - [`planar`]: slicing along the three planes and stacking back.
//! - [`backbone`]: the pluggable 2D segmenter interface and the reference
//!   softmax segmenter trained by SGD.
//! - [`fusion`]: the voxelwise multi-planar fusion rule.
//! - [`cotrain`]: teacher/student loop plus the supervised and single-plane
//!   baselines.
//! - [`metrics`]: Dice, aggregation and the Wilcoxon signed-rank test.
//! - [`phantom`]: seeded synthetic phantom volumes.
//! - [`config`], [`report`], [`runio`]: experiment configuration, report
//!   emission and run-directory persistence used by the CLI.

pub mod backbone;
pub mod config;
pub mod cotrain;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod phantom;
pub mod planar;
pub mod report;
pub mod runio;
pub mod seed;
pub mod volume;

pub use error::{Error, Result};
pub use planar::Plane;
pub use volume::{ChannelizedSlice, LabelMask, Volume, WindowSpec};
