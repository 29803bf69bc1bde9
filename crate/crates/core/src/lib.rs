//! Depth-aware panoptic segmentation primitives.
//!
//! Dynamic instance kernels are fused from position and kernel-weight
//! maps, run over shared embeddings to produce masks and per-instance
//! depth, and merged into a panoptic label map with a dense depth map.
//! The [`metrics`] module scores such predictions with PQ, depth-aware PQ
//! and RMSE; [`losses`] holds the depth training objective and its
//! analytic gradient.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod depth;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernel_fusion;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    segment_histogram, DepthMap, DepthScheme, EmbeddingMap, InstanceKernel, InstanceKind, KernelSet,
    PanopticLabelMap, Raster2D, SegmentInfo, SegmentRef,
};
