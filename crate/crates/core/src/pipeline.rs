//! Kernels to a depth-aware panoptic prediction.

use crate::depth::{aggregate_depth, instance_depths, DepthDecoder, InstanceDepth, DEFAULT_D_MAX};
use crate::error::{Error, Result};
use crate::io::Bundle;
use crate::kernel_fusion::{cosine_dedup, DEFAULT_DEDUP_THRESHOLD};
use crate::mask::{discard_redundant, generate_soft_masks, merge_panoptic, DiscardConfig, MergeResult};
use crate::types::{DepthMap, KernelSet, PanopticLabelMap};

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    /// `None` skips deduplication.
    pub dedup_threshold: Option<f64>,
    pub discard: DiscardConfig,
    pub decoder: DepthDecoder,
    pub d_max: f64,
    /// Keep the best-scoring instance when filtering removes everything.
    pub keep_best_if_empty: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            dedup_threshold: Some(DEFAULT_DEDUP_THRESHOLD),
            discard: DiscardConfig::default(),
            decoder: DepthDecoder::T2,
            d_max: DEFAULT_D_MAX,
            keep_best_if_empty: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    /// Kernels after deduplication.
    pub kernels: KernelSet,
    pub kept: Vec<usize>,
    pub merge: MergeResult,
    pub instance_depths: Vec<InstanceDepth>,
    pub depth: DepthMap,
}

impl Inference {
    pub fn panoptic(&self) -> &PanopticLabelMap {
        &self.merge.panoptic
    }
}

pub fn run_inference(bundle: &Bundle, cfg: &InferenceConfig) -> Result<Inference> {
    if bundle.kernels.is_empty() {
        return Err(Error::NoInstances);
    }
    if cfg.decoder.scheme() != bundle.scheme {
        return Err(Error::validation(
            "decoder",
            format!("{:?} decoder needs {:?} kernels, bundle has {:?}", cfg.decoder, cfg.decoder.scheme(), bundle.scheme),
        ));
    }
    let kernels = match cfg.dedup_threshold {
        Some(t) => cosine_dedup(&bundle.kernels, t)?,
        None => bundle.kernels.clone(),
    };
    let masks = generate_soft_masks(&kernels, &bundle.mask_embedding)?;
    let mut kept = discard_redundant(&masks, &kernels, &cfg.discard)?;
    if kept.is_empty() && cfg.keep_best_if_empty {
        let best = (0..kernels.len())
            .max_by(|a, b| kernels.get(*a).score.total_cmp(&kernels.get(*b).score).then(b.cmp(a)))
            .expect("non-empty");
        kept.push(best);
    }
    let merge = merge_panoptic(&masks, &kernels, &kept)?;
    let instance_depths = instance_depths(&kernels, &bundle.depth_embedding, cfg.decoder, cfg.d_max)?;
    let rasters: Vec<_> = instance_depths.iter().map(|d| d.depth.clone()).collect();
    let depth = aggregate_depth(&rasters, &merge.panoptic, &merge.segment_to_instance())?;
    Ok(Inference {
        kernels,
        kept,
        merge,
        instance_depths,
        depth,
    })
}
