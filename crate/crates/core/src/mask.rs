//! Dynamic-kernel mask generation, redundant-instance filtering and the
//! arg-max merge into a non-overlapping panoptic map.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::types::{EmbeddingMap, KernelSet, PanopticLabelMap, Raster2D, SegmentInfo, SegmentRef};

/// Binarization threshold for area and overlap tests.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscardConfig {
    pub score_threshold: f64,
    pub overlap_threshold: f64,
    pub min_stuff_area: usize,
}

impl Default for DiscardConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.4,
            overlap_threshold: 0.5,
            min_stuff_area: 0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(<kernel, E(x)>)` at every pixel: a 1x1 dynamic convolution.
pub fn sigmoid_conv(kernel: &[f64], emb: &EmbeddingMap) -> Result<Raster2D<f64>> {
    if kernel.len() != emb.channels() {
        return Err(Error::dim(format!(
            "kernel length {} vs embedding channels {}",
            kernel.len(),
            emb.channels()
        )));
    }
    let values = emb
        .pixels()
        .map(|px| sigmoid(px.iter().zip(kernel).map(|(e, k)| e * k).sum()))
        .collect();
    Raster2D::new(emb.height(), emb.width(), values)
}

/// One soft mask per instance.
pub fn generate_soft_masks(kernels: &KernelSet, emb: &EmbeddingMap) -> Result<Vec<Raster2D<f64>>> {
    if kernels.mask_dim() != emb.channels() {
        return Err(Error::dim(format!(
            "mask kernel length {} vs embedding channels {}",
            kernels.mask_dim(),
            emb.channels()
        )));
    }
    kernels.instances().iter().map(|k| sigmoid_conv(&k.mask, emb)).collect()
}

/// Indices (ascending) of the instances that survive filtering.
pub fn discard_redundant(
    masks: &[Raster2D<f64>],
    kernels: &KernelSet,
    cfg: &DiscardConfig,
) -> Result<Vec<usize>> {
    if masks.len() != kernels.len() {
        return Err(Error::dim(format!("{} masks for {} kernels", masks.len(), kernels.len())));
    }
    for m in masks.iter().skip(1) {
        masks[0].check_dims(m, "soft masks")?;
    }
    let inst = kernels.instances();
    let mut candidates: Vec<usize> = (0..inst.len())
        .filter(|i| inst[*i].score >= cfg.score_threshold)
        .collect();
    candidates.sort_by(|a, b| inst[*b].score.total_cmp(&inst[*a].score).then(a.cmp(b)));

    let mut kept = Vec::new();
    let mut claimed = vec![false; masks.first().map_or(0, |m| m.len())];
    for &i in &candidates {
        let soft = masks[i].values();
        if inst[i].is_thing {
            let mut area = 0usize;
            let mut free = 0usize;
            for (v, c) in soft.iter().zip(&claimed) {
                if *v > BINARIZE_THRESHOLD {
                    area += 1;
                    free += usize::from(!*c);
                }
            }
            if area == 0 || (free as f64) < cfg.overlap_threshold * area as f64 {
                continue;
            }
            for (v, c) in soft.iter().zip(claimed.iter_mut()) {
                if *v > BINARIZE_THRESHOLD {
                    *c = true;
                }
            }
            kept.push(i);
        } else {
            let area = soft.iter().filter(|v| **v > BINARIZE_THRESHOLD).count();
            if area >= cfg.min_stuff_area {
                kept.push(i);
            }
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Merge output: the panoptic map plus which instance became which segment.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeResult {
    pub panoptic: PanopticLabelMap,
    /// `(instance index, segment)` for every kept instance, in kept order.
    pub instance_segments: Vec<(usize, SegmentRef)>,
}

impl MergeResult {
    pub fn segment_to_instance(&self) -> HashMap<SegmentRef, usize> {
        self.instance_segments.iter().map(|(i, s)| (*s, *i)).collect()
    }
}

/// Assigns each pixel to the kept instance with the largest soft-mask
/// value; exact ties go to the earlier entry of `kept`.
///
/// Thing segments are numbered from 1 per class in kept order. The first
/// stuff instance of a class gets instance id 0; further stuff instances of
/// the same class take the next free id and are still flagged as stuff in
/// the segment table.
pub fn merge_panoptic(masks: &[Raster2D<f64>], kernels: &KernelSet, kept: &[usize]) -> Result<MergeResult> {
    if kept.is_empty() {
        return Err(Error::NoInstances);
    }
    if masks.len() != kernels.len() {
        return Err(Error::dim(format!("{} masks for {} kernels", masks.len(), kernels.len())));
    }
    if let Some(bad) = kept.iter().find(|i| **i >= masks.len()) {
        return Err(Error::dim(format!("kept index {bad} out of range")));
    }
    let first = &masks[kept[0]];
    for &i in kept {
        first.check_dims(&masks[i], "soft masks")?;
    }

    let mut next_id: HashMap<u16, u32> = HashMap::new();
    let mut stuff_used: HashMap<u16, ()> = HashMap::new();
    let mut segments = Vec::with_capacity(kept.len());
    let mut instance_segments = Vec::with_capacity(kept.len());
    for &i in kept {
        let k = kernels.get(i);
        let class = k.category();
        let inst_id = if !k.is_thing && stuff_used.insert(class, ()).is_none() {
            0
        } else {
            let n = next_id.entry(class).or_insert(0);
            *n += 1;
            *n
        };
        if inst_id > u16::MAX as u32 {
            return Err(Error::Domain(format!("too many instances of class {class}")));
        }
        let id = SegmentRef::new(class, inst_id as u16);
        segments.push(SegmentInfo {
            id,
            is_thing: k.is_thing,
        });
        instance_segments.push((i, id));
    }

    let labels: Vec<SegmentRef> = (0..first.len())
        .map(|p| {
            let mut best = 0;
            let mut best_v = masks[kept[0]].values()[p];
            for (slot, &i) in kept.iter().enumerate().skip(1) {
                let v = masks[i].values()[p];
                if v > best_v {
                    best = slot;
                    best_v = v;
                }
            }
            segments[best].id
        })
        .collect();
    let labels = Raster2D::new(first.height(), first.width(), labels)?;
    Ok(MergeResult {
        panoptic: PanopticLabelMap::new(labels, segments)?,
        instance_segments,
    })
}
