//! Position selection, adaptive kernel fusion and cosine deduplication.
//!
//! A kernel for instance `k` is the `R_k`-weighted average of the kernel
//! weight map over the instance's position region. Things are located at
//! 3x3 local maxima of the thing position map, stuff at the pixels where a
//! category wins the per-pixel arg-max of the stuff position map.

use crate::error::{Error, Result};
use crate::types::{argmax, EmbeddingMap, InstanceKernel, InstanceKind, KernelSet, Raster2D};

/// Default cosine-similarity threshold for merging duplicate kernels.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.9;

/// Per-pixel kernel weights (the `G` map) for mask or depth kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelWeightMap(pub EmbeddingMap);

impl From<EmbeddingMap> for KernelWeightMap {
    fn from(map: EmbeddingMap) -> Self {
        KernelWeightMap(map)
    }
}

/// Non-negative pixel weights selecting one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionRegion {
    pub weights: Raster2D<f64>,
    pub kind: InstanceKind,
    pub category: u16,
    /// Confidence: the peak score for things, the mean category score over
    /// the region for stuff.
    pub score: f64,
    /// Weighted average of the position map over the region.
    pub class_scores: Vec<f64>,
}

impl PositionRegion {
    pub fn total_weight(&self) -> f64 {
        self.weights.values().iter().sum()
    }
}

/// Selects thing peaks or stuff regions from a per-category score map
/// (`channels` = number of categories).
///
/// Thing peaks beat every 3x3 neighbour; equal scores go to the smaller
/// linear index. Candidates are ranked by score, then linear index, then
/// category, and truncated to `top_k`.
pub fn select_positions(
    position_map: &EmbeddingMap,
    kind: InstanceKind,
    peak_threshold: f64,
    top_k: usize,
) -> Result<Vec<PositionRegion>> {
    if let Some(v) = position_map.pixels().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("position score {v} outside [0,1]")));
    }
    match kind {
        InstanceKind::Thing => Ok(thing_peaks(position_map, peak_threshold, top_k)),
        InstanceKind::Stuff => Ok(stuff_regions(position_map)),
    }
}

fn thing_peaks(map: &EmbeddingMap, threshold: f64, top_k: usize) -> Vec<PositionRegion> {
    let (h, w) = map.dims();
    let score = |idx: usize, c: usize| map.pixel(idx)[c];
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for c in 0..map.channels() {
        for r in 0..h {
            for col in 0..w {
                let idx = r * w + col;
                let s = score(idx, c);
                if s < threshold || s <= 0.0 {
                    continue;
                }
                let mut is_peak = true;
                'nb: for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (r as i64 + dr, col as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let nidx = nr as usize * w + nc as usize;
                        let ns = score(nidx, c);
                        if ns > s || (ns == s && nidx < idx) {
                            is_peak = false;
                            break 'nb;
                        }
                    }
                }
                if is_peak {
                    peaks.push((s, idx, c));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    peaks.truncate(top_k);
    peaks
        .into_iter()
        .map(|(s, idx, c)| {
            let mut weights = vec![0.0; h * w];
            weights[idx] = s;
            PositionRegion {
                weights: Raster2D::new(h, w, weights).expect("dims from map"),
                kind: InstanceKind::Thing,
                category: c as u16,
                score: s,
                class_scores: map.pixel(idx).to_vec(),
            }
        })
        .collect()
}

fn stuff_regions(map: &EmbeddingMap) -> Vec<PositionRegion> {
    let (h, w) = map.dims();
    let channels = map.channels();
    let winners: Vec<usize> = map.pixels().map(argmax).collect();
    let mut out = Vec::new();
    for c in 0..channels {
        let weights: Vec<f64> = map
            .pixels()
            .zip(&winners)
            .map(|(px, win)| if *win == c { px[c] } else { 0.0 })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            continue;
        }
        let members = winners.iter().filter(|win| **win == c).count();
        let mut class_scores = vec![0.0; channels];
        for (px, wt) in map.pixels().zip(&weights) {
            if *wt > 0.0 {
                for (acc, v) in class_scores.iter_mut().zip(px) {
                    *acc += wt * v;
                }
            }
        }
        class_scores.iter_mut().for_each(|v| *v /= total);
        out.push(PositionRegion {
            weights: Raster2D::new(h, w, weights).expect("dims from map"),
            kind: InstanceKind::Stuff,
            category: c as u16,
            score: total / members as f64,
            class_scores,
        });
    }
    out
}

/// Region-weighted channel average of the kernel weight map.
pub fn akf_fuse(g: &KernelWeightMap, region: &PositionRegion) -> Result<Vec<f64>> {
    let g = &g.0;
    if g.dims() != region.weights.dims() {
        return Err(Error::dim(format!(
            "kernel weight map {:?} vs region {:?}",
            g.dims(),
            region.weights.dims()
        )));
    }
    let mut acc = vec![0.0; g.channels()];
    let mut total = 0.0;
    for (idx, wt) in region.weights.values().iter().enumerate() {
        if *wt != 0.0 {
            total += wt;
            for (a, v) in acc.iter_mut().zip(g.pixel(idx)) {
                *a += wt * v;
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::DegenerateRegion);
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(acc)
}

/// Fuses mask and depth kernels for every region into a [`KernelSet`].
pub fn fuse_regions(
    mask_weights: &KernelWeightMap,
    depth_weights: &KernelWeightMap,
    regions: &[PositionRegion],
) -> Result<KernelSet> {
    let num_classes = regions.first().map_or(1, |r| r.class_scores.len());
    let instances = regions
        .iter()
        .map(|r| {
            Ok(InstanceKernel {
                class_scores: r.class_scores.clone(),
                mask: akf_fuse(mask_weights, r)?,
                depth: akf_fuse(depth_weights, r)?,
                score: r.score,
                is_thing: r.kind == InstanceKind::Thing,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    KernelSet::new(
        num_classes,
        mask_weights.0.channels(),
        depth_weights.0.channels(),
        instances,
    )
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Greedy merge of near-duplicate kernels.
///
/// Kernels are visited in descending score order. Each one is folded into
/// the first kept kernel of the same kind and category whose mask kernel
/// has cosine similarity `>= threshold`; the fold is a score-weighted
/// average of mask, depth and class vectors and the kept score is
/// unchanged. Survivors are returned in their original order.
pub fn cosine_dedup(kernels: &KernelSet, threshold: f64) -> Result<KernelSet> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Domain(format!("dedup threshold {threshold} not in (0,1]")));
    }
    let instances = kernels.instances();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|a, b| instances[*b].score.total_cmp(&instances[*a].score).then(a.cmp(b)));

    // (original index, merged kernel, accumulated weight)
    let mut kept: Vec<(usize, InstanceKernel, f64)> = Vec::new();
    for i in order {
        let cand = &instances[i];
        let target = kept.iter_mut().find(|(_, k, _)| {
            k.is_thing == cand.is_thing
                && k.category() == cand.category()
                && cosine_similarity(&k.mask, &cand.mask) >= threshold
        });
        match target {
            Some((_, k, weight)) => {
                let (wk, wc) = if *weight + cand.score > 0.0 {
                    (*weight, cand.score)
                } else {
                    (1.0, 1.0)
                };
                let blend = |a: &mut Vec<f64>, b: &[f64]| {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x = (wk * *x + wc * y) / (wk + wc);
                    }
                };
                blend(&mut k.mask, &cand.mask);
                blend(&mut k.depth, &cand.depth);
                blend(&mut k.class_scores, &cand.class_scores);
                *weight = wk + wc;
            }
            None => kept.push((i, cand.clone(), cand.score)),
        }
    }
    kept.sort_by_key(|(i, _, _)| *i);
    KernelSet::new(
        kernels.num_classes(),
        kernels.mask_dim(),
        kernels.depth_dim(),
        kept.into_iter().map(|(_, k, _)| k).collect(),
    )
}
