//! Raster, embedding, kernel and label-map data model.
//!
//! Rasters are row-major with a top-left origin. Everything here is
//! immutable once constructed.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 2-D raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster2D<V> {
    height: usize,
    width: usize,
    values: Vec<V>,
}

impl<V> Raster2D<V> {
    pub fn new(height: usize, width: usize, values: Vec<V>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim(format!("raster must be non-empty, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "{height}x{width} raster needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> V) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn into_values(self) -> Vec<V> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &V {
        &self.values[row * self.width + col]
    }

    pub fn map<U>(&self, f: impl FnMut(&V) -> U) -> Raster2D<U> {
        Raster2D {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Raster2D<U>) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_dims<U>(&self, other: &Raster2D<U>, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }
}

impl<V: Clone> Raster2D<V> {
    pub fn filled(height: usize, width: usize, value: V) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }
}

/// Per-pixel real vectors with a fixed channel count.
///
/// Storage is pixel-major: the `channels` values of one pixel are
/// contiguous, so a 1x1 dynamic convolution is a dot product per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl EmbeddingMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "embedding must be non-empty, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "{channels}-channel {height}x{width} embedding needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation("embedding", format!("non-finite value at flat index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an embedding from one raster per channel.
    pub fn from_planes(planes: &[Raster2D<f64>]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::dim("embedding needs at least one channel"))?;
        let (h, w) = first.dims();
        let c = planes.len();
        let mut data = vec![0.0; c * h * w];
        for (k, plane) in planes.iter().enumerate() {
            first.check_dims(plane, "embedding channel")?;
            for (p, v) in plane.values().iter().enumerate() {
                data[p * c + k] = *v;
            }
        }
        Self::new(c, h, w, data)
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, &mut [f64]),
    ) -> Result<Self> {
        let mut data = vec![0.0; channels * height * width];
        if channels > 0 {
            for (p, px) in data.chunks_exact_mut(channels).enumerate() {
                f(p / width.max(1), p % width.max(1), px);
            }
        }
        Self::new(channels, height, width, data)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    pub fn plane(&self, channel: usize) -> Raster2D<f64> {
        let values = self.pixels().map(|px| px[channel]).collect();
        Raster2D {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

/// Depth-kernel layout: plain kernels match the depth embedding width,
/// triplet kernels carry two extra entries for the range and shift logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthScheme {
    Plain,
    Triplet,
}

impl DepthScheme {
    /// Depth-kernel length for a depth embedding with `embed_channels`.
    pub fn kernel_len(self, embed_channels: usize) -> usize {
        match self {
            DepthScheme::Plain => embed_channels,
            DepthScheme::Triplet => embed_channels + 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Thing,
    Stuff,
}

/// Kernels for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceKernel {
    pub class_scores: Vec<f64>,
    pub mask: Vec<f64>,
    pub depth: Vec<f64>,
    pub score: f64,
    pub is_thing: bool,
}

impl InstanceKernel {
    /// Arg-max category; ties go to the lower class id.
    pub fn category(&self) -> u16 {
        argmax(&self.class_scores) as u16
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Classification scores plus mask and depth kernels for `N` instances.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSet {
    num_classes: usize,
    mask_dim: usize,
    depth_dim: usize,
    instances: Vec<InstanceKernel>,
}

impl KernelSet {
    pub fn new(
        num_classes: usize,
        mask_dim: usize,
        depth_dim: usize,
        instances: Vec<InstanceKernel>,
    ) -> Result<Self> {
        if num_classes == 0 || num_classes > u16::MAX as usize {
            return Err(Error::validation("num_classes", format!("{num_classes} out of range")));
        }
        for (i, inst) in instances.iter().enumerate() {
            if inst.class_scores.len() != num_classes {
                return Err(Error::validation(
                    format!("classes[{i}]"),
                    format!("expected {num_classes} scores, got {}", inst.class_scores.len()),
                ));
            }
            if inst.mask.len() != mask_dim {
                return Err(Error::validation(
                    format!("mask_kernels[{i}]"),
                    format!("expected length {mask_dim}, got {}", inst.mask.len()),
                ));
            }
            if inst.depth.len() != depth_dim {
                return Err(Error::validation(
                    format!("depth_kernels[{i}]"),
                    format!("expected length {depth_dim}, got {}", inst.depth.len()),
                ));
            }
            if !(0.0..=1.0).contains(&inst.score) {
                return Err(Error::validation(format!("scores[{i}]"), format!("{} not in [0,1]", inst.score)));
            }
            let finite = inst
                .class_scores
                .iter()
                .chain(&inst.mask)
                .chain(&inst.depth)
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::validation(format!("instance[{i}]"), "non-finite kernel value"));
            }
        }
        Ok(Self {
            num_classes,
            mask_dim,
            depth_dim,
            instances,
        })
    }

    /// Checks kernel widths against the embeddings they will be applied to.
    pub fn check_embeddings(&self, mask_emb: &EmbeddingMap, depth_emb: &EmbeddingMap, scheme: DepthScheme) -> Result<()> {
        if self.mask_dim != mask_emb.channels() {
            return Err(Error::validation(
                "mask_kernel_dim",
                format!("{} != mask embedding channels {}", self.mask_dim, mask_emb.channels()),
            ));
        }
        let want = scheme.kernel_len(depth_emb.channels());
        if self.depth_dim != want {
            return Err(Error::validation(
                "depth_kernel_dim",
                format!(
                    "{:?} scheme with {} depth embedding channels needs length {want}, got {}",
                    scheme,
                    depth_emb.channels(),
                    self.depth_dim
                ),
            ));
        }
        if mask_emb.dims() != depth_emb.dims() {
            return Err(Error::dim("mask and depth embeddings differ in size"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mask_dim(&self) -> usize {
        self.mask_dim
    }

    pub fn depth_dim(&self) -> usize {
        self.depth_dim
    }

    pub fn instances(&self) -> &[InstanceKernel] {
        &self.instances
    }

    pub fn get(&self, i: usize) -> &InstanceKernel {
        &self.instances[i]
    }

    pub fn into_instances(self) -> Vec<InstanceKernel> {
        self.instances
    }
}

/// Packed `(class_id, instance_id)` label: class in the high 16 bits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentRef(pub u32);

impl SegmentRef {
    pub const VOID_CLASS: u16 = 0xFFFF;
    pub const VOID: SegmentRef = SegmentRef(0xFFFF_0000);

    #[inline]
    pub const fn new(class_id: u16, instance_id: u16) -> Self {
        SegmentRef(((class_id as u32) << 16) | instance_id as u32)
    }

    #[inline]
    pub const fn class_id(self) -> u16 {
        (self.0 >> 16) as u16
    }

    #[inline]
    pub const fn instance_id(self) -> u16 {
        (self.0 & 0xFFFF) as u16
    }

    #[inline]
    pub const fn is_void(self) -> bool {
        self.class_id() == Self::VOID_CLASS
    }
}

impl fmt::Debug for SegmentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_void() {
            write!(f, "VOID")
        } else {
            write!(f, "Seg({}:{})", self.class_id(), self.instance_id())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: SegmentRef,
    pub is_thing: bool,
}

impl SegmentInfo {
    pub fn class_id(&self) -> u16 {
        self.id.class_id()
    }
}

/// Non-overlapping panoptic labelling: one [`SegmentRef`] per pixel plus
/// the segment table.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticLabelMap {
    labels: Raster2D<SegmentRef>,
    segments: Vec<SegmentInfo>,
}

impl PanopticLabelMap {
    pub fn new(labels: Raster2D<SegmentRef>, segments: Vec<SegmentInfo>) -> Result<Self> {
        let mut known = HashMap::with_capacity(segments.len());
        for (i, s) in segments.iter().enumerate() {
            if s.id.is_void() {
                return Err(Error::validation(format!("segments[{i}]"), "VOID is not a segment"));
            }
            if known.insert(s.id, i).is_some() {
                return Err(Error::validation(format!("segments[{i}]"), format!("duplicate id {:?}", s.id)));
            }
        }
        let mut last = SegmentRef::VOID;
        for (p, l) in labels.values().iter().enumerate() {
            if *l != last && !l.is_void() && !known.contains_key(l) {
                return Err(Error::validation(
                    "labels",
                    format!("pixel {p} carries unknown segment {:?}", l),
                ));
            }
            last = *l;
        }
        Ok(Self { labels, segments })
    }

    /// Derives the segment table from the labels alone: segments with
    /// instance id 0 are stuff, everything else is a thing.
    pub fn from_labels(labels: Raster2D<SegmentRef>) -> Self {
        let mut ids: Vec<SegmentRef> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut last = SegmentRef::VOID;
        for l in labels.values() {
            if *l != last {
                if !l.is_void() && seen.insert(*l) {
                    ids.push(*l);
                }
                last = *l;
            }
        }
        ids.sort_unstable();
        let segments = ids
            .into_iter()
            .map(|id| SegmentInfo {
                id,
                is_thing: id.instance_id() != 0,
            })
            .collect();
        Self { labels, segments }
    }

    pub fn labels(&self) -> &Raster2D<SegmentRef> {
        &self.labels
    }

    pub fn segments(&self) -> &[SegmentInfo] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentRef) -> Option<&SegmentInfo> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    pub fn has_void(&self) -> bool {
        self.labels.values().iter().any(|l| l.is_void())
    }

    /// Pixel count per segment (VOID excluded).
    pub fn areas(&self) -> BTreeMap<SegmentRef, u64> {
        let mut out = BTreeMap::new();
        for l in self.labels.values() {
            if !l.is_void() {
                *out.entry(*l).or_insert(0) += 1;
            }
        }
        out
    }

    /// Same segment table, new labels.
    pub fn with_labels(&self, labels: Raster2D<SegmentRef>) -> Result<Self> {
        self.labels.check_dims(&labels, "relabel")?;
        Self::new(labels, self.segments.clone())
    }
}

/// Metric depth raster with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    depth: Raster2D<f64>,
    valid: Raster2D<bool>,
}

impl DepthMap {
    pub fn new(depth: Raster2D<f64>, valid: Raster2D<bool>) -> Result<Self> {
        depth.check_dims(&valid, "depth vs validity mask")?;
        for (p, (d, v)) in depth.values().iter().zip(valid.values()).enumerate() {
            if *v && !(d.is_finite() && *d > 0.0) {
                return Err(Error::validation("depth", format!("valid pixel {p} has depth {d}")));
            }
        }
        Ok(Self { depth, valid })
    }

    /// Valid wherever the depth is finite and strictly positive.
    pub fn from_depth(depth: Raster2D<f64>) -> Self {
        let valid = depth.map(|d| d.is_finite() && *d > 0.0);
        Self { depth, valid }
    }

    pub fn depth(&self) -> &Raster2D<f64> {
        &self.depth
    }

    pub fn valid(&self) -> &Raster2D<bool> {
        &self.valid
    }

    pub fn dims(&self) -> (usize, usize) {
        self.depth.dims()
    }

    #[inline]
    pub fn at(&self, index: usize) -> Option<f64> {
        if self.valid.values()[index] {
            Some(self.depth.values()[index])
        } else {
            None
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.values().iter().filter(|v| **v).count()
    }

    /// Checks that no valid pixel exceeds `d_max`.
    pub fn check_range(&self, d_max: f64) -> Result<()> {
        for (p, d) in self.depth.values().iter().enumerate() {
            if self.valid.values()[p] && *d > d_max {
                return Err(Error::validation("depth", format!("pixel {p} depth {d} exceeds d_max {d_max}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            depth: self.depth.map(|d| d * factor),
            valid: self.valid.clone(),
        }
    }
}

/// Counts co-occurring `(pred, gt)` segment pairs in one pass.
///
/// Keys include VOID on either side. Runs of identical pairs along a row
/// are counted with a single table update.
pub fn segment_histogram(
    pred: &PanopticLabelMap,
    gt: &PanopticLabelMap,
) -> Result<HashMap<(SegmentRef, SegmentRef), u64>> {
    pred.labels.check_dims(&gt.labels, "segment histogram")?;
    let mut table: HashMap<(SegmentRef, SegmentRef), u64> = HashMap::new();
    let p = pred.labels.values();
    let g = gt.labels.values();
    let mut i = 0;
    let n = p.len();
    while i < n {
        let key = (p[i], g[i]);
        let mut j = i + 1;
        while j < n && p[j] == key.0 && g[j] == key.1 {
            j += 1;
        }
        *table.entry(key).or_insert(0) += (j - i) as u64;
        i = j;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, ids: &[u32]) -> PanopticLabelMap {
        PanopticLabelMap::from_labels(Raster2D::new(h, w, ids.iter().map(|v| SegmentRef(*v)).collect()).unwrap())
    }

    #[test]
    fn raster_rejects_bad_lengths() {
        assert!(Raster2D::new(2, 2, vec![0u8; 3]).is_err());
        assert!(Raster2D::<u8>::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn segment_ref_packing() {
        let s = SegmentRef::new(7, 300);
        assert_eq!(s.0, (7 << 16) | 300);
        assert_eq!(s.class_id(), 7);
        assert_eq!(s.instance_id(), 300);
        assert!(SegmentRef::VOID.is_void());
        assert!(SegmentRef::new(0xFFFF, 12).is_void());
    }

    #[test]
    fn histogram_identity() {
        let a = SegmentRef::new(1, 0).0;
        let m = map(3, 4, &[a; 12]);
        let h = segment_histogram(&m, &m).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[&(SegmentRef(a), SegmentRef(a))], 12);
    }

    #[test]
    fn histogram_two_by_two() {
        let a = SegmentRef::new(1, 1).0;
        let b = SegmentRef::new(2, 1).0;
        let pred = map(2, 2, &[a, a, b, b]);
        let gt = map(2, 2, &[a, b, a, b]);
        let h = segment_histogram(&pred, &gt).unwrap();
        assert_eq!(h.len(), 4);
        for (p, g) in [(a, a), (a, b), (b, a), (b, b)] {
            assert_eq!(h[&(SegmentRef(p), SegmentRef(g))], 1);
        }
    }

    #[test]
    fn histogram_void_gt() {
        let a = SegmentRef::new(1, 1).0;
        let b = SegmentRef::new(2, 0).0;
        let pred = map(2, 3, &[a, a, b, b, b, a]);
        let gt = map(2, 3, &[SegmentRef::VOID.0; 6]);
        let h = segment_histogram(&pred, &gt).unwrap();
        assert!(h.keys().all(|(_, g)| g.is_void()));
        assert_eq!(h.values().sum::<u64>(), 6);
    }

    #[test]
    fn histogram_dimension_mismatch() {
        let pred = map(2, 2, &[0; 4]);
        let gt = map(1, 4, &[0; 4]);
        assert!(matches!(segment_histogram(&pred, &gt), Err(Error::Dimension(_))));
    }

    #[test]
    fn label_map_rejects_unknown_segment() {
        let labels = Raster2D::new(1, 2, vec![SegmentRef::new(1, 1), SegmentRef::new(2, 1)]).unwrap();
        let segs = vec![SegmentInfo {
            id: SegmentRef::new(1, 1),
            is_thing: true,
        }];
        assert!(PanopticLabelMap::new(labels, segs).is_err());
    }

    #[test]
    fn embedding_planes_roundtrip() {
        let a = Raster2D::from_fn(2, 3, |r, c| (r * 3 + c) as f64).unwrap();
        let b = a.map(|v| -v);
        let e = EmbeddingMap::from_planes(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(e.pixel(4), &[4.0, -4.0]);
        assert_eq!(e.plane(0), a);
        assert_eq!(e.plane(1), b);
    }

    #[test]
    fn kernel_set_checks_triplet_width() {
        let inst = InstanceKernel {
            class_scores: vec![1.0],
            mask: vec![0.0; 2],
            depth: vec![0.0; 5],
            score: 0.5,
            is_thing: true,
        };
        let ks = KernelSet::new(1, 2, 5, vec![inst]).unwrap();
        let m = EmbeddingMap::new(2, 1, 1, vec![0.0; 2]).unwrap();
        let d3 = EmbeddingMap::new(3, 1, 1, vec![0.0; 3]).unwrap();
        let d4 = EmbeddingMap::new(4, 1, 1, vec![0.0; 4]).unwrap();
        assert!(ks.check_embeddings(&m, &d3, DepthScheme::Triplet).is_ok());
        assert!(ks.check_embeddings(&m, &d4, DepthScheme::Triplet).is_err());
        assert!(ks.check_embeddings(&m, &d4, DepthScheme::Plain).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn histogram_counts_sum_to_area(
                h in 1usize..12, w in 1usize..12,
                seed in proptest::collection::vec(0u32..4, 144),
                seed2 in proptest::collection::vec(0u32..4, 144),
            ) {
                let n = h * w;
                let enc = |v: u32| if v == 3 { SegmentRef::VOID.0 } else { SegmentRef::new(v as u16, 1).0 };
                let pred: Vec<u32> = seed[..n].iter().map(|v| enc(*v)).collect();
                let gt: Vec<u32> = seed2[..n].iter().map(|v| enc(*v)).collect();
                let hist = segment_histogram(&map(h, w, &pred), &map(h, w, &gt)).unwrap();
                prop_assert_eq!(hist.values().sum::<u64>(), n as u64);
                for ((p, g), count) in &hist {
                    let brute = pred.iter().zip(&gt).filter(|(a, b)| **a == p.0 && **b == g.0).count() as u64;
                    prop_assert_eq!(*count, brute);
                }
            }
        }
    }
}
