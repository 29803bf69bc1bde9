//! Panoptic quality, depth-aware panoptic quality and RMSE.
//!
//! Segments match when they share a class and their IoU exceeds 0.5.
//! Following the usual panoptic evaluation convention, a predicted
//! segment's pixels over ground-truth VOID are removed from the union, and
//! a predicted segment lying mostly over VOID is not counted as a false
//! positive.
//!
//! DPQ at threshold `lambda` is PQ after every predicted pixel whose
//! absolute relative depth error is not below `lambda` has been set to
//! VOID. The reported DPQ is the mean over the threshold set.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{segment_histogram, DepthMap, PanopticLabelMap, Raster2D, SegmentRef};

/// Depth-error thresholds averaged into DPQ.
pub const DEFAULT_LAMBDAS: [f64; 3] = [0.1, 0.25, 0.5];

/// Default fraction of a predicted segment over VOID above which it is
/// not counted as a false positive.
pub const DEFAULT_VOID_IGNORE_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqConfig {
    pub void_ignore_fraction: f64,
}

impl Default for PqConfig {
    fn default() -> Self {
        Self {
            void_ignore_fraction: DEFAULT_VOID_IGNORE_FRACTION,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub is_thing: bool,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl CategoryStats {
    pub fn is_present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn pq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.iou_sum / denom
        }
    }

    /// Segmentation quality: mean IoU of matched pairs.
    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    /// Recognition quality: F1 of the matching.
    pub fn rq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.tp as f64 / denom
        }
    }
}

/// Which categories to average over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CategorySubset {
    All,
    Things,
    Stuff,
}

/// Per-category TP/FP/FN counts and matched-IoU sums.
///
/// Merging is associative and commutative on the counters; `iou_sum`
/// merges by floating-point addition, so callers that need bitwise
/// reproducibility merge in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PQStats {
    pub categories: BTreeMap<u16, CategoryStats>,
}

impl PQStats {
    fn entry(&mut self, class: u16, is_thing: bool) -> &mut CategoryStats {
        let e = self.categories.entry(class).or_default();
        e.is_thing |= is_thing;
        e
    }

    pub fn merge(&mut self, other: &PQStats) {
        for (class, s) in &other.categories {
            let e = self.entry(*class, s.is_thing);
            e.tp += s.tp;
            e.fp += s.fp;
            e.fn_ += s.fn_;
            e.iou_sum += s.iou_sum;
        }
    }

    pub fn merged<'a>(items: impl IntoIterator<Item = &'a PQStats>) -> PQStats {
        let mut out = PQStats::default();
        for s in items {
            out.merge(s);
        }
        out
    }

    /// Mean per-category PQ over present categories of the subset; 0 when
    /// none are present.
    pub fn pq_subset(&self, subset: CategorySubset) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for s in self.categories.values() {
            let wanted = match subset {
                CategorySubset::All => true,
                CategorySubset::Things => s.is_thing,
                CategorySubset::Stuff => !s.is_thing,
            };
            if wanted && s.is_present() {
                sum += s.pq();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn pq(&self) -> f64 {
        self.pq_subset(CategorySubset::All)
    }

    pub fn pq_thing(&self) -> f64 {
        self.pq_subset(CategorySubset::Things)
    }

    pub fn pq_stuff(&self) -> f64 {
        self.pq_subset(CategorySubset::Stuff)
    }

    pub fn totals(&self) -> CategoryStats {
        let mut t = CategoryStats::default();
        for s in self.categories.values() {
            t.tp += s.tp;
            t.fp += s.fp;
            t.fn_ += s.fn_;
            t.iou_sum += s.iou_sum;
        }
        t
    }
}

/// Thing/stuff kind per class: the first ground-truth segment of the class
/// decides, then the first predicted one.
fn category_kinds(pred: &PanopticLabelMap, gt: &PanopticLabelMap) -> HashMap<u16, bool> {
    let mut out = HashMap::new();
    for s in gt.segments().iter().chain(pred.segments()) {
        out.entry(s.class_id()).or_insert(s.is_thing);
    }
    out
}

pub fn compute_pq(pred: &PanopticLabelMap, gt: &PanopticLabelMap) -> Result<PQStats> {
    compute_pq_with(pred, gt, &PqConfig::default())
}

/// Histogram-backed PQ accumulation.
pub fn compute_pq_with(pred: &PanopticLabelMap, gt: &PanopticLabelMap, cfg: &PqConfig) -> Result<PQStats> {
    let hist = segment_histogram(pred, gt)?;
    let kinds = category_kinds(pred, gt);

    let mut pred_area: HashMap<SegmentRef, u64> = HashMap::new();
    let mut gt_area: HashMap<SegmentRef, u64> = HashMap::new();
    let mut pred_void: HashMap<SegmentRef, u64> = HashMap::new();
    for (&(p, g), &count) in &hist {
        if !p.is_void() {
            *pred_area.entry(p).or_insert(0) += count;
            if g.is_void() {
                *pred_void.entry(p).or_insert(0) += count;
            }
        }
        if !g.is_void() {
            *gt_area.entry(g).or_insert(0) += count;
        }
    }

    let mut matches: Vec<(SegmentRef, SegmentRef, f64)> = Vec::new();
    for (&(p, g), &inter) in &hist {
        if p.is_void() || g.is_void() || p.class_id() != g.class_id() {
            continue;
        }
        let union = pred_area[&p] + gt_area[&g] - inter - pred_void.get(&p).copied().unwrap_or(0);
        let iou = inter as f64 / union as f64;
        if iou > 0.5 {
            matches.push((g, p, iou));
        }
    }
    matches.sort_by_key(|m| (m.0, m.1));

    let mut stats = PQStats::default();
    let mut matched_pred = BTreeSet::new();
    let mut matched_gt = BTreeSet::new();
    for (g, p, iou) in &matches {
        let fresh_g = matched_gt.insert(*g);
        let fresh_p = matched_pred.insert(*p);
        assert!(fresh_g && fresh_p, "IoU > 0.5 matched {p:?}/{g:?} twice");
        let e = stats.entry(g.class_id(), kinds[&g.class_id()]);
        e.tp += 1;
        e.iou_sum += iou;
    }

    let mut gt_ids: Vec<_> = gt_area.keys().copied().collect();
    gt_ids.sort_unstable();
    for g in gt_ids {
        let e = stats.entry(g.class_id(), kinds[&g.class_id()]);
        if !matched_gt.contains(&g) {
            e.fn_ += 1;
        }
    }
    let mut pred_ids: Vec<_> = pred_area.keys().copied().collect();
    pred_ids.sort_unstable();
    for p in pred_ids {
        if matched_pred.contains(&p) {
            continue;
        }
        let void = pred_void.get(&p).copied().unwrap_or(0) as f64;
        if void > cfg.void_ignore_fraction * pred_area[&p] as f64 {
            continue;
        }
        stats.entry(p.class_id(), kinds[&p.class_id()]).fp += 1;
    }
    Ok(stats)
}

pub fn pq_bruteforce(pred: &PanopticLabelMap, gt: &PanopticLabelMap) -> Result<PQStats> {
    pq_bruteforce_with(pred, gt, &PqConfig::default())
}

/// Reference PQ: every pairwise IoU from explicit per-pixel scans.
pub fn pq_bruteforce_with(pred: &PanopticLabelMap, gt: &PanopticLabelMap, cfg: &PqConfig) -> Result<PQStats> {
    pred.labels().check_dims(gt.labels(), "panoptic maps")?;
    let pl = pred.labels().values();
    let gl = gt.labels().values();
    let distinct = |labels: &[SegmentRef]| {
        let mut v: Vec<SegmentRef> = labels.iter().copied().filter(|l| !l.is_void()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let pred_ids = distinct(pl);
    let gt_ids = distinct(gl);
    let kind = |class: u16| {
        gt.segments()
            .iter()
            .find(|s| s.class_id() == class)
            .or_else(|| pred.segments().iter().find(|s| s.class_id() == class))
            .map(|s| s.is_thing)
            .unwrap_or(false)
    };

    let mut tp: Vec<(SegmentRef, SegmentRef, f64)> = Vec::new();
    for &g in &gt_ids {
        for &p in &pred_ids {
            if p.class_id() != g.class_id() {
                continue;
            }
            let mut inter = 0u64;
            let mut union = 0u64;
            for i in 0..pl.len() {
                let in_p = pl[i] == p && !gl[i].is_void();
                let in_g = gl[i] == g;
                inter += u64::from(in_p && in_g);
                union += u64::from(in_p || in_g);
            }
            if union > 0 && inter as f64 / union as f64 > 0.5 {
                tp.push((g, p, inter as f64 / union as f64));
            }
        }
    }

    let mut stats = PQStats::default();
    for (g, p, iou) in &tp {
        let dup = tp.iter().filter(|(g2, p2, _)| g2 == g || p2 == p).count();
        assert_eq!(dup, 1, "segment matched more than once");
        let e = stats.entry(g.class_id(), kind(g.class_id()));
        e.tp += 1;
        e.iou_sum += iou;
    }
    for &g in &gt_ids {
        if !tp.iter().any(|(g2, _, _)| *g2 == g) {
            stats.entry(g.class_id(), kind(g.class_id())).fn_ += 1;
        }
    }
    for &p in &pred_ids {
        if tp.iter().any(|(_, p2, _)| *p2 == p) {
            continue;
        }
        let area = pl.iter().filter(|l| **l == p).count() as f64;
        let void = pl.iter().zip(gl).filter(|(a, b)| **a == p && b.is_void()).count() as f64;
        if void > cfg.void_ignore_fraction * area {
            continue;
        }
        stats.entry(p.class_id(), kind(p.class_id())).fp += 1;
    }
    Ok(stats)
}

/// Absolute relative depth error `|d - gt| / gt`, `None` without valid gt.
#[inline]
fn rel_error(pred: &DepthMap, gt: &DepthMap, p: usize) -> Option<f64> {
    let g = gt.at(p)?;
    Some(match pred.at(p) {
        Some(d) => (d - g).abs() / g,
        None => f64::INFINITY,
    })
}

/// Voids predicted pixels whose relative depth error is `>= lambda`.
///
/// Pixels without valid ground-truth depth are left untouched; a valid gt
/// pixel with invalid predicted depth counts as an infinite error.
pub fn apply_depth_filter(
    pred_pan: &PanopticLabelMap,
    pred_depth: &DepthMap,
    gt_depth: &DepthMap,
    lambda: f64,
) -> Result<PanopticLabelMap> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("depth threshold {lambda} must be positive")));
    }
    pred_pan.labels().check_dims(pred_depth.depth(), "panoptic vs predicted depth")?;
    pred_depth.depth().check_dims(gt_depth.depth(), "predicted vs ground-truth depth")?;
    let (h, w) = pred_pan.dims();
    let labels: Vec<SegmentRef> = pred_pan
        .labels()
        .values()
        .iter()
        .enumerate()
        .map(|(p, l)| match rel_error(pred_depth, gt_depth, p) {
            Some(err) if !(err < lambda) => SegmentRef::VOID,
            _ => *l,
        })
        .collect();
    pred_pan.with_labels(Raster2D::new(h, w, labels)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaStats {
    pub lambda: f64,
    pub stats: PQStats,
}

/// PQ before filtering plus PQ at each depth threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DPQResult {
    pub pq_stats: PQStats,
    pub per_lambda: Vec<LambdaStats>,
}

impl DPQResult {
    fn mean_over_lambdas(&self, subset: CategorySubset) -> f64 {
        let n = self.per_lambda.len() as f64;
        self.per_lambda.iter().map(|l| l.stats.pq_subset(subset)).sum::<f64>() / n
    }

    pub fn dpq(&self) -> f64 {
        self.mean_over_lambdas(CategorySubset::All)
    }

    pub fn dpq_thing(&self) -> f64 {
        self.mean_over_lambdas(CategorySubset::Things)
    }

    pub fn dpq_stuff(&self) -> f64 {
        self.mean_over_lambdas(CategorySubset::Stuff)
    }

    pub fn pq(&self) -> f64 {
        self.pq_stats.pq()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.per_lambda.iter().map(|l| l.lambda).collect()
    }

    /// Merges per-image results that share a threshold list.
    pub fn merge(&mut self, other: &DPQResult) -> Result<()> {
        if self.lambdas() != other.lambdas() {
            return Err(Error::dim("cannot merge DPQ results over different threshold sets"));
        }
        self.pq_stats.merge(&other.pq_stats);
        for (a, b) in self.per_lambda.iter_mut().zip(&other.per_lambda) {
            a.stats.merge(&b.stats);
        }
        Ok(())
    }
}

pub fn compute_dpq(
    pred_pan: &PanopticLabelMap,
    pred_depth: &DepthMap,
    gt_pan: &PanopticLabelMap,
    gt_depth: &DepthMap,
    lambdas: &[f64],
) -> Result<DPQResult> {
    compute_dpq_with(pred_pan, pred_depth, gt_pan, gt_depth, lambdas, &PqConfig::default())
}

pub fn compute_dpq_with(
    pred_pan: &PanopticLabelMap,
    pred_depth: &DepthMap,
    gt_pan: &PanopticLabelMap,
    gt_depth: &DepthMap,
    lambdas: &[f64],
    cfg: &PqConfig,
) -> Result<DPQResult> {
    if lambdas.is_empty() {
        return Err(Error::EmptyInput("no depth thresholds".into()));
    }
    gt_pan.labels().check_dims(gt_depth.depth(), "ground-truth panoptic vs depth")?;
    let pq_stats = compute_pq_with(pred_pan, gt_pan, cfg)?;
    let per_lambda = lambdas
        .iter()
        .map(|&lambda| {
            let filtered = apply_depth_filter(pred_pan, pred_depth, gt_depth, lambda)?;
            Ok(LambdaStats {
                lambda,
                stats: compute_pq_with(&filtered, gt_pan, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DPQResult { pq_stats, per_lambda })
}

/// Sum of squared errors and count over jointly valid pixels.
pub fn squared_error_sum(pred: &DepthMap, gt: &DepthMap) -> Result<(f64, usize)> {
    pred.depth().check_dims(gt.depth(), "predicted vs ground-truth depth")?;
    let mut sse = 0.0;
    let mut n = 0;
    for p in 0..pred.depth().len() {
        if let (Some(a), Some(b)) = (pred.at(p), gt.at(p)) {
            sse += (a - b) * (a - b);
            n += 1;
        }
    }
    Ok((sse, n))
}

pub fn compute_rmse(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let (sse, n) = squared_error_sum(pred, gt)?;
    if n == 0 {
        return Err(Error::EmptyInput("no jointly valid depth pixels".into()));
    }
    Ok((sse / n as f64).sqrt())
}

/// Mean absolute relative error over jointly valid pixels.
pub fn compute_abs_rel(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    pred.depth().check_dims(gt.depth(), "predicted vs ground-truth depth")?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..pred.depth().len() {
        if let (Some(a), Some(b)) = (pred.at(p), gt.at(p)) {
            sum += (a - b).abs() / b;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("no jointly valid depth pixels".into()));
    }
    Ok(sum / n as f64)
}
