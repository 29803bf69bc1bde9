//! Depth losses: scale-invariant log error plus relative squared error,
//! applied per pixel and to instance depth shifts, with analytic gradients.
//!
//! For log-ratios `r_j = ln d_j - ln gt_j` and relative errors
//! `e_j = (d_j - gt_j) / gt_j`:
//!
//! ```text
//! silog_var = mean(r^2) - mean(r)^2
//! rse       = sqrt(mean(e^2))
//! ```

use serde::{Deserialize, Serialize};

use crate::depth::DEFAULT_D_MAX;
use crate::error::{Error, Result};
use crate::types::{DepthMap, Raster2D, SegmentRef};

/// Weight of the instance-level depth loss.
pub const LAMBDA_INSTANCE_DEPTH: f64 = 1.0;
/// Weights of the position, segmentation and depth losses in the total
/// training objective.
pub const LAMBDA_POS: f64 = 1.0;
pub const LAMBDA_SEG: f64 = 4.0;
pub const LAMBDA_DEP: f64 = 5.0;

/// Ground-truth shifts are clamped to this before taking logs.
pub const MIN_GT_SHIFT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub silog_var: f64,
    pub rse: f64,
    pub total: f64,
    pub n: usize,
}

impl LossBreakdown {
    pub const ZERO: LossBreakdown = LossBreakdown {
        silog_var: 0.0,
        rse: 0.0,
        total: 0.0,
        n: 0,
    };
}

fn check_inputs(d: &[f64], d_hat: &[f64]) -> Result<()> {
    if d.len() != d_hat.len() {
        return Err(Error::dim(format!("{} predictions vs {} targets", d.len(), d_hat.len())));
    }
    if d.is_empty() {
        return Err(Error::EmptyInput("depth loss over zero samples".into()));
    }
    if let Some(v) = d.iter().chain(d_hat).find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("depth {v} is not strictly positive")));
    }
    Ok(())
}

struct Moments {
    sum_r: f64,
    sum_r2: f64,
    sum_e2: f64,
}

fn moments(d: &[f64], d_hat: &[f64]) -> Moments {
    let mut m = Moments {
        sum_r: 0.0,
        sum_r2: 0.0,
        sum_e2: 0.0,
    };
    for (p, g) in d.iter().zip(d_hat) {
        let r = p.ln() - g.ln();
        let e = (p - g) / g;
        m.sum_r += r;
        m.sum_r2 += r * r;
        m.sum_e2 += e * e;
    }
    m
}

pub fn silog_rse_loss(d: &[f64], d_hat: &[f64]) -> Result<LossBreakdown> {
    check_inputs(d, d_hat)?;
    let n = d.len() as f64;
    let m = moments(d, d_hat);
    // variance of the log-ratios; clamp the rounding residue at zero
    let silog_var = (m.sum_r2 / n - (m.sum_r / n) * (m.sum_r / n)).max(0.0);
    let rse = (m.sum_e2 / n).sqrt();
    Ok(LossBreakdown {
        silog_var,
        rse,
        total: silog_var + rse,
        n: d.len(),
    })
}

/// Gradient of `silog_rse_loss(d, d_hat).total` with respect to `d`.
///
/// The square root has no derivative at `rse == 0`; the subgradient 0 is
/// used there.
pub fn silog_rse_grad(d: &[f64], d_hat: &[f64]) -> Result<Vec<f64>> {
    check_inputs(d, d_hat)?;
    let n = d.len() as f64;
    let m = moments(d, d_hat);
    let rse = (m.sum_e2 / n).sqrt();
    let mean_r = m.sum_r / n;
    Ok(d.iter()
        .zip(d_hat)
        .map(|(p, g)| {
            let r = p.ln() - g.ln();
            let silog = 2.0 * (r - mean_r) / (n * p);
            let rel = if rse > 0.0 { (p - g) / g / (n * g * rse) } else { 0.0 };
            silog + rel
        })
        .collect())
}

fn joint_samples(pred: &DepthMap, gt: &DepthMap) -> Result<(Vec<f64>, Vec<f64>)> {
    pred.depth().check_dims(gt.depth(), "prediction vs ground-truth depth")?;
    let mut d = Vec::new();
    let mut d_hat = Vec::new();
    for p in 0..pred.depth().len() {
        if let (Some(a), Some(b)) = (pred.at(p), gt.at(p)) {
            d.push(a);
            d_hat.push(b);
        }
    }
    if d.is_empty() {
        return Err(Error::EmptyInput("no jointly valid depth pixels".into()));
    }
    Ok((d, d_hat))
}

/// Loss pooled over every pixel valid in both maps.
pub fn pixel_depth_loss(pred: &DepthMap, gt: &DepthMap) -> Result<LossBreakdown> {
    let (d, d_hat) = joint_samples(pred, gt)?;
    silog_rse_loss(&d, &d_hat)
}

/// Per-instance variant: the loss is evaluated inside each segment of
/// `segments` separately and averaged over segments with valid pixels.
pub fn pixel_depth_loss_per_instance(
    pred: &DepthMap,
    gt: &DepthMap,
    segments: &Raster2D<SegmentRef>,
) -> Result<LossBreakdown> {
    pred.depth().check_dims(gt.depth(), "prediction vs ground-truth depth")?;
    pred.depth().check_dims(segments, "depth vs segments")?;
    let mut groups: std::collections::BTreeMap<SegmentRef, (Vec<f64>, Vec<f64>)> = Default::default();
    for (p, seg) in segments.values().iter().enumerate() {
        if seg.is_void() {
            continue;
        }
        if let (Some(a), Some(b)) = (pred.at(p), gt.at(p)) {
            let g = groups.entry(*seg).or_default();
            g.0.push(a);
            g.1.push(b);
        }
    }
    if groups.is_empty() {
        return Err(Error::EmptyInput("no jointly valid depth pixels".into()));
    }
    let k = groups.len() as f64;
    let mut acc = LossBreakdown::ZERO;
    for (d, d_hat) in groups.values() {
        let l = silog_rse_loss(d, d_hat)?;
        acc.silog_var += l.silog_var / k;
        acc.rse += l.rse / k;
        acc.n += l.n;
    }
    acc.total = acc.silog_var + acc.rse;
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftTarget {
    /// Minimum depth under the mask (pairs with the T1 decoder).
    Min,
    /// Mean depth under the mask (pairs with the T2 decoder).
    Mean,
}

/// Ground-truth depth shift of one instance in units of `d_max`.
pub fn gt_depth_shift(gt: &DepthMap, mask: &Raster2D<bool>, target: ShiftTarget, d_max: f64) -> Result<f64> {
    gt.depth().check_dims(mask, "depth vs mask")?;
    let mut count = 0usize;
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    for (p, m) in mask.values().iter().enumerate() {
        if !*m {
            continue;
        }
        if let Some(d) = gt.at(p) {
            count += 1;
            min = min.min(d);
            sum += d;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("mask covers no valid ground-truth depth".into()));
    }
    Ok(match target {
        ShiftTarget::Min => min / d_max,
        ShiftTarget::Mean => sum / count as f64 / d_max,
    })
}

/// Same as [`gt_depth_shift`] with the default `d_max`.
pub fn gt_depth_shift_default(gt: &DepthMap, mask: &Raster2D<bool>, target: ShiftTarget) -> Result<f64> {
    gt_depth_shift(gt, mask, target, DEFAULT_D_MAX)
}

/// Loss between predicted and ground-truth instance shifts.
pub fn instance_depth_loss(pred_shifts: &[f64], gt_shifts: &[f64]) -> Result<LossBreakdown> {
    let gt: Vec<f64> = gt_shifts.iter().map(|s| if *s == 0.0 { MIN_GT_SHIFT } else { *s }).collect();
    silog_rse_loss(pred_shifts, &gt)
}

pub fn instance_depth_grad(pred_shifts: &[f64], gt_shifts: &[f64]) -> Result<Vec<f64>> {
    let gt: Vec<f64> = gt_shifts.iter().map(|s| if *s == 0.0 { MIN_GT_SHIFT } else { *s }).collect();
    silog_rse_grad(pred_shifts, &gt)
}

pub fn total_depth_loss(pixel: &LossBreakdown, instance: &LossBreakdown, lambda_i: f64) -> Result<f64> {
    if !(lambda_i >= 0.0) {
        return Err(Error::Domain(format!("instance loss weight {lambda_i} is negative")));
    }
    Ok(pixel.total + lambda_i * instance.total)
}
