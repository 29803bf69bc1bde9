//! Micro-ablation over depth-head variants on synthetic scenes.
//!
//! Every variant predicts depth from the same shared depth embedding with
//! per-pixel `z = k . E(x)`; they differ in who owns the kernel and how `z`
//! is decoded:
//!
//! | variant | kernel       | decoder | instance loss |
//! |---------|--------------|---------|---------------|
//! | A       | one per scene| plain   | no            |
//! | B       | per instance | plain   | no            |
//! | C       | per instance | T1      | no            |
//! | D       | per instance | T2      | no            |
//! | E       | per instance | T1      | min shift     |
//! | F       | per instance | T2      | mean shift    |
//!
//! Segmentation is taken from ground truth so DPQ differences come from
//! depth alone. Parameters are fitted with Adam on the analytic gradients.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::{DepthDecoder, DEFAULT_D_MAX};
use crate::error::{Error, Result};
use crate::losses::{
    gt_depth_shift, instance_depth_grad, instance_depth_loss, silog_rse_grad, silog_rse_loss, ShiftTarget,
    LAMBDA_INSTANCE_DEPTH,
};
use crate::mask::sigmoid;
use crate::metrics::{compute_dpq, compute_rmse, DPQResult, DEFAULT_LAMBDAS};
use crate::types::{DepthMap, EmbeddingMap, Raster2D, SegmentRef};

use super::scene::{coordinate_embedding, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F];

    pub fn decoder(self) -> DepthDecoder {
        match self {
            Variant::A | Variant::B => DepthDecoder::Plain,
            Variant::C | Variant::E => DepthDecoder::T1,
            Variant::D | Variant::F => DepthDecoder::T2,
        }
    }

    pub fn shift_target(self) -> Option<ShiftTarget> {
        match self {
            Variant::E => Some(ShiftTarget::Min),
            Variant::F => Some(ShiftTarget::Mean),
            _ => None,
        }
    }

    /// Variant A shares one kernel across the whole image.
    pub fn instance_wise(self) -> bool {
        self != Variant::A
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            "E" => Ok(Variant::E),
            "F" => Ok(Variant::F),
            other => Err(Error::validation("variant", format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub d_max: f64,
    pub lambda_instance: f64,
    pub lambdas: Vec<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            step_size: 0.05,
            d_max: DEFAULT_D_MAX,
            lambda_instance: LAMBDA_INSTANCE_DEPTH,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }
}

/// Kernel and triplet logits of one instance (or of the whole image for
/// variant A).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub kernel: Vec<f64>,
    pub range_logit: f64,
    pub shift_logit: f64,
}

impl HeadParams {
    fn zeros(channels: usize) -> Self {
        Self {
            kernel: vec![0.0; channels],
            range_logit: 0.0,
            shift_logit: 0.0,
        }
    }

    fn len(&self) -> usize {
        self.kernel.len() + 2
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.kernel.clone();
        v.push(self.range_logit);
        v.push(self.shift_logit);
        v
    }

    fn set_flat(&mut self, v: &[f64]) {
        let c = self.kernel.len();
        self.kernel.copy_from_slice(&v[..c]);
        self.range_logit = v[c];
        self.shift_logit = v[c + 1];
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// `(segment, params)`; a single entry with the VOID id for variant A.
    pub heads: Vec<(SegmentRef, HeadParams)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub pixel_loss: f64,
    pub instance_loss: f64,
    pub objective: f64,
    pub rmse: f64,
    pub pq: f64,
    pub dpq: f64,
    pub dpq_thing: f64,
    pub dpq_stuff: f64,
    /// `(lambda, DPQ^lambda)`.
    pub per_lambda: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub iterations: usize,
    pub initial: FitMetrics,
    #[serde(rename = "final")]
    pub final_: FitMetrics,
    pub params: Vec<SceneParams>,
}

/// One scene prepared for fitting.
struct Problem<'a> {
    scene: &'a Scene,
    emb: EmbeddingMap,
    /// Pixel indices with a segment and valid gt depth.
    samples: Vec<usize>,
    gt: Vec<f64>,
    /// Head index owning each pixel (`usize::MAX` for VOID).
    owner: Vec<usize>,
    heads: Vec<SegmentRef>,
    /// `(head, gt shift)` for heads with valid gt depth.
    gt_shifts: Vec<(usize, f64)>,
}

impl<'a> Problem<'a> {
    fn new(scene: &'a Scene, variant: Variant, cfg: &FitConfig) -> Result<Self> {
        let (h, w) = scene.panoptic.dims();
        let emb = coordinate_embedding(h, w)?;
        let heads: Vec<SegmentRef> = if variant.instance_wise() {
            scene.panoptic.segments().iter().map(|s| s.id).collect()
        } else {
            vec![SegmentRef::VOID]
        };
        let index: HashMap<SegmentRef, usize> = heads.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let owner: Vec<usize> = scene
            .panoptic
            .labels()
            .values()
            .iter()
            .map(|l| {
                if l.is_void() {
                    usize::MAX
                } else if variant.instance_wise() {
                    index[l]
                } else {
                    0
                }
            })
            .collect();
        let samples: Vec<usize> = (0..owner.len())
            .filter(|p| owner[*p] != usize::MAX && scene.depth.at(*p).is_some())
            .collect();
        if samples.is_empty() {
            return Err(Error::EmptyInput("scene has no labelled pixels with valid depth".into()));
        }
        let gt = samples.iter().map(|p| scene.depth.at(*p).unwrap()).collect();

        let mut gt_shifts = Vec::new();
        if let Some(target) = variant.shift_target() {
            for (i, seg) in heads.iter().enumerate() {
                let mask = scene.panoptic.labels().map(|l| l == seg);
                match gt_depth_shift(&scene.depth, &mask, target, cfg.d_max) {
                    Ok(s) => gt_shifts.push((i, s)),
                    Err(Error::EmptyInput(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(Self {
            scene,
            emb,
            samples,
            gt,
            owner,
            heads,
            gt_shifts,
        })
    }

    fn depth_at(&self, p: usize, params: &[HeadParams], decoder: DepthDecoder, d_max: f64) -> (f64, [f64; 3]) {
        let hp = &params[self.owner[p]];
        let z: f64 = self.emb.pixel(p).iter().zip(&hp.kernel).map(|(e, k)| e * k).sum();
        decoder.eval(z, hp.range_logit, hp.shift_logit, d_max)
    }

    fn predicted_depth(&self, params: &[HeadParams], decoder: DepthDecoder, d_max: f64) -> Result<DepthMap> {
        let (h, w) = self.scene.panoptic.dims();
        let depth: Vec<f64> = (0..h * w)
            .map(|p| {
                if self.owner[p] == usize::MAX {
                    0.0
                } else {
                    self.depth_at(p, params, decoder, d_max).0
                }
            })
            .collect();
        Ok(DepthMap::from_depth(Raster2D::new(h, w, depth)?))
    }

    /// Objective and its gradient w.r.t. every head's flat parameters.
    fn objective(
        &self,
        params: &[HeadParams],
        variant: Variant,
        cfg: &FitConfig,
    ) -> Result<(f64, f64, Vec<Vec<f64>>)> {
        let decoder = variant.decoder();
        let evals: Vec<(f64, [f64; 3])> = self
            .samples
            .iter()
            .map(|p| self.depth_at(*p, params, decoder, cfg.d_max))
            .collect();
        let d: Vec<f64> = evals.iter().map(|e| e.0).collect();
        let pixel = silog_rse_loss(&d, &self.gt)?;
        let g_d = silog_rse_grad(&d, &self.gt)?;

        let mut grads: Vec<Vec<f64>> = params.iter().map(|h| vec![0.0; h.len()]).collect();
        for ((p, (_, partial)), gd) in self.samples.iter().zip(&evals).zip(&g_d) {
            let head = self.owner[*p];
            let g = &mut grads[head];
            let c = params[head].kernel.len();
            let dz = gd * partial[0];
            for (gk, e) in g[..c].iter_mut().zip(self.emb.pixel(*p)) {
                *gk += dz * e;
            }
            g[c] += gd * partial[1];
            g[c + 1] += gd * partial[2];
        }

        let mut inst_total = 0.0;
        if !self.gt_shifts.is_empty() && cfg.lambda_instance > 0.0 {
            let pred: Vec<f64> = self
                .gt_shifts
                .iter()
                .map(|(i, _)| sigmoid(params[*i].shift_logit))
                .collect();
            let target: Vec<f64> = self.gt_shifts.iter().map(|(_, s)| *s).collect();
            inst_total = instance_depth_loss(&pred, &target)?.total;
            let g_s = instance_depth_grad(&pred, &target)?;
            for (((i, _), s), gs) in self.gt_shifts.iter().zip(&pred).zip(&g_s) {
                let c = params[*i].kernel.len();
                grads[*i][c + 1] += cfg.lambda_instance * gs * s * (1.0 - s);
            }
        }
        Ok((pixel.total, inst_total, grads))
    }

    fn metrics(&self, params: &[HeadParams], variant: Variant, cfg: &FitConfig) -> Result<(FitMetrics, DPQResult, (f64, usize))> {
        let (pixel, inst, _) = self.objective(params, variant, cfg)?;
        let pred_depth = self.predicted_depth(params, variant.decoder(), cfg.d_max)?;
        let dpq = compute_dpq(
            &self.scene.panoptic,
            &pred_depth,
            &self.scene.panoptic,
            &self.scene.depth,
            &cfg.lambdas,
        )?;
        let rmse = compute_rmse(&pred_depth, &self.scene.depth)?;
        let sse = crate::metrics::squared_error_sum(&pred_depth, &self.scene.depth)?;
        Ok((metrics_from(pixel, inst, cfg, rmse, &dpq), dpq, sse))
    }
}

fn metrics_from(pixel: f64, inst: f64, cfg: &FitConfig, rmse: f64, dpq: &DPQResult) -> FitMetrics {
    FitMetrics {
        pixel_loss: pixel,
        instance_loss: inst,
        objective: pixel + cfg.lambda_instance * inst,
        rmse,
        pq: dpq.pq(),
        dpq: dpq.dpq(),
        dpq_thing: dpq.dpq_thing(),
        dpq_stuff: dpq.dpq_stuff(),
        per_lambda: dpq.per_lambda.iter().map(|l| (l.lambda, l.stats.pq())).collect(),
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

struct SceneFit {
    params: Vec<HeadParams>,
    initial: (FitMetrics, DPQResult, (f64, usize)),
    final_: (FitMetrics, DPQResult, (f64, usize)),
}

fn fit_scene(scene_index: usize, scene: &Scene, variant: Variant, cfg: &FitConfig) -> Result<SceneFit> {
    let problem = Problem::new(scene, variant, cfg)?;
    let channels = problem.emb.channels();
    let mut params: Vec<HeadParams> = problem.heads.iter().map(|_| HeadParams::zeros(channels)).collect();
    let initial = problem.metrics(&params, variant, cfg)?;

    let mut flat: Vec<f64> = params.iter().flat_map(|h| h.flat()).collect();
    let mut adam = Adam::new(flat.len());
    let stride = channels + 2;
    for it in 0..cfg.iterations {
        let (pixel, inst, grads) = problem.objective(&params, variant, cfg)?;
        let g: Vec<f64> = grads.into_iter().flatten().collect();
        if !(pixel.is_finite() && inst.is_finite()) || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "variant {variant}, scene {scene_index}, iteration {it}: pixel loss {pixel}, instance loss {inst}"
            )));
        }
        adam.step(&mut flat, &g, cfg.step_size);
        for (h, chunk) in params.iter_mut().zip(flat.chunks_exact(stride)) {
            h.set_flat(chunk);
        }
    }
    let final_ = if cfg.iterations == 0 {
        initial.clone()
    } else {
        problem.metrics(&params, variant, cfg)?
    };
    if !final_.0.objective.is_finite() {
        return Err(Error::Divergence(format!("variant {variant}, scene {scene_index}: non-finite final loss")));
    }
    Ok(SceneFit {
        params,
        initial,
        final_,
    })
}

fn aggregate(parts: &[&(FitMetrics, DPQResult, (f64, usize))], cfg: &FitConfig) -> Result<FitMetrics> {
    let n = parts.len() as f64;
    let mut dpq = parts[0].1.clone();
    for p in &parts[1..] {
        dpq.merge(&p.1)?;
    }
    let pixel = parts.iter().map(|p| p.0.pixel_loss).sum::<f64>() / n;
    let inst = parts.iter().map(|p| p.0.instance_loss).sum::<f64>() / n;
    let (sse, count) = parts.iter().fold((0.0, 0usize), |acc, p| (acc.0 + p.2 .0, acc.1 + p.2 .1));
    let rmse = (sse / count as f64).sqrt();
    Ok(metrics_from(pixel, inst, cfg, rmse, &dpq))
}

/// Fits `variant` independently on each scene and reports losses and DPQ
/// (statistics merged over all scenes) before and after fitting.
pub fn fit_micro_variants(scenes: &[Scene], variant: Variant, cfg: &FitConfig) -> Result<VariantReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("no scenes to fit".into()));
    }
    if cfg.lambdas.is_empty() {
        return Err(Error::EmptyInput("no depth thresholds".into()));
    }
    let fits = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| fit_scene(i, s, variant, cfg))
        .collect::<Result<Vec<_>>>()?;
    let initial = aggregate(&fits.iter().map(|f| &f.initial).collect::<Vec<_>>(), cfg)?;
    let final_ = aggregate(&fits.iter().map(|f| &f.final_).collect::<Vec<_>>(), cfg)?;
    let params = fits
        .into_iter()
        .zip(scenes)
        .map(|(f, s)| {
            let heads = if variant.instance_wise() {
                s.panoptic.segments().iter().map(|seg| seg.id).zip(f.params).collect()
            } else {
                vec![(SegmentRef::VOID, f.params.into_iter().next().expect("one head"))]
            };
            SceneParams { heads }
        })
        .collect();
    Ok(VariantReport {
        variant,
        iterations: cfg.iterations,
        initial,
        final_,
        params,
    })
}

/// Renders reports as an aligned text table.
pub fn format_table(reports: &[VariantReport]) -> String {
    let mut lambdas: Vec<f64> = reports
        .first()
        .map(|r| r.final_.per_lambda.iter().map(|l| l.0).collect())
        .unwrap_or_default();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    let mut out = String::from("variant  iters  pixel_loss");
    for l in &lambdas {
        out.push_str(&format!("  {:>9}", format!("l={l}")));
    }
    out.push_str("        DPQ     DPQ_th     DPQ_st       RMSE\n");
    for r in reports {
        let m = &r.final_;
        out.push_str(&format!("{:<7}  {:>5}  {:>10.5}", r.variant.to_string(), r.iterations, m.pixel_loss));
        for l in &lambdas {
            let v = m.per_lambda.iter().find(|x| x.0 == *l).map_or(f64::NAN, |x| x.1);
            out.push_str(&format!("  {:>9.4}", v));
        }
        out.push_str(&format!(
            "  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}\n",
            m.dpq, m.dpq_thing, m.dpq_stuff, m.rmse
        ));
    }
    out
}
