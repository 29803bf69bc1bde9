//! Directory evaluation and the JSON report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::DEFAULT_D_MAX;
use crate::error::{Error, Result};
use crate::io::{read_depth, read_panoptic, write_json};
use crate::metrics::{
    compute_dpq_with, squared_error_sum, DPQResult, PqConfig, DEFAULT_LAMBDAS, DEFAULT_VOID_IGNORE_FRACTION,
};
use crate::types::{DepthMap, PanopticLabelMap};

pub const PANOPTIC_SUFFIX: &str = "_panoptic.pdps";
pub const DEPTH_SUFFIX: &str = "_depth.pdps";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub lambdas: Vec<f64>,
    pub d_max: f64,
    pub void_ignore_fraction: f64,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            d_max: DEFAULT_D_MAX,
            void_ignore_fraction: DEFAULT_VOID_IGNORE_FRACTION,
            jobs: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::validation("lambdas", "at least one threshold is required"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::validation("lambdas", format!("{l} is not a positive threshold")));
        }
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return Err(Error::validation("d_max", format!("{} is not positive", self.d_max)));
        }
        if !(0.0..=1.0).contains(&self.void_ignore_fraction) {
            return Err(Error::validation("void_ignore_fraction", "must lie in [0, 1]"));
        }
        if self.jobs == 0 {
            return Err(Error::validation("jobs", "must be at least 1"));
        }
        Ok(())
    }

    fn pq_config(&self) -> PqConfig {
        PqConfig {
            void_ignore_fraction: self.void_ignore_fraction,
        }
    }
}

/// One image worth of predictions and ground truth.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub name: String,
    pub pred_panoptic: PanopticLabelMap,
    pub pred_depth: DepthMap,
    pub gt_panoptic: PanopticLabelMap,
    pub gt_depth: DepthMap,
}

#[derive(Clone, Debug)]
pub struct ImageResult {
    pub name: String,
    pub dpq: DPQResult,
    pub squared_error: f64,
    pub depth_pixels: usize,
}

pub fn evaluate_pair(pair: &ImagePair, cfg: &EvalConfig) -> Result<ImageResult> {
    let dpq = compute_dpq_with(
        &pair.pred_panoptic,
        &pair.pred_depth,
        &pair.gt_panoptic,
        &pair.gt_depth,
        &cfg.lambdas,
        &cfg.pq_config(),
    )?;
    let (squared_error, depth_pixels) = squared_error_sum(&pair.pred_depth, &pair.gt_depth)?;
    Ok(ImageResult {
        name: pair.name.clone(),
        dpq,
        squared_error,
        depth_pixels,
    })
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::validation("jobs", e.to_string()))?;
    Ok(pool.install(f))
}

/// Evaluates in parallel; results come back in input order.
pub fn evaluate_pairs(pairs: &[ImagePair], cfg: &EvalConfig) -> Result<Vec<ImageResult>> {
    cfg.validate()?;
    with_pool(cfg.jobs, || pairs.par_iter().map(|p| evaluate_pair(p, cfg)).collect())?
}

fn stems(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeSet::new();
    for entry in entries {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(PANOPTIC_SUFFIX) {
            out.insert(stem.to_string());
        }
    }
    Ok(out)
}

/// Lists the image stems present in both directories, sorted. Any stem
/// found on one side only is reported as a validation error.
pub fn pair_stems(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<String>> {
    let pred = stems(pred_dir)?;
    let gt = stems(gt_dir)?;
    let only_pred: Vec<_> = pred.difference(&gt).cloned().collect();
    let only_gt: Vec<_> = gt.difference(&pred).cloned().collect();
    if !only_pred.is_empty() || !only_gt.is_empty() {
        let mut reason = String::new();
        if !only_pred.is_empty() {
            reason += &format!("no ground truth for [{}]", only_pred.join(", "));
        }
        if !only_gt.is_empty() {
            if !reason.is_empty() {
                reason += "; ";
            }
            reason += &format!("no prediction for [{}]", only_gt.join(", "));
        }
        return Err(Error::validation("image pairs", reason));
    }
    if pred.is_empty() {
        return Err(Error::validation(
            "image pairs",
            format!("no *{PANOPTIC_SUFFIX} files in {}", gt_dir.display()),
        ));
    }
    Ok(pred.into_iter().collect())
}

fn load_pair(pred_dir: &Path, gt_dir: &Path, stem: &str) -> Result<ImagePair> {
    let file = |dir: &Path, suffix: &str| -> PathBuf { dir.join(format!("{stem}{suffix}")) };
    Ok(ImagePair {
        name: stem.to_string(),
        pred_panoptic: read_panoptic(file(pred_dir, PANOPTIC_SUFFIX))?,
        pred_depth: read_depth(file(pred_dir, DEPTH_SUFFIX))?,
        gt_panoptic: read_panoptic(file(gt_dir, PANOPTIC_SUFFIX))?,
        gt_depth: read_depth(file(gt_dir, DEPTH_SUFFIX))?,
    })
}

/// Loads and evaluates every `<stem>_panoptic.pdps` / `<stem>_depth.pdps`
/// pair. Loading and scoring happen inside the worker pool; the reduction
/// runs over sorted names so output does not depend on `jobs`.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, cfg: &EvalConfig) -> Result<Report> {
    cfg.validate()?;
    let names = pair_stems(pred_dir, gt_dir)?;
    let results: Vec<ImageResult> = with_pool(cfg.jobs, || {
        names
            .par_iter()
            .map(|n| evaluate_pair(&load_pair(pred_dir, gt_dir, n)?, cfg))
            .collect::<Result<Vec<_>>>()
    })??;
    build_report(&results, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub lambdas: Vec<f64>,
    pub d_max: f64,
    pub void_ignore_fraction: f64,
    pub match_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaEntry {
    pub lambda: f64,
    pub pq: f64,
    pub pq_thing: f64,
    pub pq_stuff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pq: f64,
    pub pq_thing: f64,
    pub pq_stuff: f64,
    pub dpq: f64,
    pub dpq_thing: f64,
    pub dpq_stuff: f64,
    /// `None` when no pixel has valid depth on both sides.
    pub rmse: Option<f64>,
    pub per_lambda: Vec<LambdaEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub class_id: u16,
    pub is_thing: bool,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub dpq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub name: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: ToolInfo,
    pub config: ConfigEcho,
    pub images_evaluated: usize,
    pub aggregate: Summary,
    pub categories: Vec<CategoryEntry>,
    pub images: Vec<ImageEntry>,
}

fn summarize(dpq: &DPQResult, sse: f64, n: usize) -> Summary {
    Summary {
        pq: dpq.pq_stats.pq(),
        pq_thing: dpq.pq_stats.pq_thing(),
        pq_stuff: dpq.pq_stats.pq_stuff(),
        dpq: dpq.dpq(),
        dpq_thing: dpq.dpq_thing(),
        dpq_stuff: dpq.dpq_stuff(),
        rmse: (n > 0).then(|| (sse / n as f64).sqrt()),
        per_lambda: dpq
            .per_lambda
            .iter()
            .map(|l| LambdaEntry {
                lambda: l.lambda,
                pq: l.stats.pq(),
                pq_thing: l.stats.pq_thing(),
                pq_stuff: l.stats.pq_stuff(),
            })
            .collect(),
    }
}

/// Aggregates per-image results. Images are reduced in name order.
pub fn build_report(results: &[ImageResult], cfg: &EvalConfig) -> Result<Report> {
    let mut sorted: Vec<&ImageResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let first = sorted
        .first()
        .ok_or_else(|| Error::EmptyInput("no images to report".into()))?;
    let mut total = first.dpq.clone();
    let (mut sse, mut n) = (0.0, 0usize);
    for (i, r) in sorted.iter().enumerate() {
        if i > 0 {
            total.merge(&r.dpq)?;
        }
        sse += r.squared_error;
        n += r.depth_pixels;
    }

    let mut per_class_dpq: BTreeMap<u16, f64> = BTreeMap::new();
    for l in &total.per_lambda {
        for (class, stats) in &l.stats.categories {
            *per_class_dpq.entry(*class).or_default() += stats.pq() / total.per_lambda.len() as f64;
        }
    }
    let categories = total
        .pq_stats
        .categories
        .iter()
        .filter(|(_, s)| s.is_present())
        .map(|(class, s)| CategoryEntry {
            class_id: *class,
            is_thing: s.is_thing,
            tp: s.tp,
            fp: s.fp,
            fn_: s.fn_,
            pq: s.pq(),
            sq: s.sq(),
            rq: s.rq(),
            dpq: per_class_dpq.get(class).copied().unwrap_or(0.0),
        })
        .collect();

    Ok(Report {
        tool: ToolInfo {
            name: "pdk".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        },
        config: ConfigEcho {
            lambdas: cfg.lambdas.clone(),
            d_max: cfg.d_max,
            void_ignore_fraction: cfg.void_ignore_fraction,
            match_iou: 0.5,
        },
        images_evaluated: sorted.len(),
        aggregate: summarize(&total, sse, n),
        categories,
        images: sorted
            .iter()
            .map(|r| ImageEntry {
                name: r.name.clone(),
                summary: summarize(&r.dpq, r.squared_error, r.depth_pixels),
            })
            .collect(),
    })
}

pub fn write_report(report: &Report, path: impl AsRef<Path>) -> Result<()> {
    write_json(path, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_depth, write_panoptic, DepthEncoding};
    use crate::synth::scene::{generate_scene, SceneSpec};

    fn write_scene(dir: &Path, stem: &str, seed: u64) {
        let s = generate_scene(&SceneSpec::new(seed, 24, 32)).unwrap();
        write_panoptic(dir.join(format!("{stem}{PANOPTIC_SUFFIX}")), &s.panoptic).unwrap();
        write_depth(dir.join(format!("{stem}{DEPTH_SUFFIX}")), &s.depth, DepthEncoding::F64).unwrap();
    }

    #[test]
    fn identical_dirs_score_one() {
        let dir = tempfile::tempdir().unwrap();
        for (i, stem) in ["b", "a", "c"].iter().enumerate() {
            write_scene(dir.path(), stem, i as u64);
        }
        let report = evaluate_dirs(dir.path(), dir.path(), &EvalConfig::default()).unwrap();
        assert_eq!(report.images_evaluated, 3);
        assert_eq!(report.images.iter().map(|i| i.name.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(report.aggregate.pq, 1.0);
        assert_eq!(report.aggregate.dpq, 1.0);
        assert_eq!(report.aggregate.rmse, Some(0.0));
    }

    #[test]
    fn unmatched_names_are_listed() {
        let pred = tempfile::tempdir().unwrap();
        let gt = tempfile::tempdir().unwrap();
        write_scene(pred.path(), "a", 0);
        write_scene(gt.path(), "a", 0);
        write_scene(pred.path(), "extra", 1);
        let err = evaluate_dirs(pred.path(), gt.path(), &EvalConfig::default()).unwrap_err();
        assert!(err.is_input_error());
        assert!(err.to_string().contains("extra"));
    }

    #[test]
    fn missing_depth_names_file() {
        let pred = tempfile::tempdir().unwrap();
        let gt = tempfile::tempdir().unwrap();
        write_scene(pred.path(), "a", 0);
        write_scene(gt.path(), "a", 0);
        fs::remove_file(gt.path().join(format!("a{DEPTH_SUFFIX}"))).unwrap();
        let err = evaluate_dirs(pred.path(), gt.path(), &EvalConfig::default()).unwrap_err();
        assert!(err.is_input_error());
        assert!(err.to_string().contains("a_depth.pdps"));
    }
}
