//! Writing batches of ground-truth / prediction scene pairs.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{DEPTH_SUFFIX, PANOPTIC_SUFFIX};
use crate::io::{write_depth, write_json, write_panoptic, DepthEncoding};

use super::scene::{generate_scene, perturb_prediction, scene_seed, PerturbConfig, SceneManifest, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub seed: u64,
    pub count: usize,
    /// Scene template; its seed is replaced per scene.
    pub template: SceneSpec,
    pub depth_ratio: f64,
    pub erode: usize,
    pub depth_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchScene {
    pub name: String,
    pub scene: SceneManifest,
    pub perturbation: PerturbConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub config: BatchConfig,
    pub scenes: Vec<BatchScene>,
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Writes `gt/` and `pred/` raster pairs plus `manifest.json` under `out`.
/// Scenes are generated in parallel, each from its own derived seed.
pub fn write_batch(out: &Path, cfg: &BatchConfig) -> Result<BatchManifest> {
    if cfg.count == 0 {
        return Err(Error::validation("count", "must be at least 1"));
    }
    let gt_dir = out.join("gt");
    let pred_dir = out.join("pred");
    for d in [&gt_dir, &pred_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let scenes = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec {
                seed: scene_seed(cfg.seed, i as u64),
                ..cfg.template.clone()
            };
            let scene = generate_scene(&spec)?;
            let perturbation = PerturbConfig {
                depth_ratio: cfg.depth_ratio,
                erode: cfg.erode,
                depth_noise: cfg.depth_noise,
                seed: scene_seed(!cfg.seed, i as u64),
            };
            let (pred_pan, pred_depth) = perturb_prediction(&scene.panoptic, &scene.depth, &perturbation)?;
            let name = scene_name(i);
            let file = |dir: &Path, suffix: &str| dir.join(format!("{name}{suffix}"));
            write_panoptic(file(&gt_dir, PANOPTIC_SUFFIX), &scene.panoptic)?;
            write_depth(file(&gt_dir, DEPTH_SUFFIX), &scene.depth, DepthEncoding::F64)?;
            write_panoptic(file(&pred_dir, PANOPTIC_SUFFIX), &pred_pan)?;
            write_depth(file(&pred_dir, DEPTH_SUFFIX), &pred_depth, DepthEncoding::F64)?;
            Ok(BatchScene {
                name,
                scene: scene.manifest,
                perturbation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = BatchManifest {
        config: cfg.clone(),
        scenes,
    };
    write_json(out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
