//! Toy kernel bundles built from a synthetic scene.
//!
//! The mask embedding has one indicator channel per ground-truth segment
//! (`+MASK_LOGIT` inside, `-MASK_LOGIT` outside) and a trailing constant
//! channel. Each segment gets a one-hot mask kernel. A near-duplicate of
//! the first kernel and a low-score distractor are appended so that
//! deduplication and discarding have something to do.
//!
//! Depth kernels are fitted by ridge regression of the depth logit onto
//! [`coordinate_embedding`] over each segment's pixels.

use crate::depth::DepthDecoder;
use crate::error::{Error, Result};
use crate::io::Bundle;
use crate::mask::sigmoid;
use crate::types::{EmbeddingMap, InstanceKernel, KernelSet};

use super::scene::{coordinate_embedding, Scene};

pub const MASK_LOGIT: f64 = 8.0;
const RIDGE: f64 = 1e-6;
const MAX_LOGIT: f64 = 9.0;

fn logit(p: f64) -> f64 {
    let p = p.clamp(sigmoid(-MAX_LOGIT), sigmoid(MAX_LOGIT));
    (p / (1.0 - p)).ln()
}

/// Solves the symmetric positive definite system `a x = b` in place.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|i, j| a[*i][col].abs().total_cmp(&a[*j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let d = a[col][col];
        if d.abs() < 1e-300 {
            continue;
        }
        let pivot_row = a[col].clone();
        for row in col + 1..n {
            let f = a[row][col] / d;
            for (x, p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = if a[row][row].abs() < 1e-300 { 0.0 } else { (b[row] - s) / a[row][row] };
    }
    x
}

fn fit_logits(emb: &EmbeddingMap, pixels: &[usize], targets: &[f64]) -> Vec<f64> {
    let c = emb.channels();
    let mut a = vec![vec![0.0; c]; c];
    let mut b = vec![0.0; c];
    for (&p, &t) in pixels.iter().zip(targets) {
        let f = emb.pixel(p);
        for i in 0..c {
            b[i] += f[i] * t;
            for j in 0..c {
                a[i][j] += f[i] * f[j];
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += RIDGE * pixels.len() as f64;
    }
    solve(a, b)
}

/// Depth kernel reproducing `depths` over `pixels` as closely as a
/// logit-linear map of the coordinate features allows.
fn depth_kernel(emb: &EmbeddingMap, pixels: &[usize], depths: &[f64], decoder: DepthDecoder, d_max: f64) -> Vec<f64> {
    let lo = depths.iter().copied().fold(f64::INFINITY, f64::min) / d_max;
    let hi = depths.iter().copied().fold(f64::NEG_INFINITY, f64::max) / d_max;
    let margin = 0.1 * (hi - lo) + 0.01;
    let (range, shift, to_norm): (f64, f64, Box<dyn Fn(f64) -> f64>) = match decoder {
        DepthDecoder::Plain => (0.0, 0.0, Box::new(move |d| d / d_max)),
        DepthDecoder::T1 => {
            let range = (hi - lo + 2.0 * margin).min(0.99);
            let shift = (lo - margin).max(1e-3);
            (range, shift, Box::new(move |d| (d / d_max - shift) / range))
        }
        DepthDecoder::T2 => {
            let range = (hi - lo + 2.0 * margin).min(0.99);
            let shift = ((lo + hi) / 2.0).clamp(1e-3, 0.999);
            (range, shift, Box::new(move |d| (d / d_max - shift) / range + 0.5))
        }
    };
    let targets: Vec<f64> = depths.iter().map(|d| logit(to_norm(*d))).collect();
    let mut kernel = fit_logits(emb, pixels, &targets);
    if decoder != DepthDecoder::Plain {
        kernel.push(logit(range));
        kernel.push(logit(shift));
    }
    kernel
}

/// Builds a bundle whose ideal prediction is `scene` itself.
pub fn toy_bundle(scene: &Scene, decoder: DepthDecoder, d_max: f64) -> Result<Bundle> {
    let pan = &scene.panoptic;
    let segments = pan.segments();
    if segments.is_empty() {
        return Err(Error::EmptyInput("scene has no segments".into()));
    }
    let (h, w) = pan.dims();
    let s = segments.len();
    let num_classes = segments.iter().map(|g| g.class_id() as usize).max().unwrap() + 1;

    let labels = pan.labels().values();
    let mask_embedding = EmbeddingMap::from_fn(s + 1, h, w, |r, c, px| {
        let label = labels[r * w + c];
        for (i, g) in segments.iter().enumerate() {
            px[i] = if g.id == label { MASK_LOGIT } else { -MASK_LOGIT };
        }
        px[s] = 1.0;
    })?;
    let depth_embedding = coordinate_embedding(h, w)?;

    let mut instances = Vec::with_capacity(s + 2);
    for (i, g) in segments.iter().enumerate() {
        let pixels: Vec<usize> = (0..h * w)
            .filter(|&p| labels[p] == g.id && scene.depth.valid().values()[p])
            .collect();
        let depths: Vec<f64> = pixels.iter().map(|&p| scene.depth.depth().values()[p]).collect();
        let depth = if pixels.is_empty() {
            let mut k = vec![0.0; decoder.scheme().kernel_len(depth_embedding.channels())];
            if decoder != DepthDecoder::Plain {
                let n = k.len();
                k[n - 2] = logit(0.5);
                k[n - 1] = logit(0.5);
            }
            k
        } else {
            depth_kernel(&depth_embedding, &pixels, &depths, decoder, d_max)
        };
        let mut class_scores = vec![0.05; num_classes];
        class_scores[g.class_id() as usize] = 0.9;
        let mut mask = vec![0.0; s + 1];
        mask[i] = 1.0;
        instances.push(InstanceKernel {
            class_scores,
            mask,
            depth,
            score: 0.9,
            is_thing: g.is_thing,
        });
    }

    let mut dup = instances[0].clone();
    dup.mask.iter_mut().for_each(|v| *v *= 0.95);
    dup.mask[s] = 0.05;
    dup.score = 0.8;
    instances.push(dup);

    let mut distractor = instances[s - 1].clone();
    distractor.mask = vec![0.0; s + 1];
    distractor.mask[s] = 1.0;
    distractor.score = 0.1;
    instances.push(distractor);

    let kernels = KernelSet::new(
        num_classes,
        s + 1,
        decoder.scheme().kernel_len(depth_embedding.channels()),
        instances,
    )?;
    Ok(Bundle {
        scheme: decoder.scheme(),
        kernels,
        mask_embedding,
        depth_embedding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{compute_pq, compute_rmse};
    use crate::pipeline::{run_inference, InferenceConfig};
    use crate::synth::scene::{generate_scene, SceneSpec};

    #[test]
    fn linear_solver() {
        let x = solve(vec![vec![4.0, 1.0], vec![1.0, 3.0]], vec![1.0, 2.0]);
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn toy_bundle_recovers_scene() {
        let scene = generate_scene(&SceneSpec::step_depth(3, 48, 64)).unwrap();
        for decoder in [DepthDecoder::Plain, DepthDecoder::T1, DepthDecoder::T2] {
            let bundle = toy_bundle(&scene, decoder, 88.0).unwrap();
            let out = run_inference(
                &bundle,
                &InferenceConfig {
                    decoder,
                    ..Default::default()
                },
            )
            .unwrap();
            // duplicate merged, distractor discarded
            assert_eq!(out.kernels.len(), bundle.kernels.len() - 1);
            assert_eq!(out.kept.len(), scene.panoptic.segments().len());
            let pq = compute_pq(out.panoptic(), &scene.panoptic).unwrap();
            assert_eq!(pq.pq(), 1.0, "{decoder:?}");
            let rmse = compute_rmse(&out.depth, &scene.depth).unwrap();
            assert!(rmse < 1.0, "{decoder:?} rmse {rmse}");
        }
    }
}
