use pdk_core::depth::DepthDecoder;
use pdk_core::eval::{evaluate_dirs, EvalConfig};
use pdk_core::synth::{
    coordinate_embedding, fit_micro_variants, generate_scene, write_batch, BatchConfig, FitConfig, Scene, SceneSpec,
    Variant,
};
use pdk_core::{DepthMap, Raster2D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Replaces the scene depth with the output of random heads of `variant`'s
/// own model, so a perfect fit exists.
fn self_generated(seed: u64, variant: Variant) -> Scene {
    let mut scene = generate_scene(&SceneSpec::new(seed, 24, 32)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = coordinate_embedding(24, 32).unwrap();
    let decoder = variant.decoder();
    let segments = scene.panoptic.segments().to_vec();
    let heads: Vec<(Vec<f64>, f64, f64)> = (0..segments.len())
        .map(|_| {
            (
                (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                rng.gen_range(-2.0..0.0),
                rng.gen_range(-2.0..0.5),
            )
        })
        .collect();
    let labels = scene.panoptic.labels().values();
    let depth: Vec<f64> = (0..labels.len())
        .map(|p| {
            let head = if variant.instance_wise() {
                segments.iter().position(|s| s.id == labels[p]).unwrap()
            } else {
                0
            };
            let (k, a, b) = &heads[head];
            let z: f64 = emb.pixel(p).iter().zip(k).map(|(e, w)| e * w).sum();
            decoder.eval(z, *a, *b, 88.0).0
        })
        .collect();
    scene.depth = DepthMap::from_depth(Raster2D::new(24, 32, depth).unwrap());
    scene
}

#[test]
fn variants_fit_their_own_distribution() {
    let cfg = FitConfig::default();
    for variant in Variant::ALL {
        let scenes: Vec<Scene> = (0..4).map(|i| self_generated(70 + i, variant)).collect();
        let report = fit_micro_variants(&scenes, variant, &cfg).unwrap();
        assert!(
            report.final_.pixel_loss < 0.05,
            "variant {variant}: pixel loss {} -> {}",
            report.initial.pixel_loss,
            report.final_.pixel_loss
        );
        assert!(report.final_.pixel_loss < report.initial.pixel_loss);
        if variant.decoder() == DepthDecoder::Plain {
            assert!(report.final_.instance_loss == 0.0);
        }
    }
}

#[test]
fn zero_iterations_report_initialization() {
    let scenes: Vec<Scene> = (0..2).map(|i| generate_scene(&SceneSpec::step_depth(i, 16, 16)).unwrap()).collect();
    let cfg = FitConfig {
        iterations: 0,
        ..Default::default()
    };
    let report = fit_micro_variants(&scenes, Variant::F, &cfg).unwrap();
    assert_eq!(report.initial, report.final_);
}

#[test]
fn batch_ratio_pattern_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_batch(
        dir.path(),
        &BatchConfig {
            seed: 3,
            count: 4,
            template: SceneSpec::new(0, 24, 32),
            depth_ratio: 1.3,
            erode: 0,
            depth_noise: 0.0,
        },
    )
    .unwrap();
    assert_eq!(manifest.scenes.len(), 4);
    let report = evaluate_dirs(&dir.path().join("pred"), &dir.path().join("gt"), &EvalConfig::default()).unwrap();
    let per: Vec<f64> = report.aggregate.per_lambda.iter().map(|l| l.pq).collect();
    assert_eq!(per[..2], [0.0, 0.0]);
    assert!((per[2] - report.aggregate.pq).abs() <= 1e-12);
    assert!((report.aggregate.dpq - report.aggregate.pq / 3.0).abs() <= 1e-12);
}

#[test]
fn batches_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = BatchConfig {
        seed: 17,
        count: 3,
        template: SceneSpec::new(0, 20, 20),
        depth_ratio: 1.1,
        erode: 1,
        depth_noise: 0.05,
    };
    write_batch(a.path(), &cfg).unwrap();
    write_batch(b.path(), &cfg).unwrap();
    for rel in ["manifest.json", "gt/scene_00001_panoptic.pdps", "pred/scene_00002_depth.pdps"] {
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
}
