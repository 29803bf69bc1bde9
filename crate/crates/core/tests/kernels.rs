use pdk_core::depth::DepthDecoder;
use pdk_core::io::{read_bundle, write_bundle, Bundle};
use pdk_core::kernel_fusion::cosine_dedup;
use pdk_core::pipeline::{run_inference, InferenceConfig};
use pdk_core::synth::{coordinate_embedding, generate_scene, toy_bundle, SceneSpec};
use pdk_core::{DepthScheme, EmbeddingMap, Error, InstanceKernel, KernelSet};
use proptest::prelude::*;

fn kernel_strategy(dim: usize) -> impl Strategy<Value = InstanceKernel> {
    (
        proptest::collection::vec(-1.0f64..1.0, dim),
        0.0f64..1.0,
        0u16..2,
        any::<bool>(),
    )
        .prop_map(move |(mask, score, class, is_thing)| {
            let mut class_scores = vec![0.1, 0.1];
            class_scores[class as usize] = 0.9;
            InstanceKernel {
                class_scores,
                depth: mask.iter().map(|v| v * 0.5).collect(),
                mask,
                score,
                is_thing,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn dedup_reaches_fixed_point(
        kernels in proptest::collection::vec(kernel_strategy(3), 1..12),
        threshold in 0.5f64..0.99,
    ) {
        let mut set = KernelSet::new(2, 3, 3, kernels).unwrap();
        let mut passes = 0;
        loop {
            let next = cosine_dedup(&set, threshold).unwrap();
            prop_assert!(next.len() <= set.len());
            passes += 1;
            if next.len() == set.len() {
                break;
            }
            set = next;
        }
        prop_assert!(passes <= 12);
    }

    #[test]
    fn dedup_without_merges_is_stable(
        kernels in proptest::collection::vec(kernel_strategy(3), 1..12),
        threshold in 0.5f64..0.99,
    ) {
        let set = KernelSet::new(2, 3, 3, kernels).unwrap();
        let once = cosine_dedup(&set, threshold).unwrap();
        prop_assume!(once.len() == set.len());
        prop_assert_eq!(cosine_dedup(&once, threshold).unwrap(), once);
    }
}

fn stuff(mask: [f64; 3], score: f64) -> InstanceKernel {
    InstanceKernel {
        class_scores: vec![0.9, 0.1],
        mask: mask.to_vec(),
        depth: mask.iter().map(|v| v * 0.5).collect(),
        score,
        is_thing: false,
    }
}

// Blending moves the kept kernel, so a second pass can merge a pair the
// first pass kept apart.
#[test]
fn dedup_is_not_always_idempotent() {
    let set = KernelSet::new(
        2,
        3,
        3,
        vec![
            stuff([-0.3401323467433897, -0.6812410197597614, 0.6039826699951537], 0.5961895373511937),
            stuff([-0.9721690805546864, -0.6254373542282806, 0.47415604803667954], 0.8077372388612122),
            stuff([0.0, -0.12414638885983612, 0.35854160174806293], 0.8115941112202864),
        ],
    )
    .unwrap();
    let once = cosine_dedup(&set, 0.7252437619247374).unwrap();
    let twice = cosine_dedup(&once, 0.7252437619247374).unwrap();
    assert_eq!((once.len(), twice.len()), (2, 1));
}

#[test]
fn dedup_second_pass_rate() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let (mut merged, mut changed) = (0, 0);
    for _ in 0..2000 {
        let n = rng.gen_range(2..12);
        let kernels = (0..n)
            .map(|_| {
                let mut k = stuff([0.0; 3], rng.gen_range(0.0..1.0));
                k.mask = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                k.class_scores[0] = if rng.gen_bool(0.5) { 0.9 } else { 0.05 };
                k
            })
            .collect();
        let set = KernelSet::new(2, 3, 3, kernels).unwrap();
        let once = cosine_dedup(&set, 0.9).unwrap();
        if once.len() < set.len() {
            merged += 1;
            if cosine_dedup(&once, 0.9).unwrap().len() < once.len() {
                changed += 1;
            }
        }
    }
    eprintln!("dedup at 0.9: {changed} of {merged} merging inputs changed on a second pass");
    assert!(merged > 0);
}

fn tiny_bundle(scheme: DepthScheme, depth_channels: usize, depth_dim: usize, n: usize) -> Bundle {
    let mask_embedding = EmbeddingMap::from_fn(2, 3, 4, |r, c, px| px.copy_from_slice(&[r as f64, c as f64])).unwrap();
    let depth_embedding = EmbeddingMap::from_fn(depth_channels, 3, 4, |_, _, px| px.fill(0.25)).unwrap();
    let instances = (0..n)
        .map(|i| InstanceKernel {
            class_scores: vec![0.2, 0.8],
            mask: vec![1.0, -(i as f64)],
            depth: vec![0.1; depth_dim],
            score: 0.9,
            is_thing: true,
        })
        .collect();
    Bundle {
        scheme,
        kernels: KernelSet::new(2, 2, depth_dim, instances).unwrap(),
        mask_embedding,
        depth_embedding,
    }
}

#[test]
fn bundle_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(&SceneSpec::new(5, 20, 30)).unwrap();
    let bundle = toy_bundle(&scene, DepthDecoder::T2, 88.0).unwrap();
    let path = write_bundle(dir.path(), &bundle).unwrap();
    assert_eq!(read_bundle(&path).unwrap(), bundle);
}

#[test]
fn triplet_dims_checked_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let ok = tiny_bundle(DepthScheme::Triplet, 16, 18, 2);
    let path = write_bundle(dir.path().join("ok"), &ok).unwrap();
    assert_eq!(read_bundle(&path).unwrap().kernels.depth_dim(), 18);

    let path = write_bundle(dir.path().join("bad"), &tiny_bundle(DepthScheme::Plain, 16, 17, 2)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap().replace("\"plain\"", "\"triplet\"");
    std::fs::write(&path, text).unwrap();
    match read_bundle(&path) {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "depth_kernel_dim"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn empty_bundle_loads_but_cannot_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(dir.path(), &tiny_bundle(DepthScheme::Triplet, 4, 6, 0)).unwrap();
    let bundle = read_bundle(&path).unwrap();
    assert_eq!(bundle.kernels.len(), 0);
    assert!(matches!(run_inference(&bundle, &InferenceConfig::default()), Err(Error::NoInstances)));
}

#[test]
fn malformed_manifest_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(dir.path(), &tiny_bundle(DepthScheme::Triplet, 4, 6, 2)).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    json["scores"] = serde_json::json!([0.5, 1.5]);
    std::fs::write(&path, json.to_string()).unwrap();
    match read_bundle(&path) {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "scores[1]"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn zero_range_schemes_agree() {
    let scene = generate_scene(&SceneSpec::new(8, 24, 24)).unwrap();
    let mut bundle = toy_bundle(&scene, DepthDecoder::T2, 88.0).unwrap();
    let dim = bundle.kernels.depth_dim();
    let instances = bundle
        .kernels
        .instances()
        .iter()
        .cloned()
        .map(|mut k| {
            k.depth[dim - 2] = -40.0;
            k
        })
        .collect();
    bundle.kernels = KernelSet::new(bundle.kernels.num_classes(), bundle.kernels.mask_dim(), dim, instances).unwrap();
    let run = |decoder| {
        run_inference(
            &bundle,
            &InferenceConfig {
                decoder,
                ..Default::default()
            },
        )
        .unwrap()
        .depth
    };
    assert_eq!(run(DepthDecoder::T1), run(DepthDecoder::T2));
}

#[test]
fn coordinate_embedding_corners() {
    let e = coordinate_embedding(3, 5).unwrap();
    assert_eq!(e.pixel(0), &[1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
    assert_eq!(e.pixel(14), &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
}
