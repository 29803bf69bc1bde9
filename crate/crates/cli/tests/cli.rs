use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdk_core::io::{read_depth, read_panoptic, write_bundle, Bundle};
use pdk_core::{DepthScheme, EmbeddingMap, KernelSet};

fn pdk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdk"))
        .args(args)
        .env_remove("PDK_JOBS")
        .output()
        .expect("run pdk")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn shipped_bundle() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_bundle/bundle.json")
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--count", "3", "--height", "24", "--width", "32", "--out-dir", s(dir)];
    args.extend_from_slice(extra);
    let o = pdk(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn eval_identical_dirs() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &[]);
    let gt = t.path().join("gt");
    let out = t.path().join("r.json");
    let o = pdk(&["eval", "--pred-dir", s(&gt), "--gt-dir", s(&gt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(&out);
    assert_eq!(r["aggregate"]["dpq"], 1.0);
    assert_eq!(r["config"]["lambdas"], serde_json::json!([0.1, 0.25, 0.5]));
    assert_eq!(r["config"]["d_max"], 88.0);
    assert!(o.stdout.is_empty());
}

#[test]
fn huge_lambda_makes_dpq_equal_pq() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &["--erode", "1", "--depth-ratio", "3.0"]);
    let out = t.path().join("r.json");
    let o = pdk(&[
        "eval",
        "--pred-dir",
        s(&t.path().join("pred")),
        "--gt-dir",
        s(&t.path().join("gt")),
        "--lambdas",
        "1e9",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(&out);
    assert_eq!(r["aggregate"]["dpq"], r["aggregate"]["pq"]);
    assert!(r["aggregate"]["pq"].as_f64().unwrap() < 1.0);
}

#[test]
fn ratio_pattern_through_eval() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &["--depth-ratio", "1.3"]);
    let out = t.path().join("r.json");
    let o = pdk(&[
        "eval",
        "--pred-dir",
        s(&t.path().join("pred")),
        "--gt-dir",
        s(&t.path().join("gt")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(&out);
    let per: Vec<f64> = r["aggregate"]["per_lambda"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["pq"].as_f64().unwrap())
        .collect();
    let pq = r["aggregate"]["pq"].as_f64().unwrap();
    assert_eq!(per[..2], [0.0, 0.0]);
    assert!((per[2] - pq).abs() <= 1e-12);
}

#[test]
fn missing_gt_file_exits_2_naming_it() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &[]);
    std::fs::remove_file(t.path().join("gt/scene_00002_depth.pdps")).unwrap();
    let o = pdk(&[
        "eval",
        "--pred-dir",
        s(&t.path().join("pred")),
        "--gt-dir",
        s(&t.path().join("gt")),
        "--out",
        s(&t.path().join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("scene_00002_depth.pdps"));
}

#[test]
fn unmatched_names_exit_2() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &[]);
    std::fs::rename(
        t.path().join("pred/scene_00001_panoptic.pdps"),
        t.path().join("pred/other_panoptic.pdps"),
    )
    .unwrap();
    let o = pdk(&[
        "eval",
        "--pred-dir",
        s(&t.path().join("pred")),
        "--gt-dir",
        s(&t.path().join("gt")),
        "--out",
        s(&t.path().join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("other") && e.contains("scene_00001"), "{e}");
}

#[test]
fn dimension_mismatch_exits_3() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), &[]);
    let o = pdk(&["synth", "--count", "3", "--height", "20", "--width", "32", "--out-dir", s(b.path())]);
    assert!(o.status.success());
    let o = pdk(&[
        "eval",
        "--pred-dir",
        s(&a.path().join("pred")),
        "--gt-dir",
        s(&b.path().join("gt")),
        "--out",
        s(&a.path().join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn reports_identical_across_jobs() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), &["--erode", "2", "--depth-noise", "0.1"]);
    let mut outputs = Vec::new();
    for jobs in ["1", "3"] {
        let out = t.path().join(format!("r{jobs}.json"));
        let o = Command::new(env!("CARGO_BIN_EXE_pdk"))
            .args([
                "eval",
                "--pred-dir",
                s(&t.path().join("pred")),
                "--gt-dir",
                s(&t.path().join("gt")),
                "--out",
                s(&out),
            ])
            .env("PDK_JOBS", jobs)
            .output()
            .unwrap();
        assert!(o.status.success());
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), &["--seed", "9", "--erode", "1", "--depth-noise", "0.2"]);
    synth(b.path(), &["--seed", "9", "--erode", "1", "--depth-noise", "0.2"]);
    for rel in ["manifest.json", "gt/scene_00000_depth.pdps", "pred/scene_00002_panoptic.pdps"] {
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
    }
}

#[test]
fn demo_on_shipped_bundle() {
    let t = tempfile::tempdir().unwrap();
    let o = pdk(&["demo", "--bundle", s(&shipped_bundle()), "--out-dir", s(t.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pan = read_panoptic(t.path().join("panoptic.pdps")).unwrap();
    assert!(!pan.has_void());
    let depth = read_depth(t.path().join("depth.pdps")).unwrap();
    assert_eq!(depth.valid_count(), pan.labels().len());
    depth.check_range(88.0).unwrap();
    let log = report(&t.path().join("instances.json"));
    assert_eq!(log["kept"].as_u64().unwrap() as usize, pan.segments().len());
}

#[test]
fn demo_with_no_instances_exits_3() {
    let t = tempfile::tempdir().unwrap();
    let emb = EmbeddingMap::new(1, 2, 2, vec![0.0; 4]).unwrap();
    let bundle = Bundle {
        scheme: DepthScheme::Triplet,
        kernels: KernelSet::new(1, 1, 3, vec![]).unwrap(),
        mask_embedding: emb.clone(),
        depth_embedding: emb,
    };
    let path = write_bundle(t.path().join("b"), &bundle).unwrap();
    let o = pdk(&["demo", "--bundle", s(&path), "--out-dir", s(&t.path().join("out"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("no instances"));
}

#[test]
fn demo_bad_bundle_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let path = t.path().join("bundle.json");
    std::fs::write(&path, "{ not json").unwrap();
    let o = pdk(&["demo", "--bundle", s(&path), "--out-dir", s(t.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_zero_iterations() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("a.json");
    let o = pdk(&["ablate", "--variants", "F", "--iters", "0", "--scenes", "2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(&out);
    let v = &r["variants"][0];
    assert_eq!(v["variant"], "F");
    assert_eq!(v["initial"], v["final"]);
    assert!(t.path().join("a.txt").exists());
}

#[test]
fn ablate_unknown_variant_exits_2() {
    let o = pdk(&["ablate", "--variants", "A,Z"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Z"));
}
