use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depth::DEFAULT_D_MAX;
use crate::error::{Error, Result};
use crate::types::{DepthMap, PanopticLabelMap, Raster2D, SegmentInfo, SegmentRef};

/// Smallest depth a synthetic ramp is clamped to, in meters.
pub const MIN_SCENE_DEPTH: f64 = 0.5;

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Closed sampling interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// Parameters of a randomly laid-out scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_things: usize,
    pub n_stuff: usize,
    /// Stuff classes are `0..stuff_classes`, thing classes follow them.
    pub stuff_classes: u16,
    pub thing_classes: u16,
    /// VOID rectangles painted over the ground truth.
    pub n_void: usize,
    pub d_max: f64,
    pub thing_base: Interval,
    pub thing_gradient: Interval,
    pub stuff_base: Interval,
    pub stuff_gradient: Interval,
}

impl SceneSpec {
    pub fn new(seed: u64, height: usize, width: usize) -> Self {
        Self {
            seed,
            height,
            width,
            n_things: 4,
            n_stuff: 2,
            stuff_classes: 4,
            thing_classes: 4,
            n_void: 0,
            d_max: DEFAULT_D_MAX,
            thing_base: Interval::new(5.0, 40.0),
            thing_gradient: Interval::new(-0.1, 0.1),
            stuff_base: Interval::new(20.0, 80.0),
            stuff_gradient: Interval::new(-0.5, 0.0),
        }
    }

    /// Flat things in front of ramped stuff: depth jumps at every thing
    /// boundary.
    pub fn step_depth(seed: u64, height: usize, width: usize) -> Self {
        Self {
            n_things: 4,
            n_stuff: 2,
            thing_base: Interval::new(6.0, 30.0),
            thing_gradient: Interval::point(0.0),
            stuff_base: Interval::new(50.0, 80.0),
            stuff_gradient: Interval::new(-0.4, -0.1),
            ..Self::new(seed, height, width)
        }
    }

    pub fn class_count(&self) -> u16 {
        self.stuff_classes + self.thing_classes
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation("size", "scene must be non-empty"));
        }
        if self.n_things + self.n_stuff == 0 {
            return Err(Error::validation("n_things", "scene needs at least one instance"));
        }
        if self.n_stuff > self.stuff_classes as usize {
            return Err(Error::validation("n_stuff", "more stuff regions than stuff classes"));
        }
        if self.n_things > 0 && self.thing_classes == 0 {
            return Err(Error::validation("thing_classes", "things requested without thing classes"));
        }
        if self.n_stuff > self.height {
            return Err(Error::validation("n_stuff", "more stuff bands than rows"));
        }
        if (self.stuff_classes as u32 + self.thing_classes as u32) >= SegmentRef::VOID_CLASS as u32 {
            return Err(Error::validation("class_count", "too many classes"));
        }
        if !(self.d_max > 0.0) {
            return Err(Error::validation("d_max", "must be positive"));
        }
        for (name, iv) in [("thing_base", self.thing_base), ("stuff_base", self.stuff_base)] {
            if !(iv.lo > 0.0 && iv.hi <= self.d_max && iv.lo <= iv.hi) {
                return Err(Error::validation(name, "base depths must lie in (0, d_max]"));
            }
        }
        Ok(())
    }
}

/// One instance of a layout: a rectangle with an affine depth ramp
/// `base + gradient * row`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceLayout {
    pub id: SegmentRef,
    pub is_thing: bool,
    pub rect: Rect,
    pub base_depth: f64,
    pub gradient: f64,
}

impl InstanceLayout {
    pub fn depth_at(&self, row: usize, d_max: f64) -> f64 {
        (self.base_depth + self.gradient * row as f64).clamp(MIN_SCENE_DEPTH, d_max)
    }
}

/// Explicit scene geometry. Stuff is painted first, then things from far
/// to near (by base depth), then VOID rectangles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub height: usize,
    pub width: usize,
    pub d_max: f64,
    pub stuff: Vec<InstanceLayout>,
    pub things: Vec<InstanceLayout>,
    pub voids: Vec<Rect>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub layout: InstanceLayout,
    pub class_id: u16,
    pub instance_id: u16,
    pub area: usize,
}

/// Human-readable record of how a scene was built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub seed: Option<u64>,
    pub height: usize,
    pub width: usize,
    pub d_max: f64,
    pub segments: Vec<ManifestEntry>,
    /// Instances fully occluded by nearer ones.
    pub dropped: Vec<InstanceLayout>,
    pub voids: Vec<Rect>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub panoptic: PanopticLabelMap,
    pub depth: DepthMap,
    pub manifest: SceneManifest,
}

pub fn render_layout(layout: &SceneLayout) -> Result<Scene> {
    let (h, w) = (layout.height, layout.width);
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let mut instances: Vec<InstanceLayout> = layout.stuff.clone();
    let mut things = layout.things.clone();
    // far to near; stable so equal depths keep layout order
    things.sort_by(|a, b| b.base_depth.total_cmp(&a.base_depth));
    instances.extend(things);

    for (i, inst) in instances.iter().enumerate() {
        if inst.id.is_void() {
            return Err(Error::validation("layout", "instances cannot use the VOID class"));
        }
        let r = inst.rect;
        for row in r.top..(r.top + r.height).min(h) {
            for col in r.left..(r.left + r.width).min(w) {
                owner[row * w + col] = Some(i);
            }
        }
    }
    for v in &layout.voids {
        for row in v.top..(v.top + v.height).min(h) {
            for col in v.left..(v.left + v.width).min(w) {
                owner[row * w + col] = None;
            }
        }
    }

    let mut area = vec![0usize; instances.len()];
    for o in owner.iter().flatten() {
        area[*o] += 1;
    }
    let mut seen = std::collections::HashSet::new();
    for inst in &instances {
        if !seen.insert(inst.id) {
            return Err(Error::validation("layout", format!("duplicate segment id {:?}", inst.id)));
        }
    }

    let mut labels = Vec::with_capacity(h * w);
    let mut depth = Vec::with_capacity(h * w);
    for (p, o) in owner.iter().enumerate() {
        match o {
            Some(i) => {
                labels.push(instances[*i].id);
                depth.push(instances[*i].depth_at(p / w, layout.d_max));
            }
            None => {
                labels.push(SegmentRef::VOID);
                depth.push(0.0);
            }
        }
    }

    let mut segments = Vec::new();
    let mut entries = Vec::new();
    let mut dropped = Vec::new();
    for (inst, a) in instances.iter().zip(&area) {
        if *a == 0 {
            dropped.push(*inst);
            continue;
        }
        segments.push(SegmentInfo {
            id: inst.id,
            is_thing: inst.is_thing,
        });
        entries.push(ManifestEntry {
            layout: *inst,
            class_id: inst.id.class_id(),
            instance_id: inst.id.instance_id(),
            area: *a,
        });
    }
    let panoptic = PanopticLabelMap::new(Raster2D::new(h, w, labels)?, segments)?;
    let depth_raster = Raster2D::new(h, w, depth)?;
    let valid = panoptic.labels().map(|l| !l.is_void());
    Ok(Scene {
        panoptic,
        depth: DepthMap::new(depth_raster, valid)?,
        manifest: SceneManifest {
            seed: None,
            height: h,
            width: w,
            d_max: layout.d_max,
            segments: entries,
            dropped,
            voids: layout.voids.clone(),
        },
    })
}

fn sample_rect(rng: &mut ChaCha8Rng, h: usize, w: usize, min_frac: f64, max_frac: f64) -> Rect {
    let dim = |rng: &mut ChaCha8Rng, n: usize| {
        let lo = ((n as f64 * min_frac).round() as usize).max(1);
        let hi = ((n as f64 * max_frac).round() as usize).clamp(lo, n);
        rng.gen_range(lo..=hi)
    };
    let height = dim(rng, h);
    let width = dim(rng, w);
    Rect {
        top: rng.gen_range(0..=h - height),
        left: rng.gen_range(0..=w - width),
        height,
        width,
    }
}

/// Samples a layout from `spec`; every draw comes from one ChaCha8 stream
/// seeded with `spec.seed`.
pub fn sample_layout(spec: &SceneSpec) -> Result<SceneLayout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);

    let mut pool: Vec<u16> = (0..spec.stuff_classes).collect();
    let mut stuff = Vec::with_capacity(spec.n_stuff);
    for k in 0..spec.n_stuff {
        let class = pool.swap_remove(rng.gen_range(0..pool.len()));
        let top = k * h / spec.n_stuff;
        let bottom = (k + 1) * h / spec.n_stuff;
        stuff.push(InstanceLayout {
            id: SegmentRef::new(class, 0),
            is_thing: false,
            rect: Rect {
                top,
                left: 0,
                height: bottom - top,
                width: w,
            },
            base_depth: spec.stuff_base.sample(&mut rng),
            gradient: spec.stuff_gradient.sample(&mut rng),
        });
    }

    let mut next_instance = vec![0u16; spec.thing_classes as usize];
    let mut things = Vec::with_capacity(spec.n_things);
    for _ in 0..spec.n_things {
        let k = rng.gen_range(0..spec.thing_classes);
        next_instance[k as usize] += 1;
        things.push(InstanceLayout {
            id: SegmentRef::new(spec.stuff_classes + k, next_instance[k as usize]),
            is_thing: true,
            rect: sample_rect(&mut rng, h, w, 0.15, 0.45),
            base_depth: spec.thing_base.sample(&mut rng),
            gradient: spec.thing_gradient.sample(&mut rng),
        });
    }

    let voids = (0..spec.n_void).map(|_| sample_rect(&mut rng, h, w, 0.1, 0.25)).collect();
    Ok(SceneLayout {
        height: h,
        width: w,
        d_max: spec.d_max,
        stuff,
        things,
        voids,
    })
}

/// Deterministic ground-truth panoptic and depth rasters for `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let mut scene = render_layout(&sample_layout(spec)?)?;
    scene.manifest.seed = Some(spec.seed);
    Ok(scene)
}

/// Seed of the `index`-th scene of a batch (SplitMix64 finalizer).
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Predicted depth is `depth_ratio * gt`.
    pub depth_ratio: f64,
    /// Thing segments lose this many pixels (Chebyshev) along every border
    /// with another segment.
    pub erode: usize,
    /// Standard deviation of multiplicative Gaussian depth noise.
    pub depth_noise: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            depth_ratio: 1.0,
            erode: 0,
            depth_noise: 0.0,
            seed: 0,
        }
    }
}

/// Builds a prediction from ground truth.
///
/// An eroded thing pixel takes the first differing non-VOID label found
/// scanning outward ring by ring (row-major within a ring); image borders
/// do not erode. Erosion is evaluated against the original labels.
pub fn perturb_prediction(
    gt_pan: &PanopticLabelMap,
    gt_depth: &DepthMap,
    cfg: &PerturbConfig,
) -> Result<(PanopticLabelMap, DepthMap)> {
    if !(cfg.depth_ratio > 0.0) {
        return Err(Error::Domain(format!("depth ratio {} must be positive", cfg.depth_ratio)));
    }
    gt_pan.labels().check_dims(gt_depth.depth(), "panoptic vs depth")?;
    let (h, w) = gt_pan.dims();
    let src = gt_pan.labels().values();
    let thing: std::collections::HashMap<SegmentRef, bool> =
        gt_pan.segments().iter().map(|s| (s.id, s.is_thing)).collect();

    let mut labels = src.to_vec();
    if cfg.erode > 0 {
        let r = cfg.erode as i64;
        for row in 0..h {
            for col in 0..w {
                let here = src[row * w + col];
                if here.is_void() || !thing.get(&here).copied().unwrap_or(false) {
                    continue;
                }
                let mut eroded = false;
                let mut target = None;
                'rings: for ring in 1..=r {
                    for dr in -ring..=ring {
                        for dc in -ring..=ring {
                            if dr.abs() != ring && dc.abs() != ring {
                                continue;
                            }
                            let (nr, nc) = (row as i64 + dr, col as i64 + dc);
                            if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                                continue;
                            }
                            let other = src[nr as usize * w + nc as usize];
                            if other != here {
                                eroded = true;
                                if !other.is_void() {
                                    target = Some(other);
                                    break 'rings;
                                }
                            }
                        }
                    }
                }
                if eroded {
                    labels[row * w + col] = target.unwrap_or(SegmentRef::VOID);
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = if cfg.depth_noise > 0.0 {
        Some(Normal::new(0.0, cfg.depth_noise).map_err(|e| Error::Domain(e.to_string()))?)
    } else {
        None
    };
    let depth: Vec<f64> = gt_depth
        .depth()
        .values()
        .iter()
        .zip(gt_depth.valid().values())
        .map(|(d, v)| {
            if !*v {
                return *d;
            }
            let mut out = d * cfg.depth_ratio;
            if let Some(n) = &noise {
                out *= (1.0 + n.sample(&mut rng)).max(1e-3);
            }
            out
        })
        .collect();

    let pan = PanopticLabelMap::new(Raster2D::new(h, w, labels)?, gt_pan.segments().to_vec())?;
    let depth = DepthMap::new(Raster2D::new(h, w, depth)?, gt_depth.valid().clone())?;
    Ok((pan, depth))
}

/// Smooth per-pixel features `[1, y, x, y^2, xy, x^2]` with `x, y` in
/// `[-1, 1]`; used as the shared depth embedding in synthetic fits.
pub fn coordinate_embedding(height: usize, width: usize) -> Result<crate::types::EmbeddingMap> {
    let norm = |v: usize, n: usize| if n > 1 { 2.0 * v as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    crate::types::EmbeddingMap::from_fn(6, height, width, |r, c, px| {
        let (y, x) = (norm(r, height), norm(c, width));
        px.copy_from_slice(&[1.0, y, x, y * y, x * y, x * x]);
    })
}
