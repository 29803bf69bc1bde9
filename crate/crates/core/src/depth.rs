//! Instance depth generation.
//!
//! Each instance predicts a normalized depth map `D' = sigmoid(K_d . E_d)`
//! and, under the triplet scheme, a range `d_r` and shift `d_s` (both after
//! a sigmoid). Two decoders map the triplet back to meters:
//!
//! * T1: `d_max * (d_r * D' + d_s)`
//! * T2: `d_max * (d_r * (D' - 0.5) + d_s)`, floored at [`T2_DEPTH_FLOOR`]
//!
//! Instance maps are stitched into one image depth map through the
//! panoptic segmentation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{sigmoid, sigmoid_conv};
use crate::types::{DepthMap, DepthScheme, EmbeddingMap, KernelSet, PanopticLabelMap, Raster2D};

/// Global depth scale in meters.
pub const DEFAULT_D_MAX: f64 = 88.0;

/// Lower bound applied to T2 output, in meters.
pub const T2_DEPTH_FLOOR: f64 = 0.01;

/// Depth kernel split into its convolution part and optional scalar logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitKernel<'a> {
    pub core: &'a [f64],
    pub raw_range: Option<f64>,
    pub raw_shift: Option<f64>,
}

pub fn split_depth_kernel(kernel: &[f64], scheme: DepthScheme, embed_channels: usize) -> Result<SplitKernel<'_>> {
    let want = scheme.kernel_len(embed_channels);
    if kernel.len() != want {
        return Err(Error::dim(format!(
            "{scheme:?} depth kernel for {embed_channels} channels must have length {want}, got {}",
            kernel.len()
        )));
    }
    Ok(match scheme {
        DepthScheme::Plain => SplitKernel {
            core: kernel,
            raw_range: None,
            raw_shift: None,
        },
        DepthScheme::Triplet => SplitKernel {
            core: &kernel[..embed_channels],
            raw_range: Some(kernel[embed_channels]),
            raw_shift: Some(kernel[embed_channels + 1]),
        },
    })
}

/// Normalized instance depth `D'`; same machinery as the soft masks.
pub fn generate_normalized_depth(core: &[f64], emb: &EmbeddingMap) -> Result<Raster2D<f64>> {
    sigmoid_conv(core, emb)
}

/// Normalized depth plus instance range and shift.
///
/// Network outputs lie strictly inside (0,1); the closed interval is
/// accepted so that limiting cases can be evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthTriplet {
    normalized: Raster2D<f64>,
    range: f64,
    shift: f64,
}

impl DepthTriplet {
    pub fn new(normalized: Raster2D<f64>, range: f64, shift: f64) -> Result<Self> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(range) {
            return Err(Error::Domain(format!("depth range {range} not in [0,1]")));
        }
        if !unit(shift) {
            return Err(Error::Domain(format!("depth shift {shift} not in [0,1]")));
        }
        if let Some(v) = normalized.values().iter().find(|v| !unit(**v)) {
            return Err(Error::Domain(format!("normalized depth {v} not in [0,1]")));
        }
        Ok(Self {
            normalized,
            range,
            shift,
        })
    }

    pub fn normalized(&self) -> &Raster2D<f64> {
        &self.normalized
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }
}

fn check_d_max(d_max: f64) -> Result<()> {
    if d_max > 0.0 && d_max.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("d_max must be positive, got {d_max}")))
    }
}

pub fn unnormalize_t1(t: &DepthTriplet, d_max: f64) -> Result<Raster2D<f64>> {
    check_d_max(d_max)?;
    Ok(t.normalized.map(|n| d_max * (t.range * n + t.shift)))
}

pub fn unnormalize_t2(t: &DepthTriplet, d_max: f64) -> Result<Raster2D<f64>> {
    unnormalize_t2_with_floor(t, d_max, T2_DEPTH_FLOOR)
}

pub fn unnormalize_t2_with_floor(t: &DepthTriplet, d_max: f64, floor: f64) -> Result<Raster2D<f64>> {
    check_d_max(d_max)?;
    Ok(t.normalized
        .map(|n| (d_max * (t.range * (n - 0.5) + t.shift)).max(floor)))
}

/// How a normalized depth map is turned into meters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthDecoder {
    /// `d_max * D'`, no instance scalars.
    Plain,
    T1,
    T2,
}

impl DepthDecoder {
    pub fn scheme(self) -> DepthScheme {
        match self {
            DepthDecoder::Plain => DepthScheme::Plain,
            DepthDecoder::T1 | DepthDecoder::T2 => DepthScheme::Triplet,
        }
    }

    /// Depth at one pixel from the pre-sigmoid logits, with the partial
    /// derivatives `[d/dz, d/d(range logit), d/d(shift logit)]`.
    ///
    /// The range and shift logits are ignored by [`DepthDecoder::Plain`].
    /// Clamped T2 outputs have zero gradient.
    pub fn eval(self, z: f64, range_logit: f64, shift_logit: f64, d_max: f64) -> (f64, [f64; 3]) {
        let n = sigmoid(z);
        let dn = n * (1.0 - n);
        match self {
            DepthDecoder::Plain => (d_max * n, [d_max * dn, 0.0, 0.0]),
            DepthDecoder::T1 => {
                let (r, s) = (sigmoid(range_logit), sigmoid(shift_logit));
                let d = d_max * (r * n + s);
                (d, [d_max * r * dn, d_max * n * r * (1.0 - r), d_max * s * (1.0 - s)])
            }
            DepthDecoder::T2 => {
                let (r, s) = (sigmoid(range_logit), sigmoid(shift_logit));
                let d = d_max * (r * (n - 0.5) + s);
                if d < T2_DEPTH_FLOOR {
                    (T2_DEPTH_FLOOR, [0.0; 3])
                } else {
                    (d, [d_max * r * dn, d_max * (n - 0.5) * r * (1.0 - r), d_max * s * (1.0 - s)])
                }
            }
        }
    }
}

/// Depth prediction of one instance before aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceDepth {
    pub depth: Raster2D<f64>,
    /// `(range, shift)` after the sigmoid, triplet decoders only.
    pub triplet: Option<(f64, f64)>,
}

/// Runs every depth kernel over the depth embedding and decodes to meters.
pub fn instance_depths(
    kernels: &KernelSet,
    emb: &EmbeddingMap,
    decoder: DepthDecoder,
    d_max: f64,
) -> Result<Vec<InstanceDepth>> {
    check_d_max(d_max)?;
    kernels
        .instances()
        .iter()
        .map(|k| {
            let split = split_depth_kernel(&k.depth, decoder.scheme(), emb.channels())?;
            let normalized = generate_normalized_depth(split.core, emb)?;
            match decoder {
                DepthDecoder::Plain => Ok(InstanceDepth {
                    depth: normalized.map(|n| d_max * n),
                    triplet: None,
                }),
                DepthDecoder::T1 | DepthDecoder::T2 => {
                    let range = sigmoid(split.raw_range.expect("triplet"));
                    let shift = sigmoid(split.raw_shift.expect("triplet"));
                    let t = DepthTriplet::new(normalized, range, shift)?;
                    let depth = if decoder == DepthDecoder::T1 {
                        unnormalize_t1(&t, d_max)?
                    } else {
                        unnormalize_t2(&t, d_max)?
                    };
                    Ok(InstanceDepth {
                        depth,
                        triplet: Some((range, shift)),
                    })
                }
            }
        })
        .collect()
}

/// Whole-image depth: each pixel takes the depth of the instance that owns
/// it in `pan`. VOID pixels come out invalid.
pub fn aggregate_depth(
    instance_depths: &[Raster2D<f64>],
    pan: &PanopticLabelMap,
    segment_to_instance: &HashMap<crate::types::SegmentRef, usize>,
) -> Result<DepthMap> {
    for seg in pan.segments() {
        match segment_to_instance.get(&seg.id) {
            Some(i) if *i < instance_depths.len() => {
                pan.labels().check_dims(&instance_depths[*i], "instance depth vs panoptic map")?;
            }
            _ => return Err(Error::MissingDepth(seg.id.0)),
        }
    }
    let (h, w) = pan.dims();
    let mut depth = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    for (p, label) in pan.labels().values().iter().enumerate() {
        if label.is_void() {
            continue;
        }
        let i = segment_to_instance[label];
        let d = instance_depths[i].values()[p];
        depth[p] = d;
        valid[p] = d.is_finite() && d > 0.0;
    }
    DepthMap::new(Raster2D::new(h, w, depth)?, Raster2D::new(h, w, valid)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{SegmentInfo, SegmentRef};
    use approx::assert_relative_eq;

    fn triplet(n: f64, r: f64, s: f64) -> DepthTriplet {
        DepthTriplet::new(Raster2D::filled(2, 2, n).unwrap(), r, s).unwrap()
    }

    #[test]
    fn split_triplet_sixteen() {
        let k: Vec<f64> = (0..18).map(f64::from).collect();
        let s = split_depth_kernel(&k, DepthScheme::Triplet, 16).unwrap();
        assert_eq!(s.core.len(), 16);
        assert_eq!(s.raw_range, Some(16.0));
        assert_eq!(s.raw_shift, Some(17.0));
    }

    #[test]
    fn split_plain_passthrough() {
        let k: Vec<f64> = (0..16).map(f64::from).collect();
        let s = split_depth_kernel(&k, DepthScheme::Plain, 16).unwrap();
        assert_eq!(s.core, &k[..]);
        assert_eq!((s.raw_range, s.raw_shift), (None, None));
    }

    #[test]
    fn split_wrong_length() {
        let k = vec![0.0; 17];
        assert!(matches!(
            split_depth_kernel(&k, DepthScheme::Triplet, 16),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn normalized_depth_matches_mask_machinery() {
        let emb = EmbeddingMap::new(2, 1, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let d = generate_normalized_depth(&[10.0, 0.0], &emb).unwrap();
        assert_relative_eq!(d.values()[0], 0.9999546021312976, epsilon = 1e-15);
        assert_eq!(d.values()[1], 0.5);
    }

    #[test]
    fn t1_examples() {
        assert!(unnormalize_t1(&triplet(0.0, 0.5, 0.25), 88.0)
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 22.0));
        assert!(unnormalize_t1(&triplet(0.7, 0.0, 0.25), 88.0)
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 22.0));
        assert!(unnormalize_t1(&triplet(1.0, 1.0, 0.0), 88.0)
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 88.0));
    }

    #[test]
    fn t2_examples() {
        assert!(unnormalize_t2(&triplet(0.5, 0.8, 0.3), 88.0)
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 88.0 * 0.3));
        assert!(unnormalize_t2(&triplet(1.0, 0.5, 0.5), 88.0)
            .unwrap()
            .values()
            .iter()
            .all(|v| *v == 66.0));
        let a = unnormalize_t1(&triplet(0.3, 0.0, 0.4), 88.0).unwrap();
        let b = unnormalize_t2(&triplet(0.3, 0.0, 0.4), 88.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn t2_floor() {
        let d = unnormalize_t2(&triplet(0.0, 1.0, 0.1), 88.0).unwrap();
        assert!(d.values().iter().all(|v| *v == T2_DEPTH_FLOOR));
    }

    #[test]
    fn bad_d_max() {
        assert!(unnormalize_t1(&triplet(0.0, 0.5, 0.5), 0.0).is_err());
        assert!(unnormalize_t2(&triplet(0.0, 0.5, 0.5), -1.0).is_err());
    }

    fn halves() -> PanopticLabelMap {
        let (a, b) = (SegmentRef::new(1, 1), SegmentRef::new(2, 0));
        let labels = Raster2D::from_fn(2, 4, |_, c| if c < 2 { a } else { b }).unwrap();
        PanopticLabelMap::new(
            labels,
            vec![
                SegmentInfo { id: a, is_thing: true },
                SegmentInfo { id: b, is_thing: false },
            ],
        )
        .unwrap()
    }

    #[test]
    fn aggregate_step() {
        let pan = halves();
        let maps = vec![Raster2D::filled(2, 4, 10.0).unwrap(), Raster2D::filled(2, 4, 30.0).unwrap()];
        let lookup = HashMap::from([(SegmentRef::new(1, 1), 0), (SegmentRef::new(2, 0), 1)]);
        let d = aggregate_depth(&maps, &pan, &lookup).unwrap();
        assert_eq!(d.depth().values(), &[10.0, 10.0, 30.0, 30.0, 10.0, 10.0, 30.0, 30.0]);
        assert_eq!(d.valid_count(), 8);
    }

    #[test]
    fn aggregate_single_instance() {
        let a = SegmentRef::new(3, 0);
        let pan = PanopticLabelMap::from_labels(Raster2D::filled(2, 3, a).unwrap());
        let m = Raster2D::from_fn(2, 3, |r, c| 1.0 + (r * 3 + c) as f64).unwrap();
        let d = aggregate_depth(std::slice::from_ref(&m), &pan, &HashMap::from([(a, 0)])).unwrap();
        assert_eq!(d.depth(), &m);
    }

    #[test]
    fn aggregate_missing() {
        let pan = halves();
        let maps = vec![Raster2D::filled(2, 4, 10.0).unwrap()];
        let lookup = HashMap::from([(SegmentRef::new(1, 1), 0)]);
        assert!(matches!(aggregate_depth(&maps, &pan, &lookup), Err(Error::MissingDepth(_))));
    }

    #[test]
    fn decoder_matches_raster_path() {
        let (z, a, b) = (0.4, -0.3, 0.2);
        let (n, r, s) = (sigmoid(z), sigmoid(a), sigmoid(b));
        let t = DepthTriplet::new(Raster2D::filled(1, 1, n).unwrap(), r, s).unwrap();
        assert_eq!(DepthDecoder::T1.eval(z, a, b, 88.0).0, unnormalize_t1(&t, 88.0).unwrap().values()[0]);
        assert_eq!(DepthDecoder::T2.eval(z, a, b, 88.0).0, unnormalize_t2(&t, 88.0).unwrap().values()[0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn t1_bounds(n in 0.0f64..=1.0, r in 0.0f64..=1.0, s in 0.0f64..=1.0) {
                let d = unnormalize_t1(&triplet(n, r, s), 88.0).unwrap().values()[0];
                let lo = 88.0 * s;
                let hi = 88.0 * (r + s);
                prop_assert!(d >= lo * (1.0 - 1e-12) && d <= hi * (1.0 + 1e-12));
            }

            #[test]
            fn t2_bounds(n in 0.0f64..=1.0, r in 0.0f64..=1.0, s in 0.0f64..=1.0) {
                let d = unnormalize_t2(&triplet(n, r, s), 88.0).unwrap().values()[0];
                let lo = (88.0 * (s - r / 2.0)).max(T2_DEPTH_FLOOR);
                let hi = (88.0 * (s + r / 2.0)).max(T2_DEPTH_FLOOR);
                prop_assert!(d >= lo - 1e-12 && d <= hi + 1e-12);
            }

            #[test]
            fn decoder_gradient_fd(z in -4.0f64..4.0, a in -4.0f64..4.0, b in -4.0f64..4.0) {
                for dec in [DepthDecoder::Plain, DepthDecoder::T1, DepthDecoder::T2] {
                    let (d0, g) = dec.eval(z, a, b, 88.0);
                    prop_assume!(d0 > 2.0 * T2_DEPTH_FLOOR);
                    let h = 1e-6;
                    let fd = [
                        (dec.eval(z + h, a, b, 88.0).0 - dec.eval(z - h, a, b, 88.0).0) / (2.0 * h),
                        (dec.eval(z, a + h, b, 88.0).0 - dec.eval(z, a - h, b, 88.0).0) / (2.0 * h),
                        (dec.eval(z, a, b + h, 88.0).0 - dec.eval(z, a, b - h, 88.0).0) / (2.0 * h),
                    ];
                    for (x, y) in g.iter().zip(&fd) {
                        prop_assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()));
                    }
                }
            }
        }
    }
}
