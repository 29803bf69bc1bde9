//! PDPS raster container and kernel bundles.
//!
//! PDPS layout, little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PDPS"
//! 4       2     version (1)
//! 6       2     dtype: 1 = u32 segment labels, 2 = u16 depth (raw / 256 m,
//!               0 = invalid), 3 = f64 depth
//! 8       4     height
//! 12      4     width
//! 16      ...   row-major payload
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel_fusion::{fuse_regions, select_positions, KernelWeightMap};
use crate::types::{
    DepthMap, DepthScheme, EmbeddingMap, InstanceKernel, InstanceKind, KernelSet, PanopticLabelMap, Raster2D,
    SegmentRef,
};

pub const MAGIC: [u8; 4] = *b"PDPS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

/// Depth resolution of the u16 encoding, in raw units per meter.
pub const U16_DEPTH_SCALE: f64 = 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum DType {
    Labels = 1,
    DepthU16 = 2,
    DepthF64 = 3,
}

impl DType {
    fn from_code(code: u16) -> Option<Self> {
        match code {
            1 => Some(DType::Labels),
            2 => Some(DType::DepthU16),
            3 => Some(DType::DepthF64),
            _ => None,
        }
    }

    fn elem_size(self) -> usize {
        match self {
            DType::Labels => 4,
            DType::DepthU16 => 2,
            DType::DepthF64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RasterData {
    Labels(Raster2D<SegmentRef>),
    DepthU16(Raster2D<u16>),
    DepthF64(Raster2D<f64>),
}

impl RasterData {
    pub fn dtype(&self) -> DType {
        match self {
            RasterData::Labels(_) => DType::Labels,
            RasterData::DepthU16(_) => DType::DepthU16,
            RasterData::DepthF64(_) => DType::DepthF64,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            RasterData::Labels(r) => r.dims(),
            RasterData::DepthU16(r) => r.dims(),
            RasterData::DepthF64(r) => r.dims(),
        }
    }

    /// Depth rasters as a [`DepthMap`]; label rasters are rejected.
    pub fn to_depth_map(&self) -> Option<DepthMap> {
        match self {
            RasterData::DepthU16(r) => Some(depth_from_u16(r)),
            RasterData::DepthF64(r) => Some(DepthMap::from_depth(r.clone())),
            RasterData::Labels(_) => None,
        }
    }
}

pub fn depth_from_u16(raw: &Raster2D<u16>) -> DepthMap {
    let depth = raw.map(|v| *v as f64 / U16_DEPTH_SCALE);
    let valid = raw.map(|v| *v != 0);
    DepthMap::new(depth, valid).expect("u16 depths are non-negative")
}

/// Rounds to the nearest 1/256 m; invalid pixels and depths that round to 0
/// become raw 0, depths past the u16 range saturate.
pub fn depth_to_u16(depth: &DepthMap) -> Raster2D<u16> {
    let values = depth
        .depth()
        .values()
        .iter()
        .zip(depth.valid().values())
        .map(|(d, v)| {
            if *v {
                (d * U16_DEPTH_SCALE).round().clamp(0.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect();
    Raster2D::new(depth.depth().height(), depth.depth().width(), values).expect("same dims")
}

/// f64 depth raster with invalid pixels written as 0.
pub fn depth_to_f64(depth: &DepthMap) -> Raster2D<f64> {
    let values = depth
        .depth()
        .values()
        .iter()
        .zip(depth.valid().values())
        .map(|(d, v)| if *v { *d } else { 0.0 })
        .collect();
    Raster2D::new(depth.depth().height(), depth.depth().width(), values).expect("same dims")
}

pub fn encode_raster(data: &RasterData) -> Vec<u8> {
    let (h, w) = data.dims();
    let dtype = data.dtype();
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * dtype.elem_size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dtype as u16).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    match data {
        RasterData::Labels(r) => r.values().iter().for_each(|v| out.extend_from_slice(&v.0.to_le_bytes())),
        RasterData::DepthU16(r) => r.values().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        RasterData::DepthF64(r) => r.values().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode_raster(bytes: &[u8], path: &Path) -> Result<RasterData> {
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(format(format!("magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(u16_at(6)).ok_or_else(|| format(format!("unknown dtype {}", u16_at(6))))?;
    let (h, w) = (u32_at(8) as usize, u32_at(12) as usize);
    if h == 0 || w == 0 {
        return Err(format(format!("empty raster {h}x{w}")));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(dtype.elem_size()))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| format(format!("raster {h}x{w} too large")))?;
    if bytes.len() < expected {
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(format(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let payload = &bytes[HEADER_LEN..];
    Ok(match dtype {
        DType::Labels => RasterData::Labels(Raster2D::new(
            h,
            w,
            payload
                .chunks_exact(4)
                .map(|c| SegmentRef(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect(),
        )?),
        DType::DepthU16 => RasterData::DepthU16(Raster2D::new(
            h,
            w,
            payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
        )?),
        DType::DepthF64 => RasterData::DepthF64(Raster2D::new(
            h,
            w,
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        )?),
    })
}

pub fn write_raster(path: impl AsRef<Path>, data: &RasterData) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raster(data)).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<RasterData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes, path)
}

pub fn write_panoptic(path: impl AsRef<Path>, pan: &PanopticLabelMap) -> Result<()> {
    write_raster(path, &RasterData::Labels(pan.labels().clone()))
}

/// Reads a label raster; segments with instance id 0 are taken as stuff.
pub fn read_panoptic(path: impl AsRef<Path>) -> Result<PanopticLabelMap> {
    let path = path.as_ref();
    match read_raster(path)? {
        RasterData::Labels(r) => Ok(PanopticLabelMap::from_labels(r)),
        other => Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected segment labels, found {:?}", other.dtype()),
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthEncoding {
    U16,
    F64,
}

pub fn write_depth(path: impl AsRef<Path>, depth: &DepthMap, encoding: DepthEncoding) -> Result<()> {
    let data = match encoding {
        DepthEncoding::U16 => RasterData::DepthU16(depth_to_u16(depth)),
        DepthEncoding::F64 => RasterData::DepthF64(depth_to_f64(depth)),
    };
    write_raster(path, &data)
}

pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let data = read_raster(path)?;
    data.to_depth_map().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "expected a depth raster, found segment labels".into(),
    })
}

fn read_f64_plane(path: &Path) -> Result<Raster2D<f64>> {
    match read_raster(path)? {
        RasterData::DepthF64(r) => Ok(r),
        other => Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected an f64 raster, found {:?}", other.dtype()),
        }),
    }
}

fn read_embedding(base: &Path, files: &[String], field: &str) -> Result<EmbeddingMap> {
    if files.is_empty() {
        return Err(Error::validation(field, "no channel files"));
    }
    let planes = files
        .iter()
        .map(|f| read_f64_plane(&base.join(f)))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingMap::from_planes(&planes).map_err(|e| match e {
        Error::Dimension(msg) | Error::Validation { reason: msg, .. } => Error::validation(field, msg),
        other => other,
    })
}

/// Raw inputs for kernel fusion: kernel weight maps and position maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionManifest {
    pub mask_weights: Vec<String>,
    pub depth_weights: Vec<String>,
    /// One channel per class.
    pub thing_positions: Vec<String>,
    /// One channel per class.
    pub stuff_positions: Vec<String>,
    pub peak_threshold: f64,
    pub top_k: usize,
}

/// JSON manifest of a kernel bundle. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub scheme: DepthScheme,
    pub num_classes: usize,
    pub mask_kernel_dim: usize,
    pub depth_kernel_dim: usize,
    pub mask_embedding: Vec<String>,
    pub depth_embedding: Vec<String>,
    /// `N * num_classes` row-major.
    pub classes: Vec<f64>,
    /// `N * mask_kernel_dim` row-major.
    pub mask_kernels: Vec<f64>,
    /// `N * depth_kernel_dim` row-major.
    pub depth_kernels: Vec<f64>,
    pub scores: Vec<f64>,
    pub is_thing: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionManifest>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub scheme: DepthScheme,
    pub kernels: KernelSet,
    pub mask_embedding: EmbeddingMap,
    pub depth_embedding: EmbeddingMap,
}

fn check_len(field: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::validation(field, format!("expected {want} values, got {got}")))
    }
}

/// Loads and validates a bundle. Kernels fused from the optional fusion
/// inputs are appended after the explicitly listed ones.
pub fn read_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: BundleManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    if m.version != 1 {
        return Err(Error::validation("version", format!("unsupported bundle version {}", m.version)));
    }

    let n = m.scores.len();
    check_len("classes", m.classes.len(), n * m.num_classes)?;
    check_len("mask_kernels", m.mask_kernels.len(), n * m.mask_kernel_dim)?;
    check_len("depth_kernels", m.depth_kernels.len(), n * m.depth_kernel_dim)?;
    check_len("is_thing", m.is_thing.len(), n)?;

    let mask_embedding = read_embedding(base, &m.mask_embedding, "mask_embedding")?;
    let depth_embedding = read_embedding(base, &m.depth_embedding, "depth_embedding")?;
    let want_depth = m.scheme.kernel_len(depth_embedding.channels());
    if m.depth_kernel_dim != want_depth {
        return Err(Error::validation(
            "depth_kernel_dim",
            format!(
                "{:?} scheme over {} depth channels needs {want_depth}, got {}",
                m.scheme,
                depth_embedding.channels(),
                m.depth_kernel_dim
            ),
        ));
    }

    let row = |v: &[f64], dim: usize, i: usize| v[i * dim..(i + 1) * dim].to_vec();
    let mut instances: Vec<InstanceKernel> = (0..n)
        .map(|i| InstanceKernel {
            class_scores: row(&m.classes, m.num_classes, i),
            mask: row(&m.mask_kernels, m.mask_kernel_dim, i),
            depth: row(&m.depth_kernels, m.depth_kernel_dim, i),
            score: m.scores[i],
            is_thing: m.is_thing[i],
        })
        .collect();

    if let Some(f) = &m.fusion {
        let mask_w = KernelWeightMap(read_embedding(base, &f.mask_weights, "fusion.mask_weights")?);
        let depth_w = KernelWeightMap(read_embedding(base, &f.depth_weights, "fusion.depth_weights")?);
        let things = read_embedding(base, &f.thing_positions, "fusion.thing_positions")?;
        let stuff = read_embedding(base, &f.stuff_positions, "fusion.stuff_positions")?;
        let mut regions = select_positions(&things, InstanceKind::Thing, f.peak_threshold, f.top_k)?;
        regions.extend(select_positions(&stuff, InstanceKind::Stuff, f.peak_threshold, f.top_k)?);
        let fused = fuse_regions(&mask_w, &depth_w, &regions)?;
        if !fused.is_empty() && fused.num_classes() != m.num_classes {
            return Err(Error::validation("fusion.thing_positions", "channel count differs from num_classes"));
        }
        instances.extend(fused.into_instances());
    }

    let kernels = KernelSet::new(m.num_classes, m.mask_kernel_dim, m.depth_kernel_dim, instances)?;
    kernels.check_embeddings(&mask_embedding, &depth_embedding, m.scheme)?;
    Ok(Bundle {
        scheme: m.scheme,
        kernels,
        mask_embedding,
        depth_embedding,
    })
}

/// Writes `bundle.json` plus one f64 raster per embedding channel into
/// `dir`; returns the manifest path.
pub fn write_bundle(dir: impl AsRef<Path>, bundle: &Bundle) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write_planes = |prefix: &str, emb: &EmbeddingMap| -> Result<Vec<String>> {
        (0..emb.channels())
            .map(|c| {
                let name = format!("{prefix}_{c:02}.pdps");
                write_raster(dir.join(&name), &RasterData::DepthF64(emb.plane(c)))?;
                Ok(name)
            })
            .collect()
    };
    let mask_embedding = write_planes("mask_embedding", &bundle.mask_embedding)?;
    let depth_embedding = write_planes("depth_embedding", &bundle.depth_embedding)?;
    let inst = bundle.kernels.instances();
    let manifest = BundleManifest {
        version: 1,
        scheme: bundle.scheme,
        num_classes: bundle.kernels.num_classes(),
        mask_kernel_dim: bundle.kernels.mask_dim(),
        depth_kernel_dim: bundle.kernels.depth_dim(),
        mask_embedding,
        depth_embedding,
        classes: inst.iter().flat_map(|k| k.class_scores.clone()).collect(),
        mask_kernels: inst.iter().flat_map(|k| k.mask.clone()).collect(),
        depth_kernels: inst.iter().flat_map(|k| k.depth.clone()).collect(),
        scores: inst.iter().map(|k| k.score).collect(),
        is_thing: inst.iter().map(|k| k.is_thing).collect(),
        fusion: None,
    };
    let path = dir.join("bundle.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> RasterData {
        RasterData::Labels(
            Raster2D::from_fn(3, 5, |r, c| if r == 1 { SegmentRef::VOID } else { SegmentRef::new(c as u16, r as u16) })
                .unwrap(),
        )
    }

    #[test]
    fn header_layout() {
        let bytes = encode_raster(&labels());
        assert_eq!(&bytes[..4], b"PDPS");
        assert_eq!(&bytes[4..8], &[1, 0, 1, 0]);
        assert_eq!(&bytes[8..16], &[3, 0, 0, 0, 5, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 15 * 4);
        // pixel (0,1) = class 1, instance 0
        assert_eq!(&bytes[20..24], &[0, 0, 1, 0]);
    }

    #[test]
    fn u16_depth_decode() {
        let raw = Raster2D::new(1, 2, vec![22528u16, 0]).unwrap();
        let d = depth_from_u16(&raw);
        assert_eq!(d.at(0), Some(88.0));
        assert_eq!(d.at(1), None);
        assert_eq!(depth_to_u16(&d), raw);
    }

    #[test]
    fn bad_magic_and_dtype() {
        let mut bytes = encode_raster(&labels());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_raster(&bytes, Path::new("x")), Err(Error::Format { .. })));
        let mut bytes = encode_raster(&labels());
        bytes[6] = 9;
        assert!(matches!(decode_raster(&bytes, Path::new("x")), Err(Error::Format { .. })));
        let mut bytes = encode_raster(&labels());
        bytes[4] = 2;
        assert!(matches!(decode_raster(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_raster(&labels());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_raster(cut, Path::new("x")), Err(Error::Truncation { .. })));
        assert!(matches!(decode_raster(&bytes[..10], Path::new("x")), Err(Error::Truncation { .. })));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pdps");
        write_raster(&p, &labels()).unwrap();
        assert_eq!(read_raster(&p).unwrap(), labels());
        assert!(matches!(read_raster(dir.path().join("missing.pdps")), Err(Error::Io { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn f64_roundtrip_bitwise(h in 1usize..6, w in 1usize..6, bits in proptest::collection::vec(any::<u64>(), 36)) {
                let values: Vec<f64> = bits[..h * w].iter().map(|b| f64::from_bits(*b)).collect();
                let data = RasterData::DepthF64(Raster2D::new(h, w, values.clone()).unwrap());
                let back = decode_raster(&encode_raster(&data), Path::new("p")).unwrap();
                match back {
                    RasterData::DepthF64(r) => {
                        let same = r.values().iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits());
                        prop_assert!(same);
                    }
                    _ => prop_assert!(false),
                }
            }

            #[test]
            fn labels_and_u16_roundtrip(h in 1usize..6, w in 1usize..6, raw in proptest::collection::vec(any::<u32>(), 36)) {
                let lab = RasterData::Labels(Raster2D::new(h, w, raw[..h * w].iter().map(|v| SegmentRef(*v)).collect()).unwrap());
                prop_assert_eq!(decode_raster(&encode_raster(&lab), Path::new("p")).unwrap(), lab);
                let dep = RasterData::DepthU16(Raster2D::new(h, w, raw[..h * w].iter().map(|v| *v as u16).collect()).unwrap());
                prop_assert_eq!(decode_raster(&encode_raster(&dep), Path::new("p")).unwrap(), dep);
            }
        }
    }
}
