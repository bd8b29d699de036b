//! Volume records, the RVOL file format, intensity preprocessing, isotropic
//! resampling and training-time augmentation.
//!
//! RVOL layout (little-endian): `b"RVOL"`, `u32` D, H, W, `f32` spacing
//! (depth, height, width) in mm, `u8` dtype code, then `D·H·W` voxels.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::config::AugmentConfig;
use crate::error::{dim_err, Error, Result};
use crate::loss::Labels;
use crate::tensor::Tensor;

pub const RVOL_MAGIC: &[u8; 4] = b"RVOL";
pub const HU_MIN: f32 = -200.0;
pub const HU_MAX: f32 = 250.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    U8 = 1,
    I16 = 2,
    F32 = 3,
}

impl DType {
    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(DType::U8),
            2 => Ok(DType::I16),
            3 => Ok(DType::F32),
            _ => Err(Error::Input(format!("unknown RVOL dtype code {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    /// `[D, H, W]` intensities.
    pub voxels: Tensor<f32>,
    /// Millimetres per voxel along depth, height, width.
    pub spacing: [f32; 3],
    pub labels: Option<Labels>,
    /// Intensities already windowed to `[0, 1]`.
    pub normalized: bool,
}

impl VolumeRecord {
    pub fn new(voxels: Tensor<f32>, spacing: [f32; 3], labels: Option<Labels>) -> Result<Self> {
        if voxels.ndim() != 3 {
            return dim_err(format!("volume must be [D, H, W], got {:?}", voxels.shape()));
        }
        if let Some(l) = &labels {
            if l.shape != voxels.shape() {
                return dim_err(format!("labels {:?} do not share the voxel grid {:?}", l.shape, voxels.shape()));
            }
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Input(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { voxels, spacing, labels, normalized: false })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }
}

fn write_header(w: &mut impl Write, dims: [usize; 3], spacing: [f32; 3], dtype: DType) -> Result<()> {
    w.write_all(RVOL_MAGIC)?;
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Input(format!("extent {d} too large for RVOL")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&[dtype as u8])?;
    Ok(())
}

/// Writes intensities in the given dtype; values are rounded and saturated
/// for the integer codes.
pub fn write_rvol(path: &Path, voxels: &Tensor<f32>, spacing: [f32; 3], dtype: DType) -> Result<()> {
    let s = voxels.shape();
    if s.len() != 3 {
        return dim_err(format!("RVOL stores [D, H, W], got {s:?}"));
    }
    let mut buf = Vec::with_capacity(29 + voxels.numel() * 4);
    write_header(&mut buf, [s[0], s[1], s[2]], spacing, dtype)?;
    for &v in voxels.data() {
        match dtype {
            DType::U8 => buf.push(v.round().clamp(0.0, 255.0) as u8),
            DType::I16 => buf.extend_from_slice(&(v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16).to_le_bytes()),
            DType::F32 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &Labels, spacing: [f32; 3]) -> Result<()> {
    let s = &labels.shape;
    if s.len() != 3 {
        return dim_err(format!("label map must be [D, H, W], got {s:?}"));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut f, [s[0], s[1], s[2]], spacing, DType::U8)?;
    f.write_all(&labels.data)?;
    f.flush()?;
    Ok(())
}

/// Raw contents of an RVOL file.
pub struct RawVolume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub dtype: DType,
    pub bytes: Vec<u8>,
}

pub fn read_rvol_raw(path: &Path) -> Result<RawVolume> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 29];
    f.read_exact(&mut head).map_err(|e| Error::Input(format!("{}: truncated RVOL header ({e})", path.display())))?;
    if &head[..4] != RVOL_MAGIC {
        return Err(Error::Input(format!("{}: not an RVOL file", path.display())));
    }
    let u = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes")) as usize;
    let fl = |i: usize| f32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
    let dims = [u(4), u(8), u(12)];
    let spacing = [fl(16), fl(20), fl(24)];
    let dtype = DType::from_code(head[28])?;
    let width = match dtype {
        DType::U8 => 1,
        DType::I16 => 2,
        DType::F32 => 4,
    };
    let expect = dims.iter().product::<usize>() * width;
    let mut bytes = Vec::with_capacity(expect);
    f.read_to_end(&mut bytes)?;
    if bytes.len() != expect {
        return Err(Error::Input(format!("{}: expected {expect} voxel bytes, found {}", path.display(), bytes.len())));
    }
    Ok(RawVolume { dims, spacing, dtype, bytes })
}

/// Reads any RVOL file as `f32` intensities.
pub fn read_rvol(path: &Path) -> Result<(Tensor<f32>, [f32; 3])> {
    let raw = read_rvol_raw(path)?;
    let data: Vec<f32> = match raw.dtype {
        DType::U8 => raw.bytes.iter().map(|&b| b as f32).collect(),
        DType::I16 => raw.bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32).collect(),
        DType::F32 => raw.bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
    };
    Ok((Tensor::from_vec(&raw.dims, data), raw.spacing))
}

pub fn read_labels(path: &Path) -> Result<(Labels, [f32; 3])> {
    let raw = read_rvol_raw(path)?;
    if raw.dtype != DType::U8 {
        return Err(Error::Input(format!("{}: label maps must be u8", path.display())));
    }
    Ok((Labels::new(&raw.dims, raw.bytes)?, raw.spacing))
}

/// Clips to the soft-tissue window and maps it linearly onto `[0, 1]`.
pub fn normalize_hu(x: f32) -> f32 {
    (x.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

fn resampled_extent(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

/// Source coordinate of output index `i` under half-pixel alignment.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
}

fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    (0..n_out)
        .map(|i| {
            let s = source_coord(i, n_in, n_out);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, (s - lo as f64) as f32)
        })
        .collect()
}

/// Trilinear resampling of `[D, H, W]` to `out` voxels.
pub fn resample_trilinear(x: &Tensor<f32>, out: [usize; 3]) -> Tensor<f32> {
    let s = x.shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    if [d, h, w] == out {
        return x.clone();
    }
    let (tz, ty, tx) = (linear_taps(d, out[0]), linear_taps(h, out[1]), linear_taps(w, out[2]));
    let src = x.data();
    let at = |z: usize, y: usize, xx: usize| src[(z * h + y) * w + xx];
    let mut data = Vec::with_capacity(out.iter().product());
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                data.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz));
            }
        }
    }
    Tensor::from_vec(&out, data)
}

/// Nearest-neighbour resampling of a label map.
pub fn resample_nearest(l: &Labels, out: [usize; 3]) -> Labels {
    let (d, h, w) = (l.shape[0], l.shape[1], l.shape[2]);
    if [d, h, w] == out {
        return l.clone();
    }
    let near = |n_in: usize, n_out: usize| -> Vec<usize> {
        (0..n_out).map(|i| (((i as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1)).collect()
    };
    let (nz, ny, nx) = (near(d, out[0]), near(h, out[1]), near(w, out[2]));
    let mut data = Vec::with_capacity(out.iter().product());
    for &z in &nz {
        for &y in &ny {
            for &x in &nx {
                data.push(l.data[(z * h + y) * w + x]);
            }
        }
    }
    Labels { shape: out.to_vec(), data }
}

/// Resamples voxels and labels by per-axis `scale` (output/input extent).
pub fn rescale(rec: &VolumeRecord, scale: [f64; 3]) -> Result<VolumeRecord> {
    let dims = rec.dims();
    let out: [usize; 3] = std::array::from_fn(|a| resampled_extent(dims[a], scale[a]));
    let spacing: [f32; 3] = std::array::from_fn(|a| (rec.spacing[a] as f64 * dims[a] as f64 / out[a] as f64) as f32);
    let mut r = VolumeRecord::new(resample_trilinear(&rec.voxels, out), spacing, rec.labels.as_ref().map(|l| resample_nearest(l, out)))?;
    r.normalized = rec.normalized;
    Ok(r)
}

/// Intensity window, fixed-bound normalization, then resampling to 1 mm
/// isotropic spacing.
pub fn preprocess(rec: &VolumeRecord) -> Result<VolumeRecord> {
    if rec.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Input(format!("spacing must be positive, got {:?}", rec.spacing)));
    }
    let mut out = rec.clone();
    if !rec.normalized {
        out.voxels = rec.voxels.map(normalize_hu);
        out.normalized = true;
    }
    let mut out = rescale(&out, rec.spacing.map(|s| s as f64))?;
    out.spacing = [1.0; 3];
    Ok(out)
}

/// Crops (or zero-pads) to `size` starting at `offset`; negative offsets pad
/// in front.
pub fn crop_or_pad(rec: &VolumeRecord, offset: [isize; 3], size: [usize; 3]) -> Result<VolumeRecord> {
    let dims = rec.dims();
    let n: usize = size.iter().product();
    let mut vox = vec![0f32; n];
    let mut lab = rec.labels.as_ref().map(|_| vec![0u8; n]);
    for z in 0..size[0] {
        let sz = z as isize + offset[0];
        if sz < 0 || sz >= dims[0] as isize {
            continue;
        }
        for y in 0..size[1] {
            let sy = y as isize + offset[1];
            if sy < 0 || sy >= dims[1] as isize {
                continue;
            }
            for x in 0..size[2] {
                let sx = x as isize + offset[2];
                if sx < 0 || sx >= dims[2] as isize {
                    continue;
                }
                let si = (sz as usize * dims[1] + sy as usize) * dims[2] + sx as usize;
                let di = (z * size[1] + y) * size[2] + x;
                vox[di] = rec.voxels.data()[si];
                if let (Some(dst), Some(src)) = (lab.as_mut(), rec.labels.as_ref()) {
                    dst[di] = src.data[si];
                }
            }
        }
    }
    let labels = lab.map(|d| Labels::new(&size, d)).transpose()?;
    let mut r = VolumeRecord::new(Tensor::from_vec(&size, vox), rec.spacing, labels)?;
    r.normalized = rec.normalized;
    Ok(r)
}

/// Mirrors voxels and labels along `axis` (0 = depth).
pub fn flip(rec: &VolumeRecord, axis: usize) -> VolumeRecord {
    let dims = rec.dims();
    let src_index = |i: usize| -> usize {
        let (z, y, x) = (i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]);
        let mut c = [z, y, x];
        c[axis] = dims[axis] - 1 - c[axis];
        (c[0] * dims[1] + c[1]) * dims[2] + c[2]
    };
    let n = rec.voxels.numel();
    let voxels = Tensor::from_vec(&dims, (0..n).map(|i| rec.voxels.data()[src_index(i)]).collect());
    let labels = rec.labels.as_ref().map(|l| Labels { shape: l.shape.clone(), data: (0..n).map(|i| l.data[src_index(i)]).collect() });
    VolumeRecord { voxels, labels, ..rec.clone() }
}

/// `x -> clamp(mean + γ (x − mean), 0, 1)`, evaluated as
/// `γ x + (1 − γ) mean` so that `γ = 1` is exact.
pub fn adjust_contrast(rec: &VolumeRecord, gamma: f32) -> VolumeRecord {
    let d = rec.voxels.data();
    let mean = (d.iter().map(|&v| v as f64).sum::<f64>() / d.len().max(1) as f64) as f32;
    VolumeRecord { voxels: rec.voxels.map(|v| (gamma * v + (1.0 - gamma) * mean).clamp(0.0, 1.0)), ..rec.clone() }
}

/// Spacing jitter, random crop to `crop`, random flips and contrast, each
/// enabled by `cfg`. With everything disabled and a volume already of size
/// `crop`, the record is returned unchanged.
pub fn augment<R: Rng + ?Sized>(rec: &VolumeRecord, crop: [usize; 3], cfg: &AugmentConfig, rng: &mut R) -> Result<VolumeRecord> {
    let mut out = rec.clone();
    if cfg.spacing_jitter {
        let f: f64 = rng.gen_range(0.9..=1.1);
        out = rescale(&out, [f; 3])?;
    }
    if out.dims() != crop {
        let dims = out.dims();
        let offset: [isize; 3] = std::array::from_fn(|a| {
            let slack = dims[a] as isize - crop[a] as isize;
            match (slack > 0, cfg.crop) {
                (true, true) => rng.gen_range(0..=slack),
                _ => slack / 2,
            }
        });
        out = crop_or_pad(&out, offset, crop)?;
    }
    if cfg.flip {
        for axis in 0..3 {
            if rng.gen_bool(0.5) {
                out = flip(&out, axis);
            }
        }
    }
    if cfg.contrast {
        let gamma: f32 = rng.gen_range(0.7..=1.3);
        out = adjust_contrast(&out, gamma);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(dims: [usize; 3]) -> VolumeRecord {
        let n = dims.iter().product::<usize>();
        let labels = Labels::new(&dims, (0..n).map(|i| (i % 3) as u8).collect()).unwrap();
        let mut r = VolumeRecord::new(Tensor::from_fn(&dims, |i| i as f32 / n as f32), [1.0; 3], Some(labels)).unwrap();
        r.normalized = true;
        r
    }

    #[test]
    fn hu_window() {
        assert_eq!(normalize_hu(-300.0), 0.0);
        assert_eq!(normalize_hu(25.0), 0.5);
        assert_eq!(normalize_hu(250.0), 1.0);
        assert_eq!(normalize_hu(900.0), 1.0);
    }

    #[test]
    fn anisotropic_depth_doubles() {
        let rec = VolumeRecord::new(Tensor::zeros(&[10, 4, 4]), [2.0, 1.0, 1.0], None).unwrap();
        let p = preprocess(&rec).unwrap();
        assert_eq!(p.dims(), [20, 4, 4]);
        assert_eq!(p.spacing, [1.0; 3]);
    }

    #[test]
    fn non_positive_spacing_rejected() {
        let r = VolumeRecord::new(Tensor::zeros(&[2, 2, 2]), [0.0, 1.0, 1.0], None);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn preprocess_idempotent_on_canonical_input() {
        let rec = ramp([4, 5, 6]);
        assert_eq!(preprocess(&rec).unwrap(), rec);
        let raw = VolumeRecord::new(Tensor::from_fn(&[6, 4, 4], |i| i as f32 * 7.0 - 200.0), [1.5, 1.0, 1.0], None).unwrap();
        let once = preprocess(&raw).unwrap();
        assert!(once.normalized);
        let once = preprocess(&rec).unwrap();
        assert_eq!(preprocess(&once).unwrap(), once);
    }

    #[test]
    fn trilinear_half_pixel() {
        let x = Tensor::from_vec(&[1, 1, 2], vec![0.0f32, 2.0]);
        let y = resample_trilinear(&x, [1, 1, 4]);
        assert_eq!(y.data(), &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn flips_are_involutions() {
        let rec = ramp([3, 4, 5]);
        for axis in 0..3 {
            assert_ne!(flip(&rec, axis), rec);
            assert_eq!(flip(&flip(&rec, axis), axis), rec);
        }
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let rec = ramp([4, 6, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&rec, [4, 6, 6], &AugmentConfig::NONE, &mut rng).unwrap(), rec);
        assert_eq!(adjust_contrast(&rec, 1.0).voxels, rec.voxels);
    }

    #[test]
    fn short_axes_are_zero_padded() {
        let rec = ramp([2, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&rec, [4, 3, 3], &AugmentConfig { crop: true, ..AugmentConfig::NONE }, &mut rng).unwrap();
        assert_eq!(out.dims(), [4, 3, 3]);
        assert!(out.voxels.data()[..9].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rvol_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = ramp([3, 2, 4]);
        let p = dir.path().join("v.rvol");
        write_rvol(&p, &rec.voxels, [1.5, 1.0, 0.5], DType::F32).unwrap();
        let (v, s) = read_rvol(&p).unwrap();
        assert_eq!((v, s), (rec.voxels.clone(), [1.5, 1.0, 0.5]));
        let hu = rec.voxels.map(|v| v * 1000.0 - 500.0);
        write_rvol(&p, &hu, [1.0; 3], DType::I16).unwrap();
        assert_eq!(read_rvol(&p).unwrap().0, hu.map(f32::round));
        let lp = dir.path().join("l.rvol");
        write_labels(&lp, rec.labels.as_ref().unwrap(), [1.0; 3]).unwrap();
        assert_eq!(&read_labels(&lp).unwrap().0, rec.labels.as_ref().unwrap());
        std::fs::write(&p, b"RVOL\x01").unwrap();
        assert!(read_rvol(&p).is_err());
    }
}
