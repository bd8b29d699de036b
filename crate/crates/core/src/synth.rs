//! Deterministic synthetic CT-like volumes: ellipsoidal "organs" with
//! distinct HU bands over a noisy background, plus dataset directory IO.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Error, Result};
use crate::loss::Labels;
use crate::tensor::Tensor;
use crate::volume::{read_labels, read_rvol, write_labels, write_rvol, DType, VolumeRecord};

/// Smallest fraction of voxels every foreground class must cover.
pub const MIN_CLASS_FRACTION: f64 = 0.01;
const BACKGROUND_HU: f64 = -120.0;
const NOISE_HU: f64 = 20.0;
const MAX_ATTEMPTS: usize = 200;

fn class_hu(k: usize, classes: usize) -> f64 {
    // spread foreground bands over [40, 280] so the upper clip is exercised
    if classes <= 2 {
        return 160.0;
    }
    40.0 + 240.0 * (k - 1) as f64 / (classes - 2) as f64
}

fn rasterize<R: Rng>(dims: [usize; 3], classes: usize, rng: &mut R) -> Vec<u8> {
    let mut lab = vec![0u8; dims.iter().product()];
    for k in 1..classes {
        let center: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * rng.gen_range(0.3..0.7));
        let radius: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * rng.gen_range(0.16..0.3));
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let p = [z, y, x];
                    let q: f64 = (0..3).map(|a| ((p[a] as f64 + 0.5 - center[a]) / radius[a]).powi(2)).sum();
                    if q <= 1.0 {
                        lab[(z * dims[1] + y) * dims[2] + x] = k as u8;
                    }
                }
            }
        }
    }
    lab
}

fn class_fractions(lab: &[u8], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in lab {
        counts[l as usize] += 1;
    }
    counts.iter().map(|&c| c as f64 / lab.len() as f64).collect()
}

/// One labelled volume of raw HU-like intensities in `[-200, 300]` at 1 mm.
pub fn synth_volume(dims: [usize; 3], classes: usize, seed: u64) -> Result<VolumeRecord> {
    if !(2..=255).contains(&classes) {
        return config_err(format!("classes must be in 2..=255, got {classes}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_HU).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..MAX_ATTEMPTS {
        let lab = rasterize(dims, classes, &mut rng);
        if class_fractions(&lab, classes)[1..].iter().all(|&f| f >= MIN_CLASS_FRACTION) {
            let vox: Vec<f32> = lab
                .iter()
                .map(|&l| {
                    let base = if l == 0 { BACKGROUND_HU } else { class_hu(l as usize, classes) };
                    (base + noise.sample(&mut rng)).clamp(-200.0, 300.0).round() as f32
                })
                .collect();
            let labels = Labels::new(&dims, lab)?;
            return VolumeRecord::new(Tensor::from_vec(&dims, vox), [1.0; 3], Some(labels));
        }
    }
    config_err(format!("could not place {} organs of at least 1% each in {dims:?}", classes - 1))
}

/// `n` volumes of `size³` voxels; volume `i` uses a stream derived from
/// `seed` and `i`.
pub fn gen_synth(n: usize, size: usize, classes: usize, seed: u64) -> Result<Vec<VolumeRecord>> {
    if size < 32 {
        return config_err(format!("synthetic volumes need size >= 32, got {size}"));
    }
    (0..n).map(|i| synth_volume([size; 3], classes, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))).collect()
}

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i:03}.img.rvol"))
}

pub fn label_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i:03}.lbl.rvol"))
}

pub fn write_dataset(dir: &Path, records: &[VolumeRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, rec) in records.iter().enumerate() {
        write_rvol(&image_path(dir, i), &rec.voxels, rec.spacing, DType::I16)?;
        if let Some(l) = &rec.labels {
            write_labels(&label_path(dir, i), l, rec.spacing)?;
        }
    }
    Ok(())
}

/// Loads `NNN.img.rvol` files in index order with their `NNN.lbl.rvol`
/// partners when present.
pub fn read_dataset(dir: &Path) -> Result<Vec<VolumeRecord>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".img.rvol"))
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let stem = name.trim_end_matches(".img.rvol");
        let (vox, spacing) = read_rvol(&dir.join(&name))?;
        let lpath = dir.join(format!("{stem}.lbl.rvol"));
        let labels = if lpath.exists() { Some(read_labels(&lpath)?.0) } else { None };
        out.push(VolumeRecord::new(vox, spacing, labels)?);
    }
    if out.is_empty() {
        return Err(Error::Input(format!("no *.img.rvol volumes in {}", dir.display())));
    }
    Ok(out)
}
