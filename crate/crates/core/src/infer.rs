//! Sliding-window inference with Gaussian blending of overlapping windows.

use crate::error::{dim_err, Error, Result};
use crate::loss::{argmax_classes, softmax_classes, Labels};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowConfig {
    pub window: [usize; 3],
    pub overlap: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { window: [96, 96, 96], overlap: 0.5 }
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationOutput<T> {
    /// `[1, K, D, H, W]`.
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
    /// `[1, D, H, W]`.
    pub labels: Labels,
}

/// Window offsets along one axis of length `len ≥ win`; the last window is
/// snapped to the far boundary.
pub fn window_starts(len: usize, win: usize, overlap: f64) -> Vec<usize> {
    if len <= win {
        return vec![0];
    }
    let stride = ((win as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut out = Vec::new();
    let mut s = 0;
    loop {
        out.push(s.min(len - win));
        if s + win >= len {
            break;
        }
        s += stride;
    }
    out.dedup();
    out
}

/// Separable Gaussian with `σ = extent / 8` per axis, centred on the window.
pub fn gaussian_importance(window: [usize; 3]) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let sigma = n as f64 / 8.0;
        (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect()
    };
    let (a, b, c) = (axis(window[0]), axis(window[1]), axis(window[2]));
    let mut out = Vec::with_capacity(a.len() * b.len() * c.len());
    for &x in &a {
        for &y in &b {
            for &z in &c {
                out.push(x * y * z);
            }
        }
    }
    out
}

/// Runs `model` on every window of `volume: [1, 1, D, H, W]` and blends the
/// logits. Axes shorter than the window are padded symmetrically with the
/// volume minimum; the result is cropped back to the input extent.
pub fn sliding_window_infer<T, F>(volume: &Tensor<T>, cfg: &WindowConfig, mut model: F) -> Result<SegmentationOutput<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    let s = volume.shape();
    let [1, 1, d, h, w] = *s else {
        return dim_err(format!("sliding window expects [1, 1, D, H, W], got {s:?}"));
    };
    if d * h * w == 0 {
        return Err(Error::Input("empty volume".into()));
    }
    if cfg.window.contains(&0) || !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::Config(format!("invalid window {:?} / overlap {}", cfg.window, cfg.overlap)));
    }
    let dims = [d, h, w];
    let win = cfg.window;
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a].max(win[a]));
    let before: [usize; 3] = std::array::from_fn(|a| (padded[a] - dims[a]) / 2);
    let fill = volume.data().iter().copied().fold(T::infinity(), T::min);
    let mut vol = vec![fill; padded.iter().product()];
    for z in 0..d {
        for y in 0..h {
            let dst = ((z + before[0]) * padded[1] + y + before[1]) * padded[2] + before[2];
            let src = (z * h + y) * w;
            vol[dst..dst + w].copy_from_slice(&volume.data()[src..src + w]);
        }
    }

    let weight = gaussian_importance(win);
    let nvox: usize = padded.iter().product();
    let mut acc: Vec<f64> = Vec::new();
    let mut wsum = vec![0f64; nvox];
    let mut classes = 0;
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(padded[a], win[a], cfg.overlap)).collect();
    let mut patch = vec![T::zero(); win.iter().product()];
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                for z in 0..win[0] {
                    for y in 0..win[1] {
                        let src = ((z0 + z) * padded[1] + y0 + y) * padded[2] + x0;
                        let dst = (z * win[1] + y) * win[2];
                        patch[dst..dst + win[2]].copy_from_slice(&vol[src..src + win[2]]);
                    }
                }
                let input = Tensor::from_vec(&[1, 1, win[0], win[1], win[2]], patch.clone());
                let out = model(&input)?;
                let os = out.shape();
                if os.len() != 5 || os[0] != 1 || os[2..] != win {
                    return dim_err(format!("window model returned {os:?} for window {win:?}"));
                }
                if classes == 0 {
                    classes = os[1];
                    acc = vec![0.0; classes * nvox];
                } else if os[1] != classes {
                    return dim_err("window model changed its class count");
                }
                let wn = weight.len();
                for z in 0..win[0] {
                    for y in 0..win[1] {
                        for x in 0..win[2] {
                            let li = (z * win[1] + y) * win[2] + x;
                            let gi = ((z0 + z) * padded[1] + y0 + y) * padded[2] + x0 + x;
                            wsum[gi] += weight[li];
                            for c in 0..classes {
                                acc[c * nvox + gi] += weight[li] * out.data()[c * wn + li].as_f64();
                            }
                        }
                    }
                }
            }
        }
    }

    let mut logits = Vec::with_capacity(classes * d * h * w);
    for c in 0..classes {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let gi = ((z + before[0]) * padded[1] + y + before[1]) * padded[2] + x + before[2];
                    logits.push(T::lit(acc[c * nvox + gi] / wsum[gi]));
                }
            }
        }
    }
    let logits = Tensor::from_vec(&[1, classes, d, h, w], logits);
    let probabilities = softmax_classes(&logits)?;
    let labels = argmax_classes(&logits)?;
    Ok(SegmentationOutput { logits, probabilities, labels })
}
