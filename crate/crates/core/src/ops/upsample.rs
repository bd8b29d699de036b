use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Source taps `(i0, i1, frac)` for each output position of a linear resize
/// by integer `factor`, half-pixel (align_corners = false) convention with
/// edge clamping.
fn taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling of the H and W axes of `[B, C, D, H, W]`; depth untouched.
pub fn upsample_hw_forward<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return config_err("upsample factor must be positive");
    }
    let s = x.shape();
    if s.len() != 5 {
        return dim_err(format!("upsample_hw expects [B, C, D, H, W], got {s:?}"));
    }
    let (h, w) = (s[3], s[4]);
    let (oh, ow) = (h * factor, w * factor);
    let th = taps(h, factor);
    let tw = taps(w, factor);
    let slices = s[0] * s[1] * s[2];
    let mut out = vec![T::zero(); slices * oh * ow];
    for sl in 0..slices {
        let src = &x.data()[sl * h * w..(sl + 1) * h * w];
        let dst = &mut out[sl * oh * ow..(sl + 1) * oh * ow];
        for (r, &(h0, h1, fh)) in th.iter().enumerate() {
            let fh = T::lit(fh);
            for (c, &(w0, w1, fw)) in tw.iter().enumerate() {
                let fw = T::lit(fw);
                let top = src[h0 * w + w0] * (T::one() - fw) + src[h0 * w + w1] * fw;
                let bot = src[h1 * w + w0] * (T::one() - fw) + src[h1 * w + w1] * fw;
                dst[r * ow + c] = top * (T::one() - fh) + bot * fh;
            }
        }
    }
    Tensor::new(&[s[0], s[1], s[2], oh, ow], out)
}

impl<T: Real> Graph<T> {
    pub fn upsample_hw(&self, x: Var, factor: usize) -> Result<Var> {
        let in_shape = self.shape(x);
        let y = self.with_value(x, |t| upsample_hw_forward(t, factor))?;
        Ok(self.push_op(y, &[x], move |g, _| {
            let (h, w) = (in_shape[3], in_shape[4]);
            let (oh, ow) = (h * factor, w * factor);
            let th = taps(h, factor);
            let tw = taps(w, factor);
            let slices = in_shape[0] * in_shape[1] * in_shape[2];
            let mut gx = vec![T::zero(); slices * h * w];
            for sl in 0..slices {
                let gs = &g.data()[sl * oh * ow..(sl + 1) * oh * ow];
                let dst = &mut gx[sl * h * w..(sl + 1) * h * w];
                for (r, &(h0, h1, fh)) in th.iter().enumerate() {
                    let fh = T::lit(fh);
                    for (c, &(w0, w1, fw)) in tw.iter().enumerate() {
                        let fw = T::lit(fw);
                        let v = gs[r * ow + c];
                        let top = v * (T::one() - fh);
                        let bot = v * fh;
                        dst[h0 * w + w0] += top * (T::one() - fw);
                        dst[h0 * w + w1] += top * fw;
                        dst[h1 * w + w0] += bot * (T::one() - fw);
                        dst[h1 * w + w1] += bot * fw;
                    }
                }
            }
            vec![Some(Tensor::from_vec(&in_shape, gx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 4, 5], 5.0);
        let y = upsample_hw_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 8, 10]);
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn half_pixel_two_sample_ramp() {
        // centers of the 4 outputs map to sources -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2, 1], vec![0.0, 2.0]);
        let y = upsample_hw_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 4, 2]);
        let col: Vec<f64> = (0..4).map(|r| y.get(&[0, 0, 0, r, 0])).collect();
        assert_eq!(col, vec![0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn sixteen_fold_shape() {
        let x = Tensor::<f32>::zeros(&[1, 3, 2, 6, 6]);
        assert_eq!(upsample_hw_forward(&x, 16).unwrap().shape(), &[1, 3, 2, 96, 96]);
    }

    #[test]
    fn zero_factor_is_config_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 2, 2]);
        assert!(matches!(upsample_hw_forward(&x, 0), Err(crate::Error::Config(_))));
    }
}
