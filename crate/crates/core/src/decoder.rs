//! Convolutional decoder from the four encoder taps back to full in-plane
//! resolution. Depth is never resampled.

use rand::Rng;

use crate::encoder::N_TAPS;
use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::ops::{Conv3dGeometry, NormKind, NORM_EPS};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Tap width `C`.
    pub channels: usize,
    pub classes: usize,
    /// One entry per ×2 in-plane upsampling stage.
    pub stage_widths: Vec<usize>,
}

impl DecoderConfig {
    /// Widths `C, C/2, C/4, ...` with one stage per factor of two in `patch`.
    pub fn new(channels: usize, classes: usize, patch: usize) -> Result<Self> {
        if !patch.is_power_of_two() || patch < 2 {
            return config_err(format!("patch {patch} must be a power of two ≥ 2"));
        }
        let stages = patch.trailing_zeros() as usize;
        let stage_widths = (0..stages).map(|i| (channels >> i).max(1)).collect();
        let cfg = Self { channels, classes, stage_widths };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return config_err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.channels == 0 || self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return config_err(format!("invalid decoder widths {:?}", self.stage_widths));
        }
        Ok(())
    }

    pub fn upsample_factor(&self) -> usize {
        1 << self.stage_widths.len()
    }

    pub fn param_count(&self) -> usize {
        let w0 = self.stage_widths[0];
        let mut n = N_TAPS * self.channels * w0 + w0;
        let mut prev = w0;
        for &w in &self.stage_widths {
            n += 27 * prev * w + w + 2 * w;
            prev = w;
        }
        n + prev * self.classes + self.classes
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv_w: ParamId,
    conv_b: ParamId,
    norm_g: ParamId,
    norm_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    fuse_w: ParamId,
    fuse_b: ParamId,
    stages: Vec<Stage>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Decoder {
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: DecoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let fan = N_TAPS * cfg.channels;
        let w0 = cfg.stage_widths[0];
        let fuse_w = store.fan_in_uniform("decoder.fuse.weight", &[w0, fan, 1, 1, 1], fan, true, rng);
        let fuse_b = store.fan_in_uniform("decoder.fuse.bias", &[w0], fan, true, rng);
        let mut prev = w0;
        let mut stages = Vec::new();
        for (i, &w) in cfg.stage_widths.iter().enumerate() {
            let p = |s: &str| format!("decoder.stages.{i}.{s}");
            stages.push(Stage {
                conv_w: store.fan_in_uniform(p("conv.weight"), &[w, prev, 3, 3, 3], prev * 27, true, rng),
                conv_b: store.fan_in_uniform(p("conv.bias"), &[w], prev * 27, true, rng),
                norm_g: store.ones(p("norm.weight"), &[w], true),
                norm_b: store.zeros(p("norm.bias"), &[w], true),
            });
            prev = w;
        }
        let head_w = store.fan_in_uniform("decoder.head.weight", &[cfg.classes, prev, 1, 1, 1], prev, true, rng);
        let head_b = store.zeros("decoder.head.bias", &[cfg.classes], true);
        Ok(Self { cfg, fuse_w, fuse_b, stages, head_w, head_b })
    }

    /// Taps `4 × [B·D, C, h, w]` -> logits `[B, K, D, h·f, w·f]`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, taps: &[Var], batch: usize) -> Result<Var> {
        if taps.len() != N_TAPS {
            return dim_err(format!("decoder expects {N_TAPS} taps, got {}", taps.len()));
        }
        let s0 = g.shape(taps[0]);
        for t in taps {
            if g.shape(*t) != s0 {
                return dim_err(format!("tap shapes differ: {s0:?} vs {:?}", g.shape(*t)));
            }
        }
        let [bd, c, h, w] = *s0.as_slice() else {
            return dim_err(format!("taps must be [B·D, C, h, w], got {s0:?}"));
        };
        if c != self.cfg.channels || batch == 0 || bd % batch != 0 {
            return dim_err(format!("taps {s0:?} incompatible with decoder width {} and batch {batch}", self.cfg.channels));
        }
        let d = bd / batch;
        let vols = taps
            .iter()
            .map(|&t| {
                let v = g.reshape(t, &[batch, d, c, h, w])?;
                g.permute(v, &[0, 2, 1, 3, 4])
            })
            .collect::<Result<Vec<_>>>()?;
        let x = g.concat(&vols, 1)?;
        let pr = |id| g.param(store, id);
        let mut x = g.conv3d(x, pr(self.fuse_w), Some(pr(self.fuse_b)), Conv3dGeometry::valid())?;
        let same = Conv3dGeometry::same([3, 3, 3], [1, 1, 1])?;
        for st in &self.stages {
            x = g.conv3d(x, pr(st.conv_w), Some(pr(st.conv_b)), same)?;
            x = g.normalize(x, NormKind::Instance, Some(pr(st.norm_g)), Some(pr(st.norm_b)), T::lit(NORM_EPS))?;
            x = g.gelu(x);
            x = g.upsample_hw(x, 2)?;
        }
        g.conv3d(x, pr(self.head_w), Some(pr(self.head_b)), Conv3dGeometry::valid())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_widths_taper() {
        let cfg = DecoderConfig::new(96, 3, 16).unwrap();
        assert_eq!(cfg.stage_widths, vec![96, 48, 24, 12]);
        assert_eq!(cfg.upsample_factor(), 16);
        assert!(DecoderConfig::new(96, 3, 12).is_err());
        assert!(DecoderConfig::new(96, 1, 16).is_err());
    }

    #[test]
    fn toy_output_shape_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = DecoderConfig::new(96, 3, 16).unwrap();
        let dec = Decoder::new(cfg.clone(), &mut store, &mut rng).unwrap();
        assert_eq!(store.count().0, cfg.param_count());
        let g = Graph::no_grad();
        let taps: Vec<_> = (0..4).map(|_| g.constant(Tensor::randn(&[4, 96, 2, 2], 1.0, &mut rng))).collect();
        assert_eq!(g.shape(dec.forward(&g, &store, &taps, 1).unwrap()), vec![1, 3, 4, 32, 32]);
    }

    #[test]
    fn mismatched_taps_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let dec = Decoder::new(DecoderConfig::new(8, 2, 4).unwrap(), &mut store, &mut rng).unwrap();
        let g = Graph::no_grad();
        let mut taps: Vec<_> = (0..4).map(|_| g.constant(Tensor::zeros(&[2, 8, 2, 2]))).collect();
        taps[3] = g.constant(Tensor::zeros(&[2, 8, 2, 3]));
        assert!(matches!(dec.forward(&g, &store, &taps, 1), Err(crate::Error::Dimension(_))));
    }
}
