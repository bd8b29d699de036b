//! Tri-plane Mamba adapter: depth-wise dimension reduction, multi-scale
//! dilated depth convolutions, plane scanning with one state-space block per
//! plane, and a zero-initialized dimension raise applied residually.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::Conv3dGeometry;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::ssm::{MambaBlock, MambaConfig};
use crate::tensor::{inverse_permutation, Tensor};

/// One way of flattening a `[B, r, D, h, w]` volume into sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Plane {
    /// Batch `B·D`, sequence over `h` then `w`.
    Hw,
    /// Batch `B·w`, sequence over `D` then `h`.
    Dh,
    /// Batch `B·h`, sequence over `D` then `w`.
    Dw,
    /// Batch `B`, sequence over `D`, `h`, `w`.
    Volume,
}

impl Plane {
    pub const ALL: [Plane; 4] = [Plane::Hw, Plane::Dh, Plane::Dw, Plane::Volume];

    /// Axis order of `[B, r, D, h, w]` that brings batch axes first, then
    /// sequence axes, then channels.
    fn axes(self) -> [usize; 5] {
        match self {
            Plane::Hw | Plane::Volume => [0, 2, 3, 4, 1],
            Plane::Dh => [0, 4, 2, 3, 1],
            Plane::Dw => [0, 3, 2, 4, 1],
        }
    }

    fn seq_shape(self, dims: [usize; 5]) -> [usize; 3] {
        let [b, r, d, h, w] = dims;
        match self {
            Plane::Hw => [b * d, h * w, r],
            Plane::Dh => [b * w, d * h, r],
            Plane::Dw => [b * h, d * w, r],
            Plane::Volume => [b, d * h * w, r],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Plane::Hw => "hw",
            Plane::Dh => "dh",
            Plane::Dw => "dw",
            Plane::Volume => "volume",
        }
    }
}

impl FromStr for Plane {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Plane::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown plane {s:?} (expected hw, dh, dw or volume)")))
    }
}

fn check_volume(dims: &[usize]) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(dims).map_err(|_| Error::Dimension(format!("expected [B, r, D, h, w], got {dims:?}")))
}

/// Plain-tensor plane flattening (see [`Plane`] for element order).
pub fn plane_flatten<T: Real>(x: &Tensor<T>, plane: Plane) -> Result<Tensor<T>> {
    let dims = check_volume(x.shape())?;
    x.permute(&plane.axes())?.into_reshape(&plane.seq_shape(dims))
}

/// Exact inverse of [`plane_flatten`] for a volume of shape `dims`.
pub fn plane_unflatten<T: Real>(seq: &Tensor<T>, plane: Plane, dims: [usize; 5]) -> Result<Tensor<T>> {
    if seq.shape() != plane.seq_shape(dims) {
        return dim_err(format!("sequence {:?} does not match plane {:?} of volume {dims:?}", seq.shape(), plane));
    }
    let axes = plane.axes();
    let permuted: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    seq.reshape(&permuted)?.permute(&inverse_permutation(&axes))
}

impl<T: Real> Graph<T> {
    pub fn plane_flatten(&self, x: Var, plane: Plane) -> Result<Var> {
        let dims = check_volume(&self.shape(x))?;
        let p = self.permute(x, &plane.axes())?;
        self.reshape(p, &plane.seq_shape(dims))
    }

    pub fn plane_unflatten(&self, seq: Var, plane: Plane, dims: [usize; 5]) -> Result<Var> {
        if self.shape(seq) != plane.seq_shape(dims) {
            return dim_err(format!("sequence {:?} does not match plane {:?} of volume {dims:?}", self.shape(seq), plane));
        }
        let axes = plane.axes();
        let permuted: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
        let r = self.reshape(seq, &permuted)?;
        self.permute(r, &inverse_permutation(&axes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    TriPlane,
    HwOnly,
    DwOnly,
    DhOnly,
    VolumeFlatten,
}

impl ScanMode {
    /// Planes scanned, in summation order.
    pub fn planes(self) -> &'static [Plane] {
        match self {
            ScanMode::TriPlane => &[Plane::Hw, Plane::Dw, Plane::Dh],
            ScanMode::HwOnly => &[Plane::Hw],
            ScanMode::DwOnly => &[Plane::Dw],
            ScanMode::DhOnly => &[Plane::Dh],
            ScanMode::VolumeFlatten => &[Plane::Volume],
        }
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanMode::TriPlane => "tri_plane",
            ScanMode::HwOnly => "hw_only",
            ScanMode::DwOnly => "dw_only",
            ScanMode::DhOnly => "dh_only",
            ScanMode::VolumeFlatten => "volume_flatten",
        })
    }
}

impl FromStr for ScanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tri_plane" => ScanMode::TriPlane,
            "hw_only" => ScanMode::HwOnly,
            "dw_only" => ScanMode::DwOnly,
            "dh_only" => ScanMode::DhOnly,
            "volume_flatten" => ScanMode::VolumeFlatten,
            _ => return config_err(format!("unknown scan mode {s:?}")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    MultiScale,
    Single,
}

impl fmt::Display for ConvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvMode::MultiScale => "multiscale",
            ConvMode::Single => "single",
        })
    }
}

impl FromStr for ConvMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiscale" => Ok(ConvMode::MultiScale),
            "single" => Ok(ConvMode::Single),
            _ => config_err(format!("unknown conv mode {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpMambaConfig {
    /// Backbone feature width `C`.
    pub channels: usize,
    /// Adapter rank `r`.
    pub rank: usize,
    pub dilations: Vec<usize>,
    pub depth_kernel: usize,
    pub scan_mode: ScanMode,
    pub conv_mode: ConvMode,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
}

impl TpMambaConfig {
    pub fn new(channels: usize, rank: usize) -> Self {
        Self {
            channels,
            rank,
            dilations: vec![1, 2, 4, 8],
            depth_kernel: 3,
            scan_mode: ScanMode::TriPlane,
            conv_mode: ConvMode::MultiScale,
            d_state: 16,
            expand: 2,
            d_conv: 4,
        }
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig { d_state: self.d_state, expand: self.expand, d_conv: self.d_conv, ..MambaConfig::new(self.rank) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.rank == 0 {
            return config_err(format!("adapter widths must be positive (C={}, r={})", self.channels, self.rank));
        }
        if self.depth_kernel.is_multiple_of(2) {
            return config_err(format!("depth kernel must be odd, got {}", self.depth_kernel));
        }
        if self.conv_mode == ConvMode::MultiScale {
            if self.dilations.is_empty() || self.dilations.contains(&0) {
                return config_err(format!("invalid dilations {:?}", self.dilations));
            }
            if !self.rank.is_multiple_of(self.dilations.len()) {
                return config_err(format!("rank {} not divisible by {} branches", self.rank, self.dilations.len()));
            }
        }
        self.mamba().validate()
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (c, r, k) = (self.channels, self.rank, self.depth_kernel);
        let convs = match self.conv_mode {
            ConvMode::MultiScale => {
                let nb = self.dilations.len();
                nb * (k * r * (r / nb) + r / nb)
            }
            ConvMode::Single => k * r * r + r,
        };
        (k * c * r + r) + convs + self.scan_mode.planes().len() * self.mamba().param_count() + (k * r * c + c)
    }
}

#[derive(Clone, Debug)]
pub struct TpMambaAdapter {
    pub cfg: TpMambaConfig,
    pub reduce_w: ParamId,
    pub reduce_b: ParamId,
    /// `(weight, bias, dilation)` per branch; a single dilation-1 entry in
    /// [`ConvMode::Single`].
    pub branches: Vec<(ParamId, ParamId, usize)>,
    /// One scanner per plane of the scan mode, each with its own parameters.
    pub scanners: Vec<(Plane, MambaBlock)>,
    pub raise_w: ParamId,
    pub raise_b: ParamId,
}

impl TpMambaAdapter {
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: TpMambaConfig, prefix: &str, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, r, k) = (cfg.channels, cfg.rank, cfg.depth_kernel);
        let p = |s: &str| format!("{prefix}.{s}");
        let reduce_w = store.fan_in_uniform(p("reduce.weight"), &[r, c, k, 1, 1], c * k, true, rng);
        let reduce_b = store.fan_in_uniform(p("reduce.bias"), &[r], c * k, true, rng);
        let branches = match cfg.conv_mode {
            ConvMode::MultiScale => {
                let width = r / cfg.dilations.len();
                cfg.dilations
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| {
                        let w = store.fan_in_uniform(p(&format!("branch.{i}.weight")), &[width, r, k, 1, 1], r * k, true, rng);
                        let b = store.fan_in_uniform(p(&format!("branch.{i}.bias")), &[width], r * k, true, rng);
                        (w, b, d)
                    })
                    .collect()
            }
            ConvMode::Single => {
                let w = store.fan_in_uniform(p("branch.0.weight"), &[r, r, k, 1, 1], r * k, true, rng);
                let b = store.fan_in_uniform(p("branch.0.bias"), &[r], r * k, true, rng);
                vec![(w, b, 1)]
            }
        };
        let mut scanners = Vec::new();
        for &plane in cfg.scan_mode.planes() {
            let blk = MambaBlock::new(cfg.mamba(), &p(&format!("phi_{}", plane.name())), store, rng)?;
            scanners.push((plane, blk));
        }
        let raise_w = store.zeros(p("raise.weight"), &[c, r, k, 1, 1], true);
        let raise_b = store.zeros(p("raise.bias"), &[c], true);
        Ok(Self { cfg, reduce_w, reduce_b, branches, scanners, raise_w, raise_b })
    }

    fn depth_geom(&self, dilation: usize) -> Result<Conv3dGeometry> {
        Conv3dGeometry::same([self.cfg.depth_kernel, 1, 1], [dilation, 1, 1])
    }

    /// `[B, C, D, h, w] -> [B, r, D, h, w]`.
    pub fn reduce_dim<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 5 || s[1] != self.cfg.channels {
            return dim_err(format!("adapter expects [B, {}, D, h, w], got {s:?}", self.cfg.channels));
        }
        g.conv3d(x, g.param(store, self.reduce_w), Some(g.param(store, self.reduce_b)), self.depth_geom(1)?)
    }

    /// Parallel dilated depth convolutions concatenated on channels in
    /// dilation order (or one dilation-1 conv in single mode).
    pub fn multiscale_depth_conv<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .map(|&(w, b, d)| g.conv3d(x, g.param(store, w), Some(g.param(store, b)), self.depth_geom(d)?))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        g.concat(&outs, 1)
    }

    /// Output of one plane scanner mapped back to `[B, r, D, h, w]`.
    pub fn plane_contribution<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var, plane: Plane) -> Result<Var> {
        let blk = self
            .scanners
            .iter()
            .find(|(p, _)| *p == plane)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::Config(format!("adapter has no {plane:?} scanner")))?;
        let dims = check_volume(&g.shape(x))?;
        let seq = g.plane_flatten(x, plane)?;
        let y = blk.forward(g, store, seq)?;
        g.plane_unflatten(y, plane, dims)
    }

    /// Sum of the plane contributions in fixed order.
    pub fn scan<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(plane, _) in &self.scanners {
            let y = self.plane_contribution(g, store, x, plane)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y),
                None => y,
            });
        }
        acc.ok_or_else(|| Error::Config("adapter has no scanners".into()))
    }

    pub fn raise_dim<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        g.conv3d(x, g.param(store, self.raise_w), Some(g.param(store, self.raise_b)), self.depth_geom(1)?)
    }

    /// The adapter branch on a `[B, C, D, h, w]` volume, without the residual.
    pub fn branch<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.reduce_dim(g, store, x)?;
        let y = self.multiscale_depth_conv(g, store, y)?;
        let y = self.scan(g, store, y)?;
        self.raise_dim(g, store, y)
    }

    /// Slice-batched features `[B·D, C, h, w]` -> same shape, with the
    /// adapter applied residually.
    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, f: Var, batch: usize) -> Result<Var> {
        let s = g.shape(f);
        let [bd, c, h, w] = *s.as_slice() else {
            return dim_err(format!("adapter input must be [B·D, C, h, w], got {s:?}"));
        };
        if batch == 0 || bd % batch != 0 {
            return dim_err(format!("slice batch {bd} is not a multiple of volume batch {batch}"));
        }
        let d = bd / batch;
        let v = g.reshape(f, &[batch, d, c, h, w])?;
        let v = g.permute(v, &[0, 2, 1, 3, 4])?;
        let y = self.branch(g, store, v)?;
        let y = g.permute(y, &[0, 2, 1, 3, 4])?;
        let y = g.reshape(y, &[bd, c, h, w])?;
        Ok(g.add(f, y))
    }

    /// Token-layout variant used inside the encoder: `[B·D, h·w, C]`.
    pub fn forward_tokens<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, tokens: Var, batch: usize, grid: (usize, usize)) -> Result<Var> {
        let s = g.shape(tokens);
        let [bd, t, c] = *s.as_slice() else {
            return dim_err(format!("tokens must be [B·D, h·w, C], got {s:?}"));
        };
        let (h, w) = grid;
        if batch == 0 || bd % batch != 0 || t != h * w {
            return dim_err(format!("tokens {s:?} incompatible with batch {batch} and grid {grid:?}"));
        }
        let d = bd / batch;
        let v = g.reshape(tokens, &[batch, d, h, w, c])?;
        let v = g.permute(v, &[0, 4, 1, 2, 3])?;
        let y = self.branch(g, store, v)?;
        let y = g.permute(y, &[0, 2, 3, 4, 1])?;
        let y = g.reshape(y, &[bd, t, c])?;
        Ok(g.add(tokens, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hw_sequence_is_row_major() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2, 2], vec![1., 2., 3., 4.]);
        let s = plane_flatten(&x, Plane::Hw).unwrap();
        assert_eq!(s.shape(), &[1, 4, 1]);
        assert_eq!(s.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn plane_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 5, 2, 2, 2]);
        assert_eq!(plane_flatten(&x, Plane::Hw).unwrap().shape(), &[2, 4, 5]);
        let x = Tensor::<f32>::zeros(&[1, 5, 3, 2, 4]);
        assert_eq!(plane_flatten(&x, Plane::Dw).unwrap().shape(), &[2, 12, 5]);
        assert_eq!(plane_flatten(&x, Plane::Dh).unwrap().shape(), &[4, 6, 5]);
        assert_eq!(plane_flatten(&x, Plane::Volume).unwrap().shape(), &[1, 24, 5]);
    }

    #[test]
    fn parse_modes() {
        assert_eq!("tri_plane".parse::<ScanMode>().unwrap(), ScanMode::TriPlane);
        assert!("diagonal".parse::<ScanMode>().is_err());
        assert!("spiral".parse::<Plane>().is_err());
        assert_eq!(ScanMode::VolumeFlatten.to_string().parse::<ScanMode>().unwrap(), ScanMode::VolumeFlatten);
    }

    #[test]
    fn rank_must_split_across_branches() {
        let mut cfg = TpMambaConfig::new(8, 6);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.conv_mode = ConvMode::Single;
        cfg.validate().unwrap();
        let mut cfg = TpMambaConfig::new(8, 8);
        cfg.depth_kernel = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reduce_dim_shape_at_full_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let ad = TpMambaAdapter::new(TpMambaConfig::new(768, 96), "a", &mut store, &mut rng).unwrap();
        let g = Graph::no_grad();
        let x = g.constant(Tensor::zeros(&[2, 768, 4, 6, 6]));
        assert_eq!(g.shape(ad.reduce_dim(&g, &store, x).unwrap()), vec![2, 96, 4, 6, 6]);
    }

    #[test]
    fn branch_outputs_concatenate_in_dilation_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let ad = TpMambaAdapter::new(TpMambaConfig::new(4, 4), "a", &mut store, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[1, 4, 9, 1, 1], 1.0, &mut rng);
        let g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let y = g.value(ad.multiscale_depth_conv(&g, &store, xv).unwrap());
        assert_eq!(y.shape(), &[1, 4, 9, 1, 1]);
        for (i, &(w, b, d)) in ad.branches.iter().enumerate() {
            let geom = Conv3dGeometry::same([3, 1, 1], [d, 1, 1]).unwrap();
            let single = crate::ops::conv3d_forward(&x, &store.get(w).value, Some(&store.get(b).value), &geom).unwrap();
            assert_eq!(y.narrow(1, i, 1).unwrap(), single);
        }
    }
}
