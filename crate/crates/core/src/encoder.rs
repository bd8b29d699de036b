//! Slice-wise ViT encoder. Each depth slice of a `[B, 1, D, H, W]` volume is
//! an independent image for patch embedding and attention; only the
//! tri-plane adapters mix information across slices.

use rand::Rng;

use crate::adapter::{TpMambaAdapter, TpMambaConfig};
use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Number of feature maps handed to the decoder.
pub const N_TAPS: usize = 4;

const FROZEN_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub embed_dim: usize,
    pub patch: usize,
    /// Side of the square input slice the positional table is laid out for.
    pub img_size: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub adapter: TpMambaConfig,
}

impl ViTConfig {
    /// Toy defaults: `C = 96`, 4 blocks, 4 heads, adapter rank 24.
    pub fn toy(img_size: usize) -> Self {
        Self {
            embed_dim: 96,
            patch: 16,
            img_size,
            n_blocks: 4,
            n_heads: 4,
            mlp_ratio: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
            adapter: TpMambaConfig::new(96, 24),
        }
    }

    pub fn grid(&self) -> usize {
        self.img_size / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.embed_dim;
        if c == 0 || self.n_heads == 0 || !c.is_multiple_of(self.n_heads) {
            return config_err(format!("embed width {c} not divisible by {} heads", self.n_heads));
        }
        if self.patch == 0 || self.img_size == 0 || !self.img_size.is_multiple_of(self.patch) {
            return config_err(format!("image size {} not divisible by patch {}", self.img_size, self.patch));
        }
        if self.n_blocks < N_TAPS {
            return config_err(format!("encoder needs at least {N_TAPS} blocks, got {}", self.n_blocks));
        }
        if self.lora_rank == 0 || self.mlp_ratio == 0 {
            return config_err("lora rank and mlp ratio must be positive");
        }
        if self.adapter.channels != c {
            return config_err(format!("adapter width {} differs from embed width {c}", self.adapter.channels));
        }
        self.adapter.validate()
    }

    fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn frozen_param_count(&self) -> usize {
        let (c, p, t) = (self.embed_dim, self.patch, self.grid() * self.grid());
        let hidden = self.mlp_ratio * c;
        let block = 2 * 2 * c + 4 * (c * c + c) + (c * hidden + hidden) + (hidden * c + c);
        (p * p * c + c) + t * c + self.n_blocks * block
    }

    pub fn trainable_param_count(&self) -> usize {
        let (c, r) = (self.embed_dim, self.lora_rank);
        self.n_blocks * (2 * (r * c + c * r) + self.adapter.param_count())
    }
}

/// Frozen base projection with a trainable low-rank update.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub lora_a: ParamId,
    pub lora_b: ParamId,
    pub scale: f64,
}

impl LoraLinear {
    fn new<T: Real, R: Rng + ?Sized>(prefix: &str, dim: usize, rank: usize, scale: f64, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let weight = store.add(format!("{prefix}.weight"), Tensor::randn(&[dim, dim], FROZEN_STD, rng), false);
        let bias = store.add(format!("{prefix}.bias"), Tensor::randn(&[dim], FROZEN_STD, rng), false);
        let lora_a = store.fan_in_uniform(format!("{prefix}.lora_a"), &[rank, dim], dim, true, rng);
        let lora_b = store.zeros(format!("{prefix}.lora_b"), &[dim, rank], true);
        Self { weight, bias, lora_a, lora_b, scale }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var, with_lora: bool) -> Result<Var> {
        let base = g.linear(x, g.param(store, self.weight), Some(g.param(store, self.bias)))?;
        if !with_lora {
            return Ok(base);
        }
        let down = g.linear(x, g.param(store, self.lora_a), None)?;
        let up = g.linear(down, g.param(store, self.lora_b), None)?;
        Ok(g.add(base, g.scale(up, T::lit(self.scale))))
    }
}

#[derive(Clone, Debug)]
struct FrozenLinear {
    weight: ParamId,
    bias: ParamId,
}

impl FrozenLinear {
    fn new<T: Real, R: Rng + ?Sized>(prefix: &str, out_f: usize, in_f: usize, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let weight = store.add(format!("{prefix}.weight"), Tensor::randn(&[out_f, in_f], FROZEN_STD, rng), false);
        let bias = store.add(format!("{prefix}.bias"), Tensor::randn(&[out_f], FROZEN_STD, rng), false);
        Self { weight, bias }
    }

    fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        g.linear(x, g.param(store, self.weight), Some(g.param(store, self.bias)))
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<T: Real>(prefix: &str, dim: usize, store: &mut ParamStore<T>) -> Self {
        Self { gamma: store.ones(format!("{prefix}.weight"), &[dim], false), beta: store.zeros(format!("{prefix}.bias"), &[dim], false) }
    }

    fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(store, self.gamma), g.param(store, self.beta))
    }
}

/// Which trainable additions participate in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderOptions {
    pub lora: bool,
    pub adapters: bool,
}

impl Default for EncoderOptions {
    fn default() -> Self {
        Self { lora: true, adapters: true }
    }
}

impl EncoderOptions {
    /// The plain frozen backbone.
    pub const FROZEN: Self = Self { lora: false, adapters: false };
}

#[derive(Clone, Debug)]
pub struct VitBlock {
    norm1: Norm,
    q: LoraLinear,
    k: FrozenLinear,
    v: LoraLinear,
    proj: FrozenLinear,
    norm2: Norm,
    fc1: FrozenLinear,
    fc2: FrozenLinear,
    pub adapter: TpMambaAdapter,
    n_heads: usize,
}

impl VitBlock {
    fn new<T: Real, R: Rng + ?Sized>(cfg: &ViTConfig, prefix: &str, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let c = cfg.embed_dim;
        let hidden = cfg.mlp_ratio * c;
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            norm1: Norm::new(&p("norm1"), c, store),
            q: LoraLinear::new(&p("attn.q"), c, cfg.lora_rank, cfg.lora_scale(), store, rng),
            k: FrozenLinear::new(&p("attn.k"), c, c, store, rng),
            v: LoraLinear::new(&p("attn.v"), c, cfg.lora_rank, cfg.lora_scale(), store, rng),
            proj: FrozenLinear::new(&p("attn.proj"), c, c, store, rng),
            norm2: Norm::new(&p("norm2"), c, store),
            fc1: FrozenLinear::new(&p("mlp.fc1"), hidden, c, store, rng),
            fc2: FrozenLinear::new(&p("mlp.fc2"), c, hidden, store, rng),
            adapter: TpMambaAdapter::new(cfg.adapter.clone(), &p("tpmamba"), store, rng)?,
            n_heads: cfg.n_heads,
        })
    }

    /// Multi-head self-attention over the tokens of each slice,
    /// `[BD, T, C] -> [BD, T, C]`.
    pub fn attention<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var, lora: bool) -> Result<Var> {
        let s = g.shape(x);
        let [bd, t, c] = *s.as_slice() else {
            return dim_err(format!("attention expects [BD, T, C], got {s:?}"));
        };
        let (nh, dh) = (self.n_heads, c / self.n_heads);
        let heads = |v: Var| -> Result<Var> {
            let v = g.reshape(v, &[bd, t, nh, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[bd * nh, t, dh])
        };
        let q = heads(self.q.forward(g, store, x, lora)?)?;
        let k = heads(self.k.forward(g, store, x)?)?;
        let v = heads(self.v.forward(g, store, x, lora)?)?;
        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.scale(g.matmul(q, kt)?, T::lit(1.0 / (dh as f64).sqrt()));
        let att = g.softmax(scores, 2);
        let o = g.matmul(att, v)?;
        let o = g.reshape(o, &[bd, nh, t, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[bd, t, c])?;
        self.proj.forward(g, store, o)
    }

    /// Pre-norm transformer block on tokens `[BD, h·w, C]`, followed by the
    /// adapter.
    pub fn forward_tokens<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var, batch: usize, grid: (usize, usize), opts: EncoderOptions) -> Result<Var> {
        let a = self.attention(g, store, self.norm1.forward(g, store, x)?, opts.lora)?;
        let x = g.add(x, a);
        let h = self.fc1.forward(g, store, self.norm2.forward(g, store, x)?)?;
        let m = self.fc2.forward(g, store, g.gelu(h))?;
        let x = g.add(x, m);
        if opts.adapters {
            self.adapter.forward_tokens(g, store, x, batch, grid)
        } else {
            Ok(x)
        }
    }
}

fn tokens_to_maps<T: Real>(g: &Graph<T>, x: Var, grid: (usize, usize)) -> Result<Var> {
    let s = g.shape(x);
    let y = g.permute(x, &[0, 2, 1])?;
    g.reshape(y, &[s[0], s[2], grid.0, grid.1])
}

fn maps_to_tokens<T: Real>(g: &Graph<T>, f: Var) -> Result<(Var, (usize, usize))> {
    let s = g.shape(f);
    let [bd, c, h, w] = *s.as_slice() else {
        return dim_err(format!("feature maps must be [BD, C, h, w], got {s:?}"));
    };
    let y = g.reshape(f, &[bd, c, h * w])?;
    Ok((g.permute(y, &[0, 2, 1])?, (h, w)))
}

#[derive(Clone, Debug)]
pub struct VitEncoder {
    pub cfg: ViTConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos_embed: ParamId,
    pub blocks: Vec<VitBlock>,
}

impl VitEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: ViTConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, p, t) = (cfg.embed_dim, cfg.patch, cfg.grid() * cfg.grid());
        let patch_w = store.add("patch_embed.weight", Tensor::randn(&[c, p * p], FROZEN_STD, rng), false);
        let patch_b = store.add("patch_embed.bias", Tensor::randn(&[c], FROZEN_STD, rng), false);
        let pos_embed = store.add("pos_embed", Tensor::randn(&[t, c], FROZEN_STD, rng), false);
        let blocks = (0..cfg.n_blocks)
            .map(|i| VitBlock::new(&cfg, &format!("blocks.{i}"), store, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, patch_w, patch_b, pos_embed, blocks })
    }

    /// `[B, 1, D, H, W]` -> positional-embedded tokens `[BD, h·w, C]`.
    fn embed<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, usize, (usize, usize))> {
        let s = g.shape(x);
        let [b, 1, d, hh, ww] = *s.as_slice() else {
            return dim_err(format!("encoder input must be [B, 1, D, H, W], got {s:?}"));
        };
        let p = self.cfg.patch;
        if hh % p != 0 || ww % p != 0 {
            return dim_err(format!("slice {hh}x{ww} not divisible by patch {p}"));
        }
        let (h, w) = (hh / p, ww / p);
        if hh != self.cfg.img_size || ww != self.cfg.img_size {
            return dim_err(format!("slice {hh}x{ww} does not match configured image size {}", self.cfg.img_size));
        }
        let y = g.reshape(x, &[b * d, h, p, w, p])?;
        let y = g.permute(y, &[0, 1, 3, 2, 4])?;
        let y = g.reshape(y, &[b * d, h * w, p * p])?;
        let y = g.linear(y, g.param(store, self.patch_w), Some(g.param(store, self.patch_b)))?;
        Ok((g.add_broadcast(y, g.param(store, self.pos_embed)), b, (h, w)))
    }

    /// Patch embedding with slices as batch, `[B, 1, D, H, W] -> [BD, C, h, w]`.
    pub fn patch_embed_slices<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (tok, _, grid) = self.embed(g, store, x)?;
        tokens_to_maps(g, tok, grid)
    }

    /// One block on feature maps `[BD, C, h, w]`.
    pub fn block_forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, i: usize, f: Var, batch: usize, opts: EncoderOptions) -> Result<Var> {
        let (tok, grid) = maps_to_tokens(g, f)?;
        let y = self.blocks[i].forward_tokens(g, store, tok, batch, grid, opts)?;
        tokens_to_maps(g, y, grid)
    }

    /// The feature maps `[BD, C, h, w]` of the last four blocks, oldest first.
    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var, opts: EncoderOptions) -> Result<Vec<Var>> {
        let (mut tok, batch, grid) = self.embed(g, store, x)?;
        let first_tap = self.blocks.len() - N_TAPS;
        let mut taps = Vec::with_capacity(N_TAPS);
        for (i, blk) in self.blocks.iter().enumerate() {
            tok = blk.forward_tokens(g, store, tok, batch, grid, opts)?;
            if i >= first_tap {
                taps.push(tokens_to_maps(g, tok, grid)?);
            }
        }
        Ok(taps)
    }
}

/// Names of trainable and frozen parameters; together they cover the store
/// exactly once.
pub fn freeze_partition<T: Real>(store: &ParamStore<T>) -> (Vec<String>, Vec<String>) {
    let (train, frozen): (Vec<_>, Vec<_>) = store.iter().map(|(_, p)| p).partition(|p| p.trainable);
    (train.into_iter().map(|p| p.name.clone()).collect(), frozen.into_iter().map(|p| p.name.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ViTConfig {
        let mut cfg = ViTConfig::toy(8);
        cfg.embed_dim = 8;
        cfg.patch = 4;
        cfg.n_heads = 2;
        cfg.lora_rank = 2;
        cfg.adapter = TpMambaConfig::new(8, 4);
        cfg
    }

    #[test]
    fn patch_embed_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let enc = VitEncoder::new(ViTConfig::toy(32), &mut store, &mut rng).unwrap();
        let g = Graph::no_grad();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 32, 32]));
        assert_eq!(g.shape(enc.patch_embed_slices(&g, &store, x).unwrap()), vec![4, 96, 2, 2]);
        let bad = g.constant(Tensor::zeros(&[1, 1, 4, 30, 32]));
        assert!(matches!(enc.patch_embed_slices(&g, &store, bad), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn too_few_blocks_is_config_error() {
        let mut cfg = tiny();
        cfg.n_blocks = 3;
        assert!(matches!(cfg.validate(), Err(crate::Error::Config(_))));
        cfg.n_blocks = 4;
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn taps_come_from_last_four_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = tiny();
        cfg.n_blocks = 6;
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::new(cfg, &mut store, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 1, 3, 8, 8], 1.0, &mut rng);
        let g = Graph::no_grad();
        let xv = g.constant(x);
        let taps = enc.forward(&g, &store, xv, EncoderOptions::default()).unwrap();
        assert_eq!(taps.len(), 4);
        let mut f = enc.patch_embed_slices(&g, &store, xv).unwrap();
        let mut per_block = Vec::new();
        for i in 0..6 {
            f = enc.block_forward(&g, &store, i, f, 1, EncoderOptions::default()).unwrap();
            per_block.push(f);
        }
        for (tap, blk) in taps.iter().zip(&per_block[2..]) {
            assert_eq!(*g.value(*tap), *g.value(*blk));
        }
    }

    #[test]
    fn param_counts_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ViTConfig::toy(32);
        let mut store = ParamStore::<f32>::new();
        VitEncoder::new(cfg.clone(), &mut store, &mut rng).unwrap();
        assert_eq!(store.count(), (cfg.trainable_param_count(), cfg.frozen_param_count()));
        let (train, frozen) = freeze_partition(&store);
        assert_eq!(train.len() + frozen.len(), store.len());
        assert!(train.iter().all(|n| n.contains("lora_") || n.contains("tpmamba")));
    }

    #[test]
    fn toy_encoder_is_mostly_frozen() {
        let cfg = ViTConfig::toy(96);
        let (t, f) = (cfg.trainable_param_count() as f64, cfg.frozen_param_count() as f64);
        assert!(t / (t + f) < 0.35, "trainable fraction {}", t / (t + f));
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = tiny();
        cfg.img_size = 4;
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::new(cfg, &mut store, &mut rng).unwrap();
        let blk = &enc.blocks[0];
        let g = Graph::no_grad();
        let x = g.constant(Tensor::randn(&[3, 1, 8], 1.0, &mut rng));
        let att = g.value(blk.attention(&g, &store, x, true).unwrap());
        let v = blk.v.forward(&g, &store, x, true).unwrap();
        let direct = g.value(blk.proj.forward(&g, &store, v).unwrap());
        for (a, b) in att.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
