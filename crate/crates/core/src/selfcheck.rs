//! Self-contained verification suites run by `tpmamba check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{plane_flatten, plane_unflatten, Plane, ScanMode, TpMambaAdapter, TpMambaConfig};
use crate::checkpoint::Checkpoint;
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{EncoderOptions, ViTConfig, VitEncoder};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::loss::Labels;
use crate::ops::softplus;
use crate::params::ParamStore;
use crate::real::Real;
use crate::ssm::{selective_scan, selective_scan_sequential};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

pub const SCAN_LENGTHS: [usize; 5] = [1, 2, 7, 64, 513];

/// Random scan operands: `x, Δ, A, B, C, D` with `Δ > 0` and `A < 0`.
pub type ScanOperands<T> = [Tensor<T>; 6];

pub fn random_scan_operands<R: Rng>(rng: &mut R, len: usize) -> ScanOperands<f64> {
    let (b, e, n) = (rng.gen_range(1..=2), rng.gen_range(1..=8), rng.gen_range(1..=16));
    sized_scan_operands(rng, b, len, e, n)
}

/// Scan operands with explicit batch, length, inner width and state size.
pub fn sized_scan_operands<R: Rng>(rng: &mut R, b: usize, len: usize, e: usize, n: usize) -> ScanOperands<f64> {
    let x = Tensor::randn(&[b, len, e], 1.0, rng);
    let delta = Tensor::randn(&[b, len, e], 1.0, rng).map(|v: f64| softplus(v - 1.0));
    let a = Tensor::randn(&[e, n], 0.5, rng).map(|v: f64| -v.exp());
    let bm = Tensor::randn(&[b, len, n], 1.0, rng);
    let cm = Tensor::randn(&[b, len, n], 1.0, rng);
    let d = Tensor::randn(&[e], 1.0, rng);
    [x, delta, a, bm, cm, d]
}

/// `max|y − y_ref| / max|y_ref|` of the production scan against the
/// sequential recurrence.
pub fn scan_relative_error<T: Real>(ops: &ScanOperands<f64>) -> Result<f64> {
    let cast: Vec<Tensor<T>> = ops.iter().map(|t| t.cast()).collect();
    let fast = selective_scan(&cast[0], &cast[1], &cast[2], &cast[3], &cast[4], &cast[5])?;
    let oracle = selective_scan_sequential(&cast[0], &cast[1], &cast[2], &cast[3], &cast[4], &cast[5])?;
    let diff = fast.data().iter().zip(oracle.data()).map(|(a, b)| (*a - *b).abs().as_f64()).fold(0.0, f64::max);
    let scale = oracle.max_abs().as_f64().max(f64::MIN_POSITIVE);
    Ok(diff / scale)
}

/// 100 random configurations cycling through [`SCAN_LENGTHS`].
pub fn scan_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst32, mut worst64) = (0f64, 0f64);
    for i in 0..100 {
        let ops = random_scan_operands(&mut rng, SCAN_LENGTHS[i % SCAN_LENGTHS.len()]);
        worst32 = worst32.max(scan_relative_error::<f32>(&ops)?);
        worst64 = worst64.max(scan_relative_error::<f64>(&ops)?);
    }
    Ok(vec![
        CheckOutcome::new("scan f32 vs sequential", worst32 < 1e-5, format!("max rel err {worst32:.3e}")),
        CheckOutcome::new("scan f64 vs sequential", worst64 < 1e-10, format!("max rel err {worst64:.3e}")),
    ])
}

fn project(g: &Graph<f64>, y: Var, seed: u64) -> Var {
    let r = Tensor::randn(&g.shape(y), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    g.sum(g.mul(y, g.constant(r)))
}

/// Adds Gaussian noise to every trainable tensor so zero-initialized paths
/// carry signal. Weight noise shrinks with fan-in to keep activations O(1)
/// at any width.
pub fn perturb<T: Real>(store: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
        let shape = p.value.shape();
        let fan_in = if shape.len() > 1 { shape[1..].iter().product::<usize>() } else { 1 };
        let noise = Tensor::randn(shape, 0.2 / (fan_in as f64).sqrt().max(1.0), &mut rng);
        p.value.add_assign(&noise);
    }
}

/// An 8-wide, 4-block encoder small enough for exhaustive checks.
pub fn small_vit() -> ViTConfig {
    let mut cfg = ViTConfig::toy(8);
    cfg.embed_dim = 8;
    cfg.patch = 4;
    cfg.n_heads = 2;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 2.0;
    cfg.adapter = TpMambaConfig { d_state: 4, ..TpMambaConfig::new(8, 4) };
    cfg
}

fn grad_outcome<F>(name: &str, store: &mut ParamStore<f64>, samples: usize, f: F) -> Result<CheckOutcome>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let rep = grad_check(store, f, &GradCheckOptions { samples_per_param: samples, ..Default::default() })?;
    Ok(CheckOutcome::new(name, rep.max_rel_error < 1e-3, format!("max rel err {:.3e} over {} coords", rep.max_rel_error, rep.coordinates)))
}

/// Finite-difference check of a perturbed adapter on `[B·D, C, h, w]`
/// slices at f64.
pub fn adapter_grad_check(cfg: &TpMambaConfig, slices: [usize; 4], batch: usize, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let ad = TpMambaAdapter::new(cfg.clone(), "ad", &mut s, &mut rng)?;
    perturb(&mut s, seed + 1);
    let f = s.add("input", Tensor::randn(&slices, 1.0, &mut rng), false);
    grad_check(&mut s, |g, s| Ok(project(g, ad.forward(g, s, g.param(s, f), batch)?, 1)), &GradCheckOptions { samples_per_param: samples, ..Default::default() })
}

/// Finite-difference checks of the adapter, one ViT block, the decoder and
/// the loss at f64.
pub fn grad_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let rep = adapter_grad_check(&TpMambaConfig { d_state: 4, ..TpMambaConfig::new(6, 4) }, [6, 6, 2, 3], 2, 4, seed)?;
    out.push(CheckOutcome::new("grad tp_mamba adapter", rep.max_rel_error < 1e-3, format!("max rel err {:.3e} over {} coords", rep.max_rel_error, rep.coordinates)));

    let mut s = ParamStore::new();
    let enc = VitEncoder::new(small_vit(), &mut s, &mut rng)?;
    perturb(&mut s, seed + 2);
    let f = s.add("input", Tensor::randn(&[3, 8, 2, 2], 1.0, &mut rng), false);
    out.push(grad_outcome("grad vit block", &mut s, 3, |g, s| {
        Ok(project(g, enc.block_forward(g, s, 0, g.param(s, f), 1, EncoderOptions::default())?, 2))
    })?);

    let mut s = ParamStore::new();
    let dec = Decoder::new(DecoderConfig::new(4, 3, 4)?, &mut s, &mut rng)?;
    let taps: Vec<_> = (0..4).map(|i| s.add(format!("tap{i}"), Tensor::randn(&[2, 4, 2, 2], 1.0, &mut rng), true)).collect();
    out.push(grad_outcome("grad decoder", &mut s, 4, |g, s| {
        let t: Vec<Var> = taps.iter().map(|&id| g.param(s, id)).collect();
        Ok(project(g, dec.forward(g, s, &t, 1)?, 3))
    })?);

    let mut s = ParamStore::new();
    let z = s.add("logits", Tensor::randn(&[1, 2, 4, 4, 4], 1.5, &mut rng), true);
    let labels = Labels::new(&[1, 4, 4, 4], (0..64).map(|i| u8::from(i % 3 == 0)).collect())?;
    out.push(grad_outcome("grad dice_ce", &mut s, 64, |g, s| g.dice_ce(g.param(s, z), &labels))?);
    Ok(out)
}

/// `max|tri_plane − (hw + dw + dh)| / max|hw + dw + dh|` on a random
/// `[B, r, D, h, w]` input, where each plane term comes from a single-plane
/// adapter holding the same weights as the tri-plane one.
pub fn tri_plane_sum_error(cfg: &TpMambaConfig, dims: [usize; 5], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tri_cfg = TpMambaConfig { scan_mode: ScanMode::TriPlane, ..cfg.clone() };
    let mut s = ParamStore::<f32>::new();
    let tri = TpMambaAdapter::new(tri_cfg, "ad", &mut s, &mut rng)?;
    perturb(&mut s, seed ^ 0x5eed);
    let x = Tensor::<f32>::randn(&dims, 1.0, &mut rng);

    let g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let whole = g.value(tri.scan(&g, &s, xv)?);

    let mut sum: Option<Tensor<f32>> = None;
    for (plane, mode) in [(Plane::Hw, ScanMode::HwOnly), (Plane::Dw, ScanMode::DwOnly), (Plane::Dh, ScanMode::DhOnly)] {
        let mut single = ParamStore::<f32>::new();
        let ad = TpMambaAdapter::new(TpMambaConfig { scan_mode: mode, ..cfg.clone() }, "ad", &mut single, &mut rng)?;
        for (_, p) in single.iter_mut() {
            p.value = s.by_name(&p.name)?.value.clone();
        }
        debug_assert_eq!(ad.scanners[0].0, plane);
        let g = Graph::no_grad();
        let y = g.value(ad.scan(&g, &single, g.constant(x.clone()))?).as_ref().clone();
        match sum.as_mut() {
            Some(acc) => acc.add_assign(&y),
            None => sum = Some(y),
        }
    }
    let sum = sum.expect("three planes");
    let diff = whole.data().iter().zip(sum.data()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
    Ok(diff / (sum.max_abs() as f64).max(f64::MIN_POSITIVE))
}

/// True when a freshly built adapter returns its input bit for bit.
pub fn adapter_is_transparent(cfg: &TpMambaConfig, slices: [usize; 4], seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::<f32>::new();
    let ad = TpMambaAdapter::new(cfg.clone(), "ad", &mut s, &mut rng)?;
    let x = Tensor::<f32>::randn(&slices, 1.0, &mut rng);
    let g = Graph::no_grad();
    let y = g.value(ad.forward(&g, &s, g.constant(x.clone()), 1)?);
    Ok(bits_equal(&y, &x))
}

/// True when a freshly built encoder with LoRA and adapters matches the
/// plain frozen backbone bit for bit on `inputs` random volumes.
pub fn encoder_is_transparent(vit: ViTConfig, depth: usize, inputs: usize, seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::<f32>::new();
    let img = vit.img_size;
    let enc = VitEncoder::new(vit, &mut s, &mut rng)?;
    for _ in 0..inputs {
        let x = Tensor::<f32>::randn(&[1, 1, depth, img, img], 1.0, &mut rng);
        let g = Graph::no_grad();
        let full = enc.forward(&g, &s, g.constant(x.clone()), EncoderOptions::default())?;
        let plain = enc.forward(&g, &s, g.constant(x), EncoderOptions::FROZEN)?;
        if !full.iter().zip(&plain).all(|(&a, &b)| bits_equal(&g.value(a), &g.value(b))) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn bits_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Five random `[B, C, D, H, W]` shapes with every extent in `1..=6`.
pub fn random_shapes<R: Rng>(rng: &mut R) -> Vec<[usize; 5]> {
    (0..5).map(|_| std::array::from_fn(|_| rng.gen_range(1..=6))).collect()
}

/// Bit-exact plane flatten/unflatten and checkpoint byte round trips.
pub fn roundtrip_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exact = true;
    for plane in Plane::ALL {
        for dims in random_shapes(&mut rng) {
            let x = Tensor::<f32>::randn(&dims, 1.0, &mut rng);
            let back = plane_unflatten(&plane_flatten(&x, plane)?, plane, dims)?;
            exact &= bits_equal(&back, &x);
        }
    }
    let mut s = ParamStore::<f32>::new();
    VitEncoder::new(small_vit(), &mut s, &mut rng)?;
    let ck = Checkpoint::from_store(&s, vec![("seed".into(), seed.to_string())], seed);
    let bytes = ck.to_bytes()?;
    let mut s2 = s.clone();
    for (_, p) in s2.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    Checkpoint::from_bytes(&bytes)?.restore(&mut s2)?;
    let again = Checkpoint::from_store(&s2, vec![("seed".into(), seed.to_string())], seed).to_bytes()?;
    let tri = tri_plane_sum_error(&TpMambaConfig { d_state: 4, ..TpMambaConfig::new(8, 8) }, [1, 8, 3, 4, 5], seed)?;
    let transparent = adapter_is_transparent(&TpMambaConfig::new(8, 8), [3, 8, 4, 4], seed)? && encoder_is_transparent(small_vit(), 3, 5, seed)?;
    Ok(vec![
        CheckOutcome::new("plane flatten/unflatten bit-exact", exact, "4 planes x 5 random shapes"),
        CheckOutcome::new("tri_plane equals sum of planes", tri < 1e-6, format!("max rel diff {tri:.3e}")),
        CheckOutcome::new("fresh adapters are the identity", transparent, "adapter and encoder, bit-exact"),
        CheckOutcome::new("checkpoint save/load/save identical", bytes == again, format!("{} bytes", bytes.len())),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_suite_passes() {
        assert!(roundtrip_suite(0).unwrap().iter().all(|c| c.passed));
    }

    #[test]
    fn scan_error_is_zero_at_length_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ops = random_scan_operands(&mut rng, 1);
        assert_eq!(scan_relative_error::<f64>(&ops).unwrap(), 0.0);
    }
}
