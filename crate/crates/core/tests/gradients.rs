//! Finite-difference verification of every differentiable op at f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpmamba_core::adapter::{ConvMode, Plane, ScanMode, TpMambaAdapter, TpMambaConfig};
use tpmamba_core::decoder::{Decoder, DecoderConfig};
use tpmamba_core::encoder::{EncoderOptions, ViTConfig, VitEncoder};
use tpmamba_core::gradcheck::{grad_check, GradCheckOptions};
use tpmamba_core::loss::Labels;
use tpmamba_core::model::SegModel;
use tpmamba_core::ops::{Conv3dGeometry, NormKind, NORM_EPS};
use tpmamba_core::ssm::{MambaBlock, MambaConfig};
use tpmamba_core::{Graph, ParamStore, Result, Tensor, Var};

const TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random projection of `y` to a scalar, so no gradient cancels by symmetry.
fn project(g: &Graph<f64>, y: Var, seed: u64) -> Var {
    let r = Tensor::randn(&g.shape(y), 1.0, &mut rng(seed ^ 0xabc));
    g.sum(g.mul(y, g.constant(r)))
}

/// Re-draws every trainable tensor so zero-initialized paths carry gradient.
fn perturb_trainables(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut r = rng(seed);
    for (_, p) in store.iter_mut() {
        if p.trainable {
            let noise = Tensor::randn(p.value.shape(), std, &mut r);
            p.value.add_assign(&noise);
        }
    }
}

fn check<F>(store: &mut ParamStore<f64>, samples: usize, f: F)
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let rep = grad_check(store, f, &GradCheckOptions { samples_per_param: samples, ..Default::default() }).unwrap();
    assert!(rep.params_checked > 0);
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn linear_and_matmul() {
    for (seed, shape) in [(1, vec![3, 4]), (2, vec![2, 3, 5])] {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let fan = *shape.last().unwrap();
        let x = s.add("x", Tensor::randn(&shape, 1.0, &mut r), true);
        let w = s.add("w", Tensor::randn(&[6, fan], 1.0, &mut r), true);
        let b = s.add("b", Tensor::randn(&[6], 1.0, &mut r), true);
        let m = s.add("m", Tensor::randn(&[6, 2], 1.0, &mut r), true);
        check(&mut s, 20, |g, s| {
            let y = g.linear(g.param(s, x), g.param(s, w), Some(g.param(s, b)))?;
            let y = g.matmul(y, g.param(s, m))?;
            Ok(project(g, y, seed))
        });
    }
    let mut r = rng(3);
    let mut s = ParamStore::new();
    let a = s.add("a", Tensor::randn(&[2, 3, 4], 1.0, &mut r), true);
    let b = s.add("b", Tensor::randn(&[2, 4, 5], 1.0, &mut r), true);
    check(&mut s, 24, |g, s| Ok(project(g, g.matmul(g.param(s, a), g.param(s, b))?, 3)));
}

#[test]
fn sum_of_matmul_is_tight() {
    let mut r = rng(30);
    let mut s = ParamStore::new();
    let a = s.add("a", Tensor::randn(&[3, 4], 1.0, &mut r), true);
    let b = s.add("b", Tensor::randn(&[4, 2], 1.0, &mut r), true);
    let rep = grad_check(&mut s, |g, s| Ok(g.sum(g.matmul(g.param(s, a), g.param(s, b))?)), &GradCheckOptions { samples_per_param: 12, ..Default::default() }).unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn conv3d_dilated_and_padded() {
    let cases = [
        (4, [2, 3, 5, 4, 4], [4, 3, 3, 3, 3], [1, 1, 1], [1, 1, 1]),
        (5, [1, 4, 9, 2, 3], [2, 4, 3, 1, 1], [4, 1, 1], [4, 0, 0]),
    ];
    for (seed, xs, ws, dil, pad) in cases {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::randn(&xs, 1.0, &mut r), true);
        let w = s.add("w", Tensor::randn(&ws, 0.5, &mut r), true);
        let b = s.add("b", Tensor::randn(&[ws[0]], 1.0, &mut r), true);
        let geom = Conv3dGeometry { dilation: dil, padding: pad };
        check(&mut s, 20, |g, s| {
            let y = g.conv3d(g.param(s, x), g.param(s, w), Some(g.param(s, b)), geom)?;
            Ok(project(g, y, seed))
        });
    }
}

#[test]
fn depthwise_causal_conv() {
    for (seed, shape) in [(6, [1, 3, 7]), (7, [2, 5, 12])] {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::randn(&shape, 1.0, &mut r), true);
        let w = s.add("w", Tensor::randn(&[shape[1], 1, 4], 1.0, &mut r), true);
        let b = s.add("b", Tensor::randn(&[shape[1]], 1.0, &mut r), true);
        check(&mut s, 20, |g, s| Ok(project(g, g.conv1d_depthwise(g.param(s, x), g.param(s, w), Some(g.param(s, b)))?, seed)));
    }
}

#[test]
fn normalizations() {
    for (seed, kind, shape, feat) in [(8, NormKind::Layer, vec![3, 6], 6), (9, NormKind::Layer, vec![2, 2, 5], 5), (10, NormKind::Instance, vec![2, 3, 2, 3, 2], 3), (11, NormKind::Instance, vec![1, 2, 4, 1, 3], 2)] {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::randn(&shape, 2.0, &mut r), true);
        let ga = s.add("gamma", Tensor::randn(&[feat], 1.0, &mut r), true);
        let be = s.add("beta", Tensor::randn(&[feat], 1.0, &mut r), true);
        check(&mut s, 20, |g, s| {
            let y = g.normalize(g.param(s, x), kind, Some(g.param(s, ga)), Some(g.param(s, be)), NORM_EPS)?;
            Ok(project(g, y, seed))
        });
    }
}

#[test]
fn elementwise_and_softmax() {
    for (seed, shape) in [(12, vec![4, 5]), (13, vec![2, 3, 4])] {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::randn(&shape, 1.5, &mut r), true);
        let y = s.add("y", Tensor::randn(&shape, 1.0, &mut r), true);
        let bias = s.add("bias", Tensor::randn(&shape[1..], 1.0, &mut r), true);
        check(&mut s, 30, |g, s| {
            let (xv, yv) = (g.param(s, x), g.param(s, y));
            let mut acc = g.add(g.gelu(xv), g.silu(yv));
            acc = g.add(acc, g.mul(g.softplus(xv), g.sigmoid(yv)));
            acc = g.sub(acc, g.scale(g.exp(g.scale(xv, 0.3)), 0.7));
            acc = g.add(acc, g.softmax(g.neg(yv), 1));
            acc = g.add_broadcast(acc, g.param(s, bias));
            Ok(g.add(project(g, acc, seed), g.mean(g.mul(xv, xv))))
        });
    }
}

#[test]
fn shape_ops() {
    let mut r = rng(14);
    let mut s = ParamStore::new();
    let a = s.add("a", Tensor::randn(&[2, 3, 4], 1.0, &mut r), true);
    let b = s.add("b", Tensor::randn(&[2, 2, 4], 1.0, &mut r), true);
    check(&mut s, 30, |g, s| {
        let c = g.concat(&[g.param(s, a), g.param(s, b)], 1)?;
        let p = g.permute(c, &[2, 0, 1])?;
        let n = g.narrow(p, 2, 1, 3)?;
        let rs = g.reshape(n, &[8, 3])?;
        Ok(project(g, rs, 14))
    });
}

#[test]
fn upsample() {
    for (seed, shape) in [(15, [1, 2, 2, 3, 3]), (16, [2, 1, 1, 2, 4])] {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::randn(&shape, 1.0, &mut r), true);
        check(&mut s, 30, |g, s| Ok(project(g, g.upsample_hw(g.param(s, x), 2)?, seed)));
    }
}

#[test]
fn selective_scan_op() {
    for (seed, (bsz, l, e, n)) in [(17, (1, 5, 3, 2)), (18, (2, 70, 2, 3))] {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::randn(&[bsz, l, e], 1.0, &mut r), true);
        let dt = s.add("dt", Tensor::randn(&[bsz, l, e], 1.0, &mut r), true);
        let a = s.add("a_log", Tensor::randn(&[e, n], 0.5, &mut r), true);
        let bm = s.add("b", Tensor::randn(&[bsz, l, n], 1.0, &mut r), true);
        let cm = s.add("c", Tensor::randn(&[bsz, l, n], 1.0, &mut r), true);
        let d = s.add("d", Tensor::randn(&[e], 1.0, &mut r), true);
        check(&mut s, 12, |g, s| {
            let delta = g.softplus(g.param(s, dt));
            let am = g.neg(g.exp(g.param(s, a)));
            let y = g.selective_scan(g.param(s, x), delta, am, g.param(s, bm), g.param(s, cm), g.param(s, d))?;
            Ok(project(g, y, seed))
        });
    }
}

#[test]
fn mamba_block() {
    for (seed, shape) in [(19, [1, 6, 4]), (20, [3, 9, 4])] {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let blk = MambaBlock::new(MambaConfig::new(4), "phi", &mut s, &mut r).unwrap();
        perturb_trainables(&mut s, 0.2, seed);
        let x = s.add("x", Tensor::randn(&shape, 1.0, &mut r), true);
        check(&mut s, 6, |g, s| Ok(project(g, blk.forward(g, s, g.param(s, x))?, seed)));
    }
}

#[test]
fn adapter_every_mode() {
    let modes = [ScanMode::TriPlane, ScanMode::HwOnly, ScanMode::DwOnly, ScanMode::DhOnly, ScanMode::VolumeFlatten];
    for (i, mode) in modes.into_iter().enumerate() {
        for conv in [ConvMode::MultiScale, ConvMode::Single] {
            let seed = 30 + i as u64;
            let mut r = rng(seed);
            let mut s = ParamStore::new();
            let mut cfg = TpMambaConfig::new(6, 4);
            cfg.scan_mode = mode;
            cfg.conv_mode = conv;
            cfg.d_state = 4;
            let ad = TpMambaAdapter::new(cfg, "ad", &mut s, &mut r).unwrap();
            perturb_trainables(&mut s, 0.2, seed);
            let f = s.add("f", Tensor::randn(&[2 * 3, 6, 2, 3], 1.0, &mut r), false);
            check(&mut s, 4, |g, s| Ok(project(g, ad.forward(g, s, g.param(s, f), 2)?, seed)));
        }
    }
}

#[test]
fn plane_flatten_graph_ops() {
    for (i, plane) in Plane::ALL.into_iter().enumerate() {
        let mut r = rng(40 + i as u64);
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::randn(&[2, 3, 2, 3, 4], 1.0, &mut r), true);
        check(&mut s, 20, |g, s| {
            let q = g.plane_flatten(g.param(s, x), plane)?;
            let q = g.mul(q, q);
            Ok(project(g, g.plane_unflatten(q, plane, [2, 3, 2, 3, 4])?, 40))
        });
    }
}

fn tiny_vit(img: usize) -> ViTConfig {
    let mut cfg = ViTConfig::toy(img);
    cfg.embed_dim = 8;
    cfg.patch = 4;
    cfg.n_heads = 2;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 2.0;
    cfg.adapter = TpMambaConfig::new(8, 4);
    cfg.adapter.d_state = 4;
    cfg
}

#[test]
fn vit_block_trainables_only() {
    for (seed, depth) in [(50, 2), (51, 3)] {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let enc = VitEncoder::new(tiny_vit(8), &mut s, &mut r).unwrap();
        perturb_trainables(&mut s, 0.2, seed);
        let f = s.add("f", Tensor::randn(&[depth, 8, 2, 2], 1.0, &mut r), false);
        check(&mut s, 3, |g, s| Ok(project(g, enc.block_forward(g, s, 0, g.param(s, f), 1, EncoderOptions::default())?, seed)));
        assert!(s.iter().filter(|(_, p)| !p.trainable).all(|(_, p)| p.grad.is_none()));
    }
}

#[test]
fn decoder_all_params() {
    for (seed, (b, d)) in [(52, (1, 2)), (53, (2, 1))] {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let dec = Decoder::new(DecoderConfig::new(4, 3, 4).unwrap(), &mut s, &mut r).unwrap();
        let taps: Vec<_> = (0..4).map(|i| s.add(format!("tap{i}"), Tensor::randn(&[b * d, 4, 2, 2], 1.0, &mut r), true)).collect();
        check(&mut s, 4, |g, s| {
            let t: Vec<Var> = taps.iter().map(|&id| g.param(s, id)).collect();
            Ok(project(g, dec.forward(g, s, &t, b)?, seed))
        });
    }
}

#[test]
fn dice_ce_loss() {
    for (seed, k) in [(54, 2), (55, 3)] {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        let z = s.add("z", Tensor::randn(&[1, k, 4, 4, 4], 1.5, &mut r), true);
        let lab: Vec<u8> = (0..64).map(|i| ((i * 7 + seed as usize) % (k + 2)).min(k - 1) as u8).collect();
        let labels = Labels::new(&[1, 4, 4, 4], lab).unwrap();
        check(&mut s, 40, |g, s| g.dice_ce(g.param(s, z), &labels));
    }
}

#[test]
fn full_model_through_loss() {
    let mut r = rng(60);
    let mut s = ParamStore::new();
    let model = SegModel::new(tiny_vit(8), 2, &mut s, &mut r).unwrap();
    perturb_trainables(&mut s, 0.1, 60);
    let x = Tensor::randn(&[1, 1, 2, 8, 8], 1.0, &mut r);
    let labels = Labels::new(&[1, 2, 8, 8], (0..128).map(|i| ((i / 5) % 2) as u8).collect()).unwrap();
    check(&mut s, 2, |g, s| {
        let logits = model.forward(g, s, g.constant(x.clone()))?;
        g.dice_ce(logits, &labels)
    });
}
