//! Closed-form cost of the adapters added to one ViT block, in GFlops where
//! one multiply-add counts as one flop.
//!
//! With `L = D·(H/16)·(W/16)` tokens of width `C` and adapter rank `r`:
//!
//! - `sa_adapter`: global attention over all `L` tokens of the volume plus
//!   the down/up projections, `2·L²·C + 2·L·C·r`.
//! - `lora`: low-rank updates on the query and value projections,
//!   `2 · 2·r_lora·C · L`.
//! - `conv3d_adapter`: `1×1×1` down, `3×3×3` conv at rank `r`, `1×1×1` up,
//!   `L·C·r + 27·L·r² + L·r·C`.
//! - `tp_mamba`: depth conv reduce and raise (`k·C·r` per token each), the
//!   multi-scale branches (`k·r²`), and three Mamba scanners whose cost is
//!   linear in `L`.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::ssm::MambaConfig;

pub const PATCH: usize = 16;
/// Rank of the LoRA baseline used for the cost comparison.
pub const LORA_BASELINE_RANK: usize = 12;
const DEPTH_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKind {
    Lora,
    SaAdapter,
    Conv3dAdapter,
    TpMamba,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 4] = [AdapterKind::Lora, AdapterKind::SaAdapter, AdapterKind::Conv3dAdapter, AdapterKind::TpMamba];
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::Lora => "lora",
            AdapterKind::SaAdapter => "sa_adapter",
            AdapterKind::Conv3dAdapter => "conv3d_adapter",
            AdapterKind::TpMamba => "tp_mamba",
        })
    }
}

impl FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AdapterKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter kind {s:?}")))
    }
}

/// Token count of a `D×H×W` input after `16×16` in-plane patching.
pub fn tokens(input: [usize; 3]) -> f64 {
    (input[0] * (input[1] / PATCH) * (input[2] / PATCH)) as f64
}

fn mamba_macs(l: f64, r: usize) -> f64 {
    let m = MambaConfig::new(r);
    let (r, e, n, dr, k) = (r as f64, m.inner() as f64, m.d_state as f64, m.dt_rank as f64, m.d_conv as f64);
    let in_proj = r * 2.0 * e;
    let conv = e * k;
    let x_proj = e * (dr + 2.0 * n);
    let dt_proj = dr * e;
    // state update (decay and input) and readout per state element, plus skip and gate
    let scan = 3.0 * e * n + 2.0 * e;
    let out_proj = e * r;
    l * (in_proj + conv + x_proj + dt_proj + scan + out_proj)
}

/// GFlops added to one block by `kind` for a `D×H×W` input.
pub fn flops_estimate(kind: AdapterKind, input: [usize; 3], c: usize, r: usize) -> Result<f64> {
    if input.contains(&0) || c == 0 || r == 0 {
        return config_err(format!("flops estimate needs positive sizes, got {input:?}, C={c}, r={r}"));
    }
    let l = tokens(input);
    let (cf, rf) = (c as f64, r as f64);
    let k = DEPTH_KERNEL as f64;
    let macs = match kind {
        AdapterKind::SaAdapter => 2.0 * l * l * cf + 2.0 * l * cf * rf,
        AdapterKind::Lora => 2.0 * 2.0 * LORA_BASELINE_RANK as f64 * cf * l,
        AdapterKind::Conv3dAdapter => l * cf * rf + 27.0 * l * rf * rf + l * rf * cf,
        AdapterKind::TpMamba => 2.0 * l * k * cf * rf + l * k * rf * rf + 3.0 * mamba_macs(l, r),
    };
    Ok(macs / 1e9)
}

/// One row of the sweep: input extent and cost of every adapter kind.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub input: [usize; 3],
    pub tokens: f64,
    pub gflops: [f64; 4],
}

/// Costs for `D·2^k` (k = −2..=2, at least one slice) at fixed `H`, `W`.
pub fn flops_sweep(input: [usize; 3], c: usize, r: usize) -> Result<Vec<SweepRow>> {
    if input.contains(&0) {
        return config_err(format!("sweep input must be non-empty, got {input:?}"));
    }
    let mut rows: Vec<SweepRow> = Vec::new();
    for shift in -2i32..=2 {
        let d = if shift < 0 { input[0] >> (-shift) } else { input[0] << shift }.max(1);
        if rows.last().is_some_and(|row| row.input[0] == d) {
            continue;
        }
        let dims = [d, input[1], input[2]];
        let mut gflops = [0.0; 4];
        for (g, kind) in gflops.iter_mut().zip(AdapterKind::ALL) {
            *g = flops_estimate(kind, dims, c, r)?;
        }
        rows.push(SweepRow { input: dims, tokens: tokens(dims), gflops });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const REF: [usize; 3] = [96, 96, 96];

    #[test]
    fn reference_point() {
        let sa = flops_estimate(AdapterKind::SaAdapter, REF, 768, 96).unwrap();
        assert!((sa - 18.855).abs() < 1e-3, "{sa}");
        let lora = flops_estimate(AdapterKind::Lora, REF, 768, 96).unwrap();
        assert!((100.0..=200.0).contains(&(sa / lora)));
    }

    #[test]
    fn monotone_in_every_size() {
        for kind in AdapterKind::ALL {
            let base = flops_estimate(kind, [32, 64, 64], 96, 24).unwrap();
            for bigger in [[33, 64, 64], [32, 80, 64], [32, 64, 80]] {
                assert!(flops_estimate(kind, bigger, 96, 24).unwrap() >= base);
            }
            assert!(flops_estimate(kind, [32, 64, 64], 96, 48).unwrap() >= base);
        }
    }

    #[test]
    fn attention_grows_faster_than_scan() {
        let rows = flops_sweep(REF, 768, 96).unwrap();
        let ratios: Vec<f64> = rows.iter().map(|r| r.gflops[1] / r.gflops[3]).collect();
        assert!(ratios.windows(2).all(|w| w[1] > w[0]));
        assert!("mlp_adapter".parse::<AdapterKind>().is_err());
        assert!(flops_sweep([0, 96, 96], 768, 96).is_err());
    }
}
