//! Browser bindings. Every export returns plain numbers or a JSON string so
//! the page needs no generated type glue beyond `wasm-bindgen`'s loader.
//!
//! The `*_impl` functions hold the logic and report errors as strings, so
//! they can be exercised by native tests where JS values do not exist.

use serde_json::json;
use wasm_bindgen::prelude::*;

use tpmamba_core::adapter::{plane_flatten, Plane};
use tpmamba_core::flops::{flops_sweep, AdapterKind};
use tpmamba_core::ssm::{selective_scan, selective_scan_sequential};
use tpmamba_core::Tensor;

pub const MAX_IMPULSE_LEN: usize = 4096;

pub fn flops_table_impl(depth: usize, height: usize, width: usize, dim: usize, rank: usize) -> Result<String, String> {
    let rows = flops_sweep([depth, height, width], dim, rank).map_err(|e| e.to_string())?;
    let kinds: Vec<String> = AdapterKind::ALL.iter().map(|k| k.to_string()).collect();
    let rows: Vec<_> = rows.iter().map(|r| json!({ "depth": r.input[0], "tokens": r.tokens, "gflops": r.gflops })).collect();
    Ok(json!({ "kinds": kinds, "rows": rows }).to_string())
}

pub fn plane_order_impl(depth: usize, height: usize, width: usize, plane: &str) -> Result<Vec<u32>, String> {
    let plane: Plane = plane.parse().map_err(|e: tpmamba_core::Error| e.to_string())?;
    let grid = Tensor::<f64>::from_fn(&[1, 1, depth, height, width], |i| i as f64);
    let seq = plane_flatten(&grid, plane).map_err(|e| e.to_string())?;
    Ok(seq.data().iter().map(|&v| v as u32).collect())
}

pub fn scan_impulse_impl(len: usize, delta: f64, a: f64) -> Result<String, String> {
    if !(delta > 0.0 && a < 0.0) || len == 0 || len > MAX_IMPULSE_LEN {
        return Err(format!("need delta > 0, a < 0 and 1 <= len <= {MAX_IMPULSE_LEN}"));
    }
    let x = Tensor::from_fn(&[1, len, 1], |i| if i == 0 { 1.0 } else { 0.0 });
    let dt = Tensor::from_fn(&[1, len, 1], |_| delta);
    let a = Tensor::from_vec(&[1, 1], vec![a]);
    let ones = Tensor::from_fn(&[1, len, 1], |_| 1.0);
    let d = Tensor::from_vec(&[1], vec![0.0]);
    let fast = selective_scan(&x, &dt, &a, &ones, &ones, &d).map_err(|e| e.to_string())?;
    let oracle = selective_scan_sequential(&x, &dt, &a, &ones, &ones, &d).map_err(|e| e.to_string())?;
    Ok(json!({ "fast": fast.data(), "oracle": oracle.data() }).to_string())
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Adapter cost rows for depths `D/4 .. 4D` at fixed `H×W`, as JSON:
/// `{"kinds": [...], "rows": [{"depth", "tokens", "gflops": [...]}]}`.
#[wasm_bindgen]
pub fn flops_table(depth: usize, height: usize, width: usize, dim: usize, rank: usize) -> Result<String, JsError> {
    js(flops_table_impl(depth, height, width, dim, rank))
}

/// Order in which a scanner over `plane` ("hw", "dw", "dh" or "volume")
/// visits the voxels of a `D×H×W` grid: entry `t` is the row-major voxel
/// index read at step `t`.
#[wasm_bindgen]
pub fn plane_order(depth: usize, height: usize, width: usize, plane: &str) -> Result<Vec<u32>, JsError> {
    js(plane_order_impl(depth, height, width, plane))
}

/// Response of a one-channel, one-state selective scan to a unit impulse at
/// `t = 0` with constant step `delta` and decay rate `a < 0`, as JSON
/// `{"fast": [...], "oracle": [...]}` from the chunked kernel and the
/// step-by-step recurrence.
#[wasm_bindgen]
pub fn scan_impulse(len: usize, delta: f64, a: f64) -> Result<String, JsError> {
    js(scan_impulse_impl(len, delta, a))
}
