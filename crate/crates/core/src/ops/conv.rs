//! Stride-1 cross-correlations: dense 3-D convolution (im2col + gemm) and the
//! causal depthwise 1-D convolution used inside the state-space block.

use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Dilation and zero padding per spatial axis `(depth, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dGeometry {
    pub fn valid() -> Self {
        Self { dilation: [1; 3], padding: [0; 3] }
    }

    /// Padding that preserves every extent for an odd kernel.
    pub fn same(kernel: [usize; 3], dilation: [usize; 3]) -> Result<Self> {
        let mut padding = [0; 3];
        for i in 0..3 {
            if kernel[i].is_multiple_of(2) {
                return config_err(format!("same padding needs an odd kernel, got {:?}", kernel));
            }
            padding[i] = dilation[i] * (kernel[i] - 1) / 2;
        }
        Ok(Self { dilation, padding })
    }
}

/// Span of input positions touched by one output along an axis.
pub fn effective_kernel(k: usize, dilation: usize) -> usize {
    1 + (k - 1) * dilation
}

struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    inp: [usize; 3],
    out: [usize; 3],
    kernel: [usize; 3],
}

impl ConvDims {
    fn kvol(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }
}

fn conv_dims(x: &[usize], w: &[usize], geom: &Conv3dGeometry) -> Result<ConvDims> {
    if x.len() != 5 || w.len() != 5 {
        return dim_err(format!("conv3d expects 5-d input and weight, got {x:?} and {w:?}"));
    }
    if x[1] != w[1] {
        return dim_err(format!("conv3d channel mismatch: input {x:?} vs weight {w:?}"));
    }
    let mut out = [0; 3];
    for i in 0..3 {
        let span = effective_kernel(w[2 + i], geom.dilation[i]);
        let padded = x[2 + i] + 2 * geom.padding[i];
        if padded < span {
            return dim_err(format!("conv3d kernel {w:?} with {geom:?} does not fit input {x:?}"));
        }
        out[i] = padded - span + 1;
    }
    Ok(ConvDims { batch: x[0], cin: x[1], cout: w[0], inp: [x[2], x[3], x[4]], out, kernel: [w[2], w[3], w[4]] })
}

// Output-depth rows per im2col chunk, bounding the column buffer.
fn chunk_depth(d: &ConvDims) -> usize {
    const MAX_COLS: usize = 1 << 23;
    let per_slice = d.kvol() * d.out[1] * d.out[2];
    (MAX_COLS / per_slice.max(1)).clamp(1, d.out[0])
}

/// Visits, for every (kernel row, output row) pair in an output-depth chunk,
/// the contiguous run of output columns that reads valid input, passing
/// `(col_offset, input_offset, len)`.
fn for_each_run(d: &ConvDims, g: &Conv3dGeometry, batch: usize, od0: usize, nd: usize, mut f: impl FnMut(usize, usize, usize)) {
    let [ind, inh, inw] = d.inp;
    let [_, oh_n, ow_n] = d.out;
    let [kd, kh, kw] = d.kernel;
    let p = nd * oh_n * ow_n;
    let mut kidx = 0;
    for ci in 0..d.cin {
        let x_base = (batch * d.cin + ci) * ind * inh * inw;
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let col_row = kidx * p;
                    kidx += 1;
                    let shift_w = (c * g.dilation[2]) as isize - g.padding[2] as isize;
                    let ow_lo = (-shift_w).max(0) as usize;
                    let ow_hi = ((inw as isize - shift_w).min(ow_n as isize)).max(0) as usize;
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for od in 0..nd {
                        let id = (od0 + od + a * g.dilation[0]) as isize - g.padding[0] as isize;
                        if id < 0 || id >= ind as isize {
                            continue;
                        }
                        for oh in 0..oh_n {
                            let ih = (oh + b * g.dilation[1]) as isize - g.padding[1] as isize;
                            if ih < 0 || ih >= inh as isize {
                                continue;
                            }
                            let col = col_row + (od * oh_n + oh) * ow_n + ow_lo;
                            let src = x_base + (id as usize * inh + ih as usize) * inw + (ow_lo as isize + shift_w) as usize;
                            f(col, src, ow_hi - ow_lo);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], d: &ConvDims, g: &Conv3dGeometry, batch: usize, od0: usize, nd: usize, cols: &mut Vec<T>) {
    let p = nd * d.out[1] * d.out[2];
    cols.clear();
    cols.resize(d.kvol() * p, T::zero());
    for_each_run(d, g, batch, od0, nd, |col, src, len| {
        cols[col..col + len].copy_from_slice(&x[src..src + len]);
    });
}

fn col2im_add<T: Real>(cols: &[T], d: &ConvDims, g: &Conv3dGeometry, batch: usize, od0: usize, nd: usize, gx: &mut [T]) {
    for_each_run(d, g, batch, od0, nd, |col, src, len| {
        for (dst, &v) in gx[src..src + len].iter_mut().zip(&cols[col..col + len]) {
            *dst += v;
        }
    });
}

/// Plain 3-D cross-correlation; `x: [B, Cin, D, H, W]`, `w: [Cout, Cin, kd, kh, kw]`.
pub fn conv3d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geom: &Conv3dGeometry) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), w.shape(), geom)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return dim_err(format!("conv3d bias {:?} does not match {} output channels", b.shape(), d.cout));
        }
    }
    let out_sp: usize = d.out.iter().product();
    let plane = d.out[1] * d.out[2];
    let kvol = d.kvol();
    let mut out = vec![T::zero(); d.batch * d.cout * out_sp];
    let direct = d.kernel == [1, 1, 1] && geom.padding == [0; 3];
    let step = chunk_depth(&d);
    let mut cols = Vec::new();
    for bi in 0..d.batch {
        let out_b = &mut out[bi * d.cout * out_sp..(bi + 1) * d.cout * out_sp];
        if direct {
            let x_b = &x.data()[bi * d.cin * out_sp..(bi + 1) * d.cin * out_sp];
            T::gemm(d.cout, kvol, out_sp, T::one(), w.data(), kvol as isize, 1, x_b, out_sp as isize, 1, T::zero(), out_b, out_sp as isize, 1);
        } else {
            let mut od0 = 0;
            while od0 < d.out[0] {
                let nd = step.min(d.out[0] - od0);
                im2col(x.data(), &d, geom, bi, od0, nd, &mut cols);
                let p = nd * plane;
                T::gemm(d.cout, kvol, p, T::one(), w.data(), kvol as isize, 1, &cols, p as isize, 1, T::zero(), &mut out_b[od0 * plane..], out_sp as isize, 1);
                od0 += nd;
            }
        }
        if let Some(b) = bias {
            for (co, row) in out_b.chunks_mut(out_sp).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[d.batch, d.cout, d.out[0], d.out[1], d.out[2]], out)
}

fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    geom: &Conv3dGeometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let d = conv_dims(x.shape(), w.shape(), geom).expect("validated in forward");
    let out_sp: usize = d.out.iter().product();
    let in_sp: usize = d.inp.iter().product();
    let plane = d.out[1] * d.out[2];
    let kvol = d.kvol();
    let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.numel()]);
    let direct = d.kernel == [1, 1, 1] && geom.padding == [0; 3];
    let step = chunk_depth(&d);
    let mut cols = Vec::new();
    let mut gcols = Vec::new();
    for bi in 0..d.batch {
        let g_b = &gout.data()[bi * d.cout * out_sp..(bi + 1) * d.cout * out_sp];
        if direct {
            let x_b = &x.data()[bi * d.cin * in_sp..(bi + 1) * d.cin * in_sp];
            if let Some(gw) = gw.as_mut() {
                T::gemm(d.cout, out_sp, kvol, T::one(), g_b, out_sp as isize, 1, x_b, 1, in_sp as isize, T::one(), gw, kvol as isize, 1);
            }
            if let Some(gx) = gx.as_mut() {
                let gx_b = &mut gx[bi * d.cin * in_sp..(bi + 1) * d.cin * in_sp];
                T::gemm(kvol, d.cout, out_sp, T::one(), w.data(), 1, kvol as isize, g_b, out_sp as isize, 1, T::zero(), gx_b, in_sp as isize, 1);
            }
            continue;
        }
        let mut od0 = 0;
        while od0 < d.out[0] {
            let nd = step.min(d.out[0] - od0);
            let p = nd * plane;
            let g_chunk = &g_b[od0 * plane..];
            if let Some(gw) = gw.as_mut() {
                im2col(x.data(), &d, geom, bi, od0, nd, &mut cols);
                T::gemm(d.cout, p, kvol, T::one(), g_chunk, out_sp as isize, 1, &cols, 1, p as isize, T::one(), gw, kvol as isize, 1);
            }
            if let Some(gx) = gx.as_mut() {
                gcols.clear();
                gcols.resize(kvol * p, T::zero());
                T::gemm(kvol, d.cout, p, T::one(), w.data(), 1, kvol as isize, g_chunk, out_sp as isize, 1, T::zero(), &mut gcols, p as isize, 1);
                col2im_add(&gcols, &d, geom, bi, od0, nd, gx);
            }
            od0 += nd;
        }
    }
    (
        gx.map(|v| Tensor::from_vec(x.shape(), v)),
        gw.map(|v| Tensor::from_vec(w.shape(), v)),
    )
}

/// Per-channel sums over batch and all trailing axes of a `[B, C, ...]` tensor.
pub(crate) fn channel_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (g.shape()[0], g.shape()[1]);
    let inner = g.numel() / (b * c).max(1);
    let mut acc = vec![T::zero(); c];
    for (i, row) in g.data().chunks(inner).enumerate() {
        acc[i % c] += row.iter().copied().sum();
    }
    Tensor::from_vec(&[c], acc)
}

/// Causal depthwise convolution; `x: [B, E, L]`, `w: [E, 1, k]`.
/// Output at `t` reads inputs `t-k+1 ..= t` (implicit left zero padding).
pub fn conv1d_causal_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 3 || ws[1] != 1 || xs[1] != ws[0] {
        return dim_err(format!("conv1d_depthwise: input {xs:?} incompatible with weight {ws:?}"));
    }
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return dim_err(format!("conv1d_depthwise bias {:?} does not match {} channels", b.shape(), ws[0]));
        }
    }
    let (bsz, e, l) = (xs[0], xs[1], xs[2]);
    let k = ws[2];
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..bsz {
        for ch in 0..e {
            let row = (bi * e + ch) * l;
            let wr = &w.data()[ch * k..(ch + 1) * k];
            let b0 = bias.map_or(T::zero(), |b| b.data()[ch]);
            for t in 0..l {
                let mut acc = b0;
                for (j, &wj) in wr.iter().enumerate() {
                    let src = t as isize + j as isize - (k as isize - 1);
                    if src >= 0 {
                        acc += wj * x.data()[row + src as usize];
                    }
                }
                out[row + t] = acc;
            }
        }
    }
    Tensor::new(xs, out)
}

impl<T: Real> Graph<T> {
    pub fn conv3d(&self, x: Var, w: Var, bias: Option<Var>, geom: Conv3dGeometry) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = bias.map(|b| self.value(b));
        let y = conv3d_forward(&xv, &wv, bv.as_deref(), &geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push_op(y, &inputs, move |g, need| {
            let (gx, gw) = conv3d_backward(&xv, &wv, g, &geom, need[0], need[1]);
            let mut grads = vec![gx, gw];
            if need.len() == 3 {
                grads.push(need[2].then(|| channel_sums(g)));
            }
            grads
        }))
    }

    pub fn conv1d_depthwise(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = bias.map(|b| self.value(b));
        let y = conv1d_causal_forward(&xv, &wv, bv.as_deref())?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push_op(y, &inputs, move |g, need| {
            let (bsz, e, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let k = wv.shape()[2];
            let mut gx = vec![T::zero(); xv.numel()];
            let mut gw = vec![T::zero(); wv.numel()];
            for bi in 0..bsz {
                for ch in 0..e {
                    let row = (bi * e + ch) * l;
                    for t in 0..l {
                        let gt = g.data()[row + t];
                        for j in 0..k {
                            let src = t as isize + j as isize - (k as isize - 1);
                            if src >= 0 {
                                gx[row + src as usize] += gt * wv.data()[ch * k + j];
                                gw[ch * k + j] += gt * xv.data()[row + src as usize];
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                need[0].then(|| Tensor::from_vec(xv.shape(), gx)),
                need[1].then(|| Tensor::from_vec(wv.shape(), gw)),
            ];
            if need.len() == 3 {
                grads.push(need[2].then(|| channel_sums(g)));
            }
            grads
        }))
    }
}
