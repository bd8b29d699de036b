use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Standardize over the last axis.
    Layer,
    /// Standardize over all spatial axes of each `(batch, channel)` pair.
    Instance,
}

/// Standardizes contiguous groups of length `n`; returns `(xhat, inv_std per group)`.
fn standardize<T: Real>(x: &[T], n: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let groups = x.len() / n.max(1);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(groups);
    let nf = T::lit(n as f64);
    for (gi, (src, dst)) in x.chunks(n).zip(xhat.chunks_mut(n)).enumerate() {
        let mean = src.iter().copied().sum::<T>() / nf;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv.push(is);
        debug_assert_eq!(inv.len(), gi + 1);
    }
    (xhat, inv)
}

/// Backward of standardization given the gradient w.r.t. `xhat`.
fn standardize_backward<T: Real>(gxhat: &[T], xhat: &[T], inv: &[T], n: usize) -> Vec<T> {
    let nf = T::lit(n as f64);
    let mut gx = vec![T::zero(); gxhat.len()];
    for (gi, ((g, xh), out)) in gxhat.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
        let mg = g.iter().copied().sum::<T>() / nf;
        let mgx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / nf;
        for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
            *o = inv[gi] * (gv - mg - xv * mgx);
        }
    }
    gx
}

impl<T: Real> Graph<T> {
    /// Normalization with an optional per-feature affine (`gamma`, `beta`).
    /// Layer: affine indexed by the last axis. Instance: affine indexed by
    /// channel (axis 1).
    pub fn normalize(&self, x: Var, kind: NormKind, gamma: Option<Var>, beta: Option<Var>, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return config_err("normalization eps must be positive");
        }
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (n, feat, per_group_affine) = match kind {
            NormKind::Layer => {
                let n = *shape.last().ok_or_else(|| crate::Error::Dimension("layer_norm on scalar".into()))?;
                (n, n, false)
            }
            NormKind::Instance => {
                if shape.len() < 3 {
                    return dim_err(format!("instance_norm expects [B, C, spatial..], got {shape:?}"));
                }
                (shape[2..].iter().product(), shape[1], true)
            }
        };
        let gv = gamma.map(|g| self.value(g));
        let bv = beta.map(|b| self.value(b));
        for p in gv.iter().chain(bv.iter()) {
            if p.shape() != [feat] {
                return dim_err(format!("norm affine {:?} does not match feature extent {feat}", p.shape()));
            }
        }
        let (xhat, inv) = standardize(xv.data(), n, eps);
        // affine coefficient for flat element i
        let feat_of = move |i: usize| if per_group_affine { (i / n) % feat } else { i % n };
        let mut y = xhat.clone();
        if gv.is_some() || bv.is_some() {
            for (i, v) in y.iter_mut().enumerate() {
                let f = feat_of(i);
                if let Some(g) = &gv {
                    *v *= g.data()[f];
                }
                if let Some(b) = &bv {
                    *v += b.data()[f];
                }
            }
        }
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        let has_gamma = gamma.is_some();
        let out = Tensor::from_vec(&shape, y);
        Ok(self.push_op(out, &inputs, move |g, need| {
            let gd = g.data();
            let mut grads = Vec::with_capacity(need.len());
            grads.push(need[0].then(|| {
                let gxhat: Vec<T> = match &gv {
                    Some(gm) => gd.iter().enumerate().map(|(i, &v)| v * gm.data()[feat_of(i)]).collect(),
                    None => gd.to_vec(),
                };
                Tensor::from_vec(&shape, standardize_backward(&gxhat, &xhat, &inv, n))
            }));
            let mut k = 1;
            if has_gamma {
                grads.push(need[k].then(|| {
                    let mut acc = vec![T::zero(); feat];
                    for (i, (&gv, &xh)) in gd.iter().zip(&xhat).enumerate() {
                        acc[feat_of(i)] += gv * xh;
                    }
                    Tensor::from_vec(&[feat], acc)
                }));
                k += 1;
            }
            if k < need.len() {
                grads.push(need[k].then(|| {
                    let mut acc = vec![T::zero(); feat];
                    for (i, &gv) in gd.iter().enumerate() {
                        acc[feat_of(i)] += gv;
                    }
                    Tensor::from_vec(&[feat], acc)
                }));
            }
            grads
        }))
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.normalize(x, NormKind::Layer, Some(gamma), Some(beta), T::lit(NORM_EPS))
    }
}
