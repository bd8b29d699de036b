use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::{matmul_dims, Tensor};

/// `x · wᵀ (+ b)` over the last axis of `x`, with `w: [out, in]`.
pub fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let fan_in = *xs.last().unwrap_or(&0);
    if w.ndim() != 2 || w.shape()[1] != fan_in {
        return dim_err(format!("linear: input {:?} incompatible with weight {:?}", xs, w.shape()));
    }
    let out_f = w.shape()[0];
    if let Some(b) = b {
        if b.shape() != [out_f] {
            return dim_err(format!("linear: bias {:?} does not match weight {:?}", b.shape(), w.shape()));
        }
    }
    let m = x.numel() / fan_in.max(1);
    let mut out = vec![T::zero(); m * out_f];
    if let Some(b) = b {
        for row in out.chunks_mut(out_f) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(m, fan_in, out_f, T::one(), x.data(), fan_in as isize, 1, w.data(), 1, fan_in as isize, beta, &mut out, out_f as isize, 1);
    let mut shape = xs.to_vec();
    *shape.last_mut().expect("rank ≥ 1") = out_f;
    Tensor::new(&shape, out)
}

impl<T: Real> Graph<T> {
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape())?;
        let y = av.matmul(&bv)?;
        let shared_b = bv.ndim() == 2;
        Ok(self.push_op(y, &[a, b], move |g, need| {
            let gd = g.data();
            let ga = need[0].then(|| {
                // ga = g · bᵀ
                let mut out = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    let b_s = if shared_b { bv.data() } else { &bv.data()[i * k * n..(i + 1) * k * n] };
                    T::gemm(m, n, k, T::one(), &gd[i * m * n..(i + 1) * m * n], n as isize, 1, b_s, 1, n as isize, T::zero(), &mut out[i * m * k..(i + 1) * m * k], k as isize, 1);
                }
                Tensor::from_vec(av.shape(), out)
            });
            let gb = need[1].then(|| {
                if shared_b {
                    // gb = Σ_batch aᵀ · g, as one contraction over batch·m rows
                    let rows = batch * m;
                    let mut out = vec![T::zero(); k * n];
                    T::gemm(k, rows, n, T::one(), av.data(), 1, k as isize, gd, n as isize, 1, T::zero(), &mut out, n as isize, 1);
                    Tensor::from_vec(bv.shape(), out)
                } else {
                    let mut out = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        T::gemm(k, m, n, T::one(), &av.data()[i * m * k..(i + 1) * m * k], 1, k as isize, &gd[i * m * n..(i + 1) * m * n], n as isize, 1, T::zero(), &mut out[i * k * n..(i + 1) * k * n], n as isize, 1);
                    }
                    Tensor::from_vec(bv.shape(), out)
                }
            });
            vec![ga, gb]
        }))
    }

    /// Affine map over the last axis: `x · wᵀ + b`, `w: [out, in]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let y = linear_forward(&xv, &wv, bv.as_deref())?;
        let fan_in = wv.shape()[1];
        let out_f = wv.shape()[0];
        let m = xv.numel() / fan_in.max(1);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(y, &inputs, move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut out = vec![T::zero(); m * fan_in];
                T::gemm(m, out_f, fan_in, T::one(), gd, out_f as isize, 1, wv.data(), fan_in as isize, 1, T::zero(), &mut out, fan_in as isize, 1);
                Tensor::from_vec(xv.shape(), out)
            });
            let gw = need[1].then(|| {
                let mut out = vec![T::zero(); out_f * fan_in];
                T::gemm(out_f, m, fan_in, T::one(), gd, 1, out_f as isize, xv.data(), fan_in as isize, 1, T::zero(), &mut out, fan_in as isize, 1);
                Tensor::from_vec(wv.shape(), out)
            });
            let mut grads = vec![gx, gw];
            if need.len() == 3 {
                grads.push(need[2].then(|| {
                    let mut acc = vec![T::zero(); out_f];
                    for row in gd.chunks(out_f) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(&[out_f], acc)
                }));
            }
            grads
        }))
    }
}
