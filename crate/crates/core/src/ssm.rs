//! Selective state-space (Mamba) block used as a plane scanner.
//!
//! Recurrence per channel `e` and state slot `n`:
//!
//! ```text
//! h_t = exp(Δ_t A) ⊙ h_{t-1} + (Δ_t B_t) x_t        h_0 = 0
//! y_t = ⟨C_t, h_t⟩ + D ⊙ x_t
//! ```
//!
//! [`selective_scan_sequential`] is the step-by-step reference;
//! [`Graph::selective_scan`] is the chunked production kernel with a
//! hand-derived reverse recurrence.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Time steps processed per chunk by the production scan.
pub const SCAN_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub dt_rank: usize,
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        Self { d_model, d_state: 16, expand: 2, d_conv: 4, dt_rank: d_model.div_ceil(16) }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_model, self.d_state, self.expand, self.d_conv, self.dt_rank].contains(&0) {
            return Err(Error::Config(format!("mamba extents must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Closed-form parameter count of one block.
    pub fn param_count(&self) -> usize {
        let (r, e, n, k, dr) = (self.d_model, self.inner(), self.d_state, self.d_conv, self.dt_rank);
        2 * e * r          // in_proj
            + e * k + e    // conv weight + bias
            + (dr + 2 * n) * e // x_proj
            + e * dr + e   // dt_proj weight + bias
            + e * n        // A_log
            + e            // D
            + r * e // out_proj
    }
}

/// Zero-order hold on `A`, Euler on `B`, for one time step:
/// `A_bar[e,n] = exp(Δ_e A[e,n])`, `B_bar[e,n] = Δ_e B[n]`.
pub fn discretize<T: Real>(a: &Tensor<T>, b: &[T], delta: &[T]) -> Result<(Tensor<T>, Tensor<T>)> {
    let (e, n) = match a.shape() {
        [e, n] => (*e, *n),
        s => return dim_err(format!("discretize expects A [E, N], got {s:?}")),
    };
    if b.len() != n || delta.len() != e {
        return dim_err(format!("discretize: B has {} entries and Δ {} for A {:?}", b.len(), delta.len(), a.shape()));
    }
    if let Some(bad) = delta.iter().find(|d| !d.is_finite()) {
        return Err(Error::Numeric(format!("non-finite Δ = {bad}")));
    }
    let mut a_bar = vec![T::zero(); e * n];
    let mut b_bar = vec![T::zero(); e * n];
    for ch in 0..e {
        for s in 0..n {
            a_bar[ch * n + s] = (delta[ch] * a.data()[ch * n + s]).exp();
            b_bar[ch * n + s] = delta[ch] * b[s];
        }
    }
    Ok((Tensor::from_vec(&[e, n], a_bar), Tensor::from_vec(&[e, n], b_bar)))
}

struct ScanDims {
    batch: usize,
    len: usize,
    inner: usize,
    state: usize,
}

fn scan_dims<T: Real>(x: &Tensor<T>, delta: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>, d: &Tensor<T>) -> Result<ScanDims> {
    let [batch, len, inner] = *x.shape() else {
        return dim_err(format!("scan input must be [B, L, E], got {:?}", x.shape()));
    };
    let [ae, state] = *a.shape() else {
        return dim_err(format!("scan A must be [E, N], got {:?}", a.shape()));
    };
    let ok = delta.shape() == x.shape()
        && ae == inner
        && b.shape() == [batch, len, state]
        && c.shape() == [batch, len, state]
        && d.shape() == [inner];
    if !ok {
        return dim_err(format!(
            "scan operand shapes disagree: x {:?} Δ {:?} A {:?} B {:?} C {:?} D {:?}",
            x.shape(),
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        ));
    }
    Ok(ScanDims { batch, len, inner, state })
}

/// Reference recurrence, one time step at a time over the full `[E, N]`
/// state. Shapes: `x, delta: [B, L, E]`, `a: [E, N]`, `b, c: [B, L, N]`,
/// `d: [E]`.
pub fn selective_scan_sequential<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = scan_dims(x, delta, a, b, c, d)?;
    let (e, n) = (s.inner, s.state);
    let mut y = vec![T::zero(); x.numel()];
    for bi in 0..s.batch {
        let mut h = vec![T::zero(); e * n];
        for t in 0..s.len {
            let row = (bi * s.len + t) * e;
            let bc = (bi * s.len + t) * n;
            let (a_bar, b_bar) = discretize(a, &b.data()[bc..bc + n], &delta.data()[row..row + e])?;
            for ch in 0..e {
                let xv = x.data()[row + ch];
                let mut acc = T::zero();
                for k in 0..n {
                    let i = ch * n + k;
                    h[i] = a_bar.data()[i] * h[i] + b_bar.data()[i] * xv;
                    acc += c.data()[bc + k] * h[i];
                }
                y[row + ch] = acc + d.data()[ch] * xv;
            }
        }
    }
    Tensor::new(x.shape(), y)
}

/// Chunked scan. Within each chunk of [`SCAN_CHUNK`] steps the decay and
/// input terms are materialized for all steps first, then the state is
/// carried through the chunk. When `states` is given, every `h_t` is stored
/// as `[B, L, E, N]` for the backward pass.
fn scan_forward<T: Real>(
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    s: &ScanDims,
    mut states: Option<&mut Vec<T>>,
) -> Vec<T> {
    let (e, n, l) = (s.inner, s.state, s.len);
    let mut y = vec![T::zero(); x.len()];
    if let Some(st) = states.as_deref_mut() {
        st.clear();
        st.resize(s.batch * l * e * n, T::zero());
    }
    let mut decay = vec![T::zero(); SCAN_CHUNK * n];
    let mut drive = vec![T::zero(); SCAN_CHUNK * n];
    let mut h = vec![T::zero(); n];
    for bi in 0..s.batch {
        for ch in 0..e {
            h.iter_mut().for_each(|v| *v = T::zero());
            let a_row = &a[ch * n..(ch + 1) * n];
            let mut t0 = 0;
            while t0 < l {
                let len = SCAN_CHUNK.min(l - t0);
                for j in 0..len {
                    let t = t0 + j;
                    let xi = (bi * l + t) * e + ch;
                    let dt = delta[xi];
                    let xv = x[xi];
                    let bt = &b[(bi * l + t) * n..(bi * l + t + 1) * n];
                    for k in 0..n {
                        decay[j * n + k] = (dt * a_row[k]).exp();
                        drive[j * n + k] = dt * bt[k] * xv;
                    }
                }
                for j in 0..len {
                    let t = t0 + j;
                    let xi = (bi * l + t) * e + ch;
                    let ct = &c[(bi * l + t) * n..(bi * l + t + 1) * n];
                    let mut acc = T::zero();
                    for k in 0..n {
                        h[k] = decay[j * n + k] * h[k] + drive[j * n + k];
                        acc += ct[k] * h[k];
                    }
                    y[xi] = acc + d[ch] * x[xi];
                    if let Some(st) = states.as_deref_mut() {
                        let o = ((bi * l + t) * e + ch) * n;
                        st[o..o + n].copy_from_slice(&h);
                    }
                }
                t0 += len;
            }
        }
    }
    y
}

impl<T: Real> Graph<T> {
    /// Production selective scan; see the module docs for the recurrence.
    pub fn selective_scan(&self, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let vals = [x, delta, a, b, c, d].map(|v| self.value(v));
        let [xv, dv, av, bv, cv, dsv] = vals;
        let s = scan_dims(&xv, &dv, &av, &bv, &cv, &dsv)?;
        let inputs = [x, delta, a, b, c, d];
        let keep = self.is_recording() && inputs.iter().any(|&v| self.requires_grad(v));
        let mut states = Vec::new();
        let y = scan_forward(xv.data(), dv.data(), av.data(), bv.data(), cv.data(), dsv.data(), &s, keep.then_some(&mut states));
        let out = Tensor::from_vec(xv.shape(), y);
        Ok(self.push_op(out, &inputs, move |g, _need| {
            let (e, n, l) = (s.inner, s.state, s.len);
            let (x, delta, a, b, c, d) = (xv.data(), dv.data(), av.data(), bv.data(), cv.data(), dsv.data());
            let gd = g.data();
            let mut gx = vec![T::zero(); x.len()];
            let mut gdelta = vec![T::zero(); x.len()];
            let mut ga = vec![T::zero(); a.len()];
            let mut gb = vec![T::zero(); b.len()];
            let mut gc = vec![T::zero(); c.len()];
            let mut gdskip = vec![T::zero(); d.len()];
            // gradient flowing into h_t from h_{t+1}
            let mut carry = vec![T::zero(); n];
            for bi in 0..s.batch {
                for ch in 0..e {
                    carry.iter_mut().for_each(|v| *v = T::zero());
                    let a_row = &a[ch * n..(ch + 1) * n];
                    for t in (0..l).rev() {
                        let xi = (bi * l + t) * e + ch;
                        let bc = (bi * l + t) * n;
                        let (gy, xv, dt) = (gd[xi], x[xi], delta[xi]);
                        let h_t = &states[xi * n..xi * n + n];
                        let h_prev = (t > 0).then(|| &states[(xi - e) * n..(xi - e) * n + n]);
                        let mut gxi = gy * d[ch];
                        let mut gdt = T::zero();
                        for k in 0..n {
                            let decay = (dt * a_row[k]).exp();
                            let gh = gy * c[bc + k] + carry[k];
                            gc[bc + k] += gy * h_t[k];
                            let hp = h_prev.map_or(T::zero(), |h| h[k]);
                            gdt += gh * (a_row[k] * decay * hp + b[bc + k] * xv);
                            ga[ch * n + k] += gh * dt * decay * hp;
                            gb[bc + k] += gh * dt * xv;
                            gxi += gh * dt * b[bc + k];
                            carry[k] = gh * decay;
                        }
                        gx[xi] = gxi;
                        gdelta[xi] = gdt;
                        gdskip[ch] += gy * xv;
                    }
                }
            }
            vec![
                Some(Tensor::from_vec(xv.shape(), gx)),
                Some(Tensor::from_vec(dv.shape(), gdelta)),
                Some(Tensor::from_vec(av.shape(), ga)),
                Some(Tensor::from_vec(bv.shape(), gb)),
                Some(Tensor::from_vec(cv.shape(), gc)),
                Some(Tensor::from_vec(dsv.shape(), gdskip)),
            ]
        }))
    }
}

/// Plain-tensor entry point to the production kernel.
pub fn selective_scan<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = scan_dims(x, delta, a, b, c, d)?;
    let y = scan_forward(x.data(), delta.data(), a.data(), b.data(), c.data(), d.data(), &s, None);
    Tensor::new(x.shape(), y)
}

/// Parameter handles of one Mamba block.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: MambaConfig,
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: ParamId,
    pub dt_w: ParamId,
    pub dt_b: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: ParamId,
}

fn inverse_softplus(y: f64) -> f64 {
    // log(exp(y) - 1), stable for small y
    y + (-(-y).exp_m1()).ln()
}

impl MambaBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: MambaConfig, prefix: &str, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (r, e, n, k, dr) = (cfg.d_model, cfg.inner(), cfg.d_state, cfg.d_conv, cfg.dt_rank);
        let p = |s: &str| format!("{prefix}.{s}");
        let in_proj = store.fan_in_uniform(p("in_proj.weight"), &[2 * e, r], r, true, rng);
        let conv_w = store.fan_in_uniform(p("conv1d.weight"), &[e, 1, k], k, true, rng);
        let conv_b = store.fan_in_uniform(p("conv1d.bias"), &[e], k, true, rng);
        let x_proj = store.fan_in_uniform(p("x_proj.weight"), &[dr + 2 * n, e], e, true, rng);
        let dt_std = (dr as f64).powf(-0.5);
        let dt_w = store.add(p("dt_proj.weight"), Tensor::uniform(&[e, dr], -dt_std, dt_std, rng), true);
        let dt_bias: Vec<T> = (0..e).map(|_| T::lit(inverse_softplus(rng.gen_range(1e-3..0.1)))).collect();
        let dt_b = store.add(p("dt_proj.bias"), Tensor::from_vec(&[e], dt_bias), true);
        let a_log = store.add(p("A_log"), Tensor::from_fn(&[e, n], |i| T::lit(((i % n) + 1) as f64).ln()), true);
        let d_skip = store.ones(p("D"), &[e], true);
        let out_proj = store.zeros(p("out_proj.weight"), &[r, e], true);
        Ok(Self { cfg, in_proj, conv_w, conv_b, x_proj, dt_w, dt_b, a_log, d_skip, out_proj })
    }

    /// `seq: [B, L, d_model] -> [B, L, d_model]`, with a residual connection
    /// around the whole block.
    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, seq: Var) -> Result<Var> {
        let shape = g.shape(seq);
        if shape.len() != 3 || shape[2] != self.cfg.d_model {
            return dim_err(format!("mamba block expects [B, L, {}], got {shape:?}", self.cfg.d_model));
        }
        let (e, n, dr) = (self.cfg.inner(), self.cfg.d_state, self.cfg.dt_rank);
        let pr = |id| g.param(store, id);
        let xz = g.linear(seq, pr(self.in_proj), None)?;
        let xm = g.narrow(xz, 2, 0, e)?;
        let gate = g.narrow(xz, 2, e, e)?;
        let xc = g.permute(xm, &[0, 2, 1])?;
        let xc = g.conv1d_depthwise(xc, pr(self.conv_w), Some(pr(self.conv_b)))?;
        let xc = g.permute(xc, &[0, 2, 1])?;
        let xc = g.silu(xc);
        let dbl = g.linear(xc, pr(self.x_proj), None)?;
        let dt_in = g.narrow(dbl, 2, 0, dr)?;
        let bmat = g.narrow(dbl, 2, dr, n)?;
        let cmat = g.narrow(dbl, 2, dr + n, n)?;
        let dt = g.linear(dt_in, pr(self.dt_w), Some(pr(self.dt_b)))?;
        let dt = g.softplus(dt);
        let a = g.neg(g.exp(pr(self.a_log)));
        let y = g.selective_scan(xc, dt, a, bmat, cmat, pr(self.d_skip))?;
        let y = g.mul(y, g.silu(gate));
        let out = g.linear(y, pr(self.out_proj), None)?;
        Ok(g.add(seq, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn discretize_closed_forms() {
        let a = Tensor::<f64>::from_vec(&[1, 1], vec![-1.0]);
        let (ab, bb) = discretize(&a, &[1.0], &[2f64.ln()]).unwrap();
        assert!((ab.item() - 0.5).abs() < 1e-15);
        assert!((bb.item() - 2f64.ln()).abs() < 1e-15);
        let (ab, bb) = discretize(&a, &[1.0], &[1.0]).unwrap();
        assert!((ab.item() - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(bb.item(), 1.0);
        let (ab, bb) = discretize(&a, &[1.0], &[1e-12]).unwrap();
        assert!((ab.item() - 1.0).abs() < 1e-11 && bb.item().abs() < 1e-11);
    }

    #[test]
    fn discretize_rejects_non_finite_delta() {
        let a = Tensor::<f64>::from_vec(&[1, 1], vec![-1.0]);
        assert!(matches!(discretize(&a, &[1.0], &[f64::INFINITY]), Err(Error::Numeric(_))));
    }

    #[test]
    fn default_config_matches_reference_block() {
        let c = MambaConfig::new(24);
        assert_eq!((c.d_state, c.expand, c.d_conv, c.dt_rank, c.inner()), (16, 2, 4, 2, 48));
        assert_eq!(MambaConfig::new(96).dt_rank, 6);
    }

    #[test]
    fn block_param_count_matches_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = MambaConfig::new(8);
        MambaBlock::new(cfg, "phi", &mut store, &mut rng).unwrap();
        assert_eq!(store.count().0, cfg.param_count());
    }

    #[test]
    fn dt_bias_init_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let blk = MambaBlock::new(MambaConfig::new(16), "phi", &mut store, &mut rng).unwrap();
        for &b in store.get(blk.dt_b).value.data() {
            let dt = crate::ops::softplus(b);
            assert!((1e-3..=0.1).contains(&dt), "{dt}");
        }
        let a = &store.get(blk.a_log).value;
        assert_eq!(a.get(&[3, 0]), 0.0);
        assert!((a.get(&[3, 15]) - 16f64.ln()).abs() < 1e-15);
    }
}
