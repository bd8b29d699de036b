//! Dense row-major tensors and the plain (non-recording) kernels shared by the
//! autodiff graph and the reference implementations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides (last axis has stride 1).
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return dim_err(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel(shape),
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        Self::new(shape, data).expect("shape/data length mismatch")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    pub fn arange(shape: &[usize]) -> Self {
        Self::from_fn(shape, |i| T::lit(i as f64))
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&x, &n)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(x < n, "index {idx:?} out of range on axis {i} of {:?}", self.shape);
            off = off * n + x;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return dim_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return dim_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::lit(x.as_f64())).collect() }
    }

    /// Axis permutation; output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        check_permutation(axes, self.ndim())?;
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.numel());
        gather_strided(&self.data, &out_shape, &src_strides, &mut data);
        Ok(Self { shape: out_shape, data })
    }

    /// Concatenation of `parts` along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| crate::Error::Dimension("concat of zero tensors".into()))?;
        if axis >= first.ndim() {
            return dim_err(format!("concat axis {axis} out of range for {:?}", first.shape));
        }
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return dim_err(format!("concat shape mismatch {:?} vs {:?} on axis {axis}", p.shape, first.shape));
            }
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let blk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * blk..(o + 1) * blk]);
            }
        }
        Ok(Self { shape, data })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return dim_err(format!("narrow({axis}, {start}, {len}) out of range for {:?}", self.shape));
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let n = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Batched contraction `[.., M, K] · [.., K, N]`. `b` may be 2-D, in which
    /// case it is shared across every batch entry of `a`.
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        let (batch, m, k, n) = matmul_dims(&self.shape, &b.shape)?;
        let mut out_shape = self.shape[..self.ndim() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let b_batched = b.ndim() > 2;
        for i in 0..batch {
            let a_s = &self.data[i * m * k..(i + 1) * m * k];
            let b_s = if b_batched { &b.data[i * k * n..(i + 1) * k * n] } else { &b.data[..] };
            T::gemm(m, k, n, T::one(), a_s, k as isize, 1, b_s, n as isize, 1, T::zero(), &mut out[i * m * n..(i + 1) * m * n], n as isize, 1);
        }
        Ok(Self { shape: out_shape, data: out })
    }
}

pub(crate) fn check_permutation(axes: &[usize], ndim: usize) -> Result<()> {
    let mut seen = vec![false; ndim];
    if axes.len() != ndim {
        return dim_err(format!("permutation {axes:?} has wrong rank for {ndim}-d tensor"));
    }
    for &a in axes {
        if a >= ndim || seen[a] {
            return dim_err(format!("{axes:?} is not a permutation of 0..{ndim}"));
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn gather_strided<T: Copy>(src: &[T], shape: &[usize], src_strides: &[usize], out: &mut Vec<T>) {
    if shape.is_empty() {
        out.push(src[0]);
        return;
    }
    if numel(shape) == 0 {
        return;
    }
    let nd = shape.len();
    let last = shape[nd - 1];
    let last_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    loop {
        let base: usize = idx.iter().zip(src_strides).map(|(i, s)| i * s).sum();
        if last_stride == 1 {
            out.extend_from_slice(&src[base..base + last]);
        } else {
            out.extend((0..last).map(|j| src[base + j * last_stride]));
        }
        // odometer increment over the leading axes
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 {
        return dim_err(format!("matmul needs rank ≥ 2 operands, got {a:?} and {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return dim_err(format!("matmul inner extents differ: {a:?} · {b:?}"));
    }
    let batch = numel(&a[..a.len() - 2]);
    if b.len() > 2 && b[..b.len() - 2] != a[..a.len() - 2] {
        return dim_err(format!("matmul batch extents differ: {a:?} · {b:?}"));
    }
    Ok((batch, m, k, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }

    #[test]
    fn matmul_hand_values() {
        let a = Tensor::<f64>::from_vec(&[2, 2], vec![1., 2., 3., 4.]);
        let b = Tensor::<f64>::from_vec(&[2, 2], vec![5., 6., 7., 8.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[19., 22., 43., 50.]);
        let eye = Tensor::<f64>::from_vec(&[2, 2], vec![1., 0., 0., 1.]);
        assert_eq!(eye.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::<f64>::arange(&[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for i in 0..4 {
            for j in 0..2 {
                for k in 0..3 {
                    assert_eq!(y.get(&[i, j, k]), (j * 12 + k * 4 + i) as f64);
                }
            }
        }
    }

    #[test]
    fn reshape_count_mismatch_is_dimension_error() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(x.reshape(&[4]), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let a = Tensor::<f64>::arange(&[2, 1, 3]);
        let b = Tensor::<f64>::full(&[2, 2, 3], 7.0);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(c.narrow(1, 0, 1).unwrap(), a);
        assert_eq!(c.narrow(1, 1, 2).unwrap(), b);
    }
}
