use std::rc::Rc;

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Which elementwise nonlinearity to apply. Softmax lives on
/// [`Graph::softmax`] since it needs an axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
    Softplus,
    Sigmoid,
}

const GELU_K: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Silu => silu(x),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
        }
    }
}

/// Softmax along `axis` of a plain tensor.
pub fn softmax_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = x.shape();
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    let outer = numel(&shape[..axis]);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..n {
                m = m.max(src[base + j * inner]);
            }
            let mut s = T::zero();
            for j in 0..n {
                let e = (src[base + j * inner] - m).exp();
                out[base + j * inner] = e;
                s += e;
            }
            for j in 0..n {
                out[base + j * inner] /= s;
            }
        }
    }
    Tensor::from_vec(shape, out)
}

impl<T: Real> Graph<T> {
    fn unary(&self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let xv = self.value(x);
        let y = Rc::new(xv.map(f));
        let yv = Rc::clone(&y);
        self.push_op(y, &[x], move |g, _| {
            let data = g.data().iter().zip(xv.data()).zip(yv.data()).map(|((&g, &x), &y)| g * df(x, y)).collect();
            vec![Some(Tensor::from_vec(g.shape(), data))]
        })
    }

    pub fn activation(&self, x: Var, kind: Activation) -> Var {
        self.unary(x, move |v| kind.apply(v), move |x, _| kind.derivative(x))
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn silu(&self, x: Var) -> Var {
        self.activation(x, Activation::Silu)
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.activation(x, Activation::Softplus)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        assert!(axis < xv.ndim(), "softmax axis {axis} out of range for {:?}", xv.shape());
        let y = Rc::new(softmax_axis(&xv, axis));
        let yv = Rc::clone(&y);
        self.push_op(y, &[x], move |g, _| {
            let shape = yv.shape();
            let n = shape[axis];
            let inner = numel(&shape[axis + 1..]);
            let outer = numel(&shape[..axis]);
            let (y, gd) = (yv.data(), g.data());
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: T = (0..n).map(|j| gd[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..n {
                        let k = base + j * inner;
                        gx[k] = y[k] * (gd[k] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_vec(shape, gx))]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let y = av.zip_map(&bv, |x, y| x + y);
        self.push_op(y, &[a, b], |g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let y = av.zip_map(&bv, |x, y| x - y);
        self.push_op(y, &[a, b], |g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.scale(-T::one()))])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let y = av.zip_map(&bv, |x, y| x * y);
        self.push_op(y, &[a, b], move |g, need| {
            vec![need[0].then(|| g.zip_map(&bv, |g, b| g * b)), need[1].then(|| g.zip_map(&av, |g, a| g * a))]
        })
    }

    /// `x + b` where `b`'s shape is a trailing suffix of `x`'s shape
    /// (per-feature bias, positional table).
    pub fn add_broadcast(&self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let (xs, bs) = (xv.shape(), bv.shape());
        assert!(
            bs.len() <= xs.len() && xs[xs.len() - bs.len()..] == *bs,
            "add_broadcast: {bs:?} is not a suffix of {xs:?}"
        );
        let inner = bv.numel();
        let mut y = xv.as_ref().clone();
        for chunk in y.data_mut().chunks_mut(inner) {
            for (v, &bb) in chunk.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        let bshape = bs.to_vec();
        self.push_op(y, &[x, b], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![T::zero(); inner];
                for chunk in g.data().chunks(inner) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                Tensor::from_vec(&bshape, acc)
            });
            vec![need[0].then(|| g.clone()), gb]
        })
    }

    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        self.push_op(Tensor::scalar(xv.sum()), &[x], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.with_value(x, |t| t.numel());
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_anchor_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        // tanh form: 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        assert!((gelu(1.0f64) - 0.841_192).abs() < 1e-3);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(50.0f64) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let t = Tensor::<f64>::zeros(&[1, 2]);
        assert_eq!(softmax_axis(&t, 1).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_sums_to_one_on_middle_axis() {
        let t = Tensor::<f64>::arange(&[2, 3, 4]).map(|v| (v * 0.37).sin() * 5.0);
        let s = softmax_axis(&t, 1);
        for o in 0..2 {
            for i in 0..4 {
                let tot: f64 = (0..3).map(|j| s.get(&[o, j, i])).sum();
                assert!((tot - 1.0).abs() < 1e-12);
            }
        }
    }
}
