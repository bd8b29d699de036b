use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay. Moments are kept per parameter slot and
/// only for trainable parameters.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its accumulated gradient
    /// (missing gradients count as zero). Nothing is modified if any gradient
    /// is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if p.trainable && !g.all_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (lr_t, eps) = (T::lit(lr), T::lit(self.eps));
        let decay = T::one() - T::lit(lr * self.weight_decay);
        let (c1, c2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let slot = &mut self.moments[id.0];
            let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let zeros;
            let g = match &p.grad {
                Some(g) => g,
                None => {
                    zeros = Tensor::zeros(p.value.shape());
                    &zeros
                }
            };
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w *= decay;
                *w -= lr_t * (*mi * c1) / ((*vi * c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear decay from `lr_start` at epoch 0 to `lr_end` at `epochs`.
pub fn lr_schedule(epoch: usize, epochs: usize, lr_start: f64, lr_end: f64) -> f64 {
    let frac = (epoch.min(epochs)) as f64 / epochs.max(1) as f64;
    lr_start + (lr_end - lr_start) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::from_vec(&[2], vec![1.0, -3.0]), true);
        s.get_mut(id).grad = Some(Tensor::ones(&[2]));
        let mut opt = AdamW::new(0.0);
        opt.step(&mut s, 1e-3).unwrap();
        let v = s.get(id).value.data();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-6 && (v[1] - (-3.0 - 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn pure_decay_with_zero_grad() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::from_vec(&[1], vec![2.0]), true);
        s.get_mut(id).grad = Some(Tensor::zeros(&[1]));
        AdamW::new(0.5).step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(id).value.data()[0], 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn frozen_untouched_and_nan_aborts() {
        let mut s = ParamStore::<f32>::new();
        let f = s.add("frozen", Tensor::ones(&[3]), false);
        let t = s.add("t", Tensor::ones(&[3]), true);
        let mut opt = AdamW::new(0.01);
        s.get_mut(t).grad = Some(Tensor::ones(&[3]));
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(f).value, Tensor::ones(&[3]));
        let before = s.get(t).value.clone();
        s.get_mut(t).grad = Some(Tensor::from_vec(&[3], vec![0.0, f32::NAN, 0.0]));
        let err = opt.step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains('t'));
        assert_eq!(s.get(t).value, before);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 1000, 2e-4, 0.0), 2e-4);
        assert_eq!(lr_schedule(1000, 1000, 2e-4, 0.0), 0.0);
        assert!((lr_schedule(500, 1000, 2e-4, 0.0) - 1e-4).abs() < 1e-18);
    }
}
