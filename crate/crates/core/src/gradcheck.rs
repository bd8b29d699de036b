//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter (all of them if the tensor is smaller).
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, samples_per_param: 6, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub params_checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares analytic gradients of the scalar `f` against central
/// differences for every trainable parameter in `store`. Frozen parameters
/// are skipped and must not receive a gradient.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let g = Graph::new();
    let loss = f(&g, store)?;
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {lv}")));
    }
    let grads = g.backward(loss);
    g.accumulate_param_grads(&grads, store);
    drop(g);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::no_grad();
        let v = f(&g, s)?;
        let out = g.value(v).item();
        Ok(out)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0, params_checked: 0 };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        if !p.trainable {
            if p.grad.is_some() {
                return Err(Error::Numeric(format!("frozen parameter {} received a gradient", p.name)));
            }
            continue;
        }
        let name = p.name.clone();
        let n = p.value.numel();
        let analytic = match &p.grad {
            Some(gr) => gr.clone(),
            None => crate::Tensor::zeros(p.value.shape()),
        };
        if !analytic.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
        let coords: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.samples_per_param).into_vec()
        };
        for i in coords {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.step;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - opts.step;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss while perturbing {name}[{i}]")));
            }
            let numeric = (up - down) / (2.0 * opts.step);
            let err = rel_error(analytic.data()[i], numeric);
            report.coordinates += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
        report.params_checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn matmul_sum_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::randn(&[3, 4], 1.0, &mut rng), true);
        let b = store.add("b", Tensor::randn(&[4, 2], 1.0, &mut rng), true);
        let rep = grad_check(
            &mut store,
            |g, s| {
                let y = g.matmul(g.param(s, a), g.param(s, b))?;
                Ok(g.sum(y))
            },
            &GradCheckOptions { samples_per_param: 100, ..Default::default() },
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
        assert_eq!(rep.coordinates, 12 + 8);
    }

    #[test]
    fn frozen_parameter_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::randn(&[2, 2], 1.0, &mut rng), true);
        let b = store.add("frozen", Tensor::randn(&[2, 2], 1.0, &mut rng), false);
        let rep = grad_check(
            &mut store,
            |g, s| {
                let y = g.matmul(g.param(s, a), g.param(s, b))?;
                Ok(g.sum(y))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.params_checked, 1);
        assert!(store.by_name("frozen").unwrap().grad.is_none());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::from_vec(&[1], vec![f64::NAN]), true);
        let err = grad_check(&mut store, |g, s| Ok(g.sum(g.param(s, a))), &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
