//! Training loss (cross-entropy plus soft Dice) and the hard-label Dice metric.

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

pub const DICE_EPS: f64 = 1e-5;

/// Integer class map, row-major over `shape`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl Labels {
    pub fn new(shape: &[usize], data: Vec<u8>) -> Result<Self> {
        if numel(shape) != data.len() {
            return dim_err(format!("label shape {shape:?} needs {} values, got {}", numel(shape), data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0; numel(shape)] }
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

/// `logits: [B, K, spatial..]`, returns `(B, K, S)`.
fn class_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 {
        return dim_err(format!("logits must be [B, K, spatial..], got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn check_labels(logit_shape: &[usize], labels: &Labels) -> Result<(usize, usize, usize)> {
    let (b, k, s) = class_layout(logit_shape)?;
    let mut expect = vec![b];
    expect.extend_from_slice(&logit_shape[2..]);
    if labels.shape != expect {
        return dim_err(format!("labels {:?} do not match logits {logit_shape:?}", labels.shape));
    }
    if let Some(&bad) = labels.data.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    Ok((b, k, s))
}

/// Class probabilities for every voxel, same layout as the logits.
pub fn softmax_classes<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    class_layout(logits.shape())?;
    Ok(crate::ops::softmax_axis(logits, 1))
}

/// Per-voxel argmax over classes: `[B, K, spatial..] -> [B, spatial..]`.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Result<Labels> {
    let (b, k, s) = class_layout(logits.shape())?;
    let d = logits.data();
    let mut out = Vec::with_capacity(b * s);
    for bi in 0..b {
        let base = bi * k * s;
        for v in 0..s {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * s + v] > d[base + best * s + v] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    let mut shape = vec![b];
    shape.extend_from_slice(&logits.shape()[2..]);
    Labels::new(&shape, out)
}

impl<T: Real> Graph<T> {
    /// Mean voxel cross-entropy plus `1 − mean_k Dice_k`, with soft Dice
    /// aggregated over the whole batch and background included.
    pub fn dice_ce(&self, logits: Var, labels: &Labels) -> Result<Var> {
        let zv = self.value(logits);
        let (b, k, s) = check_labels(zv.shape(), labels)?;
        let p = softmax_classes(&zv)?;
        let pd = p.data();
        let eps = T::lit(DICE_EPS);
        let n = T::lit((b * s) as f64);
        let kf = T::lit(k as f64);
        let idx = move |bi: usize, c: usize, v: usize| (bi * k + c) * s + v;

        let mut ce = T::zero();
        let mut inter = vec![T::zero(); k];
        let mut psum = vec![T::zero(); k];
        let mut gsum = vec![T::zero(); k];
        for bi in 0..b {
            for v in 0..s {
                let y = labels.data[bi * s + v] as usize;
                ce -= pd[idx(bi, y, v)].max(T::min_positive_value()).ln();
                inter[y] += pd[idx(bi, y, v)];
                gsum[y] += T::one();
                for c in 0..k {
                    psum[c] += pd[idx(bi, c, v)];
                }
            }
        }
        let denom: Vec<T> = (0..k).map(|c| psum[c] + gsum[c] + eps).collect();
        let dice: Vec<T> = (0..k).map(|c| (T::lit(2.0) * inter[c] + eps) / denom[c]).collect();
        let loss = ce / n + T::one() - dice.iter().copied().sum::<T>() / kf;

        let labels = labels.clone();
        let shape = zv.shape().to_vec();
        Ok(self.push_op(Tensor::scalar(loss), &[logits], move |g, _| {
            let go = g.item();
            let pd = p.data();
            let mut dz = vec![T::zero(); pd.len()];
            let mut gp = vec![T::zero(); k];
            for bi in 0..b {
                for v in 0..s {
                    let y = labels.data[bi * s + v] as usize;
                    // dDiceLoss/dp_c at this voxel
                    for c in 0..k {
                        let yc = if c == y { T::one() } else { T::zero() };
                        gp[c] = -(T::lit(2.0) * yc / denom[c] - dice[c] / denom[c]) / kf;
                    }
                    let dot: T = (0..k).map(|c| pd[idx(bi, c, v)] * gp[c]).sum();
                    for c in 0..k {
                        let pc = pd[idx(bi, c, v)];
                        let yc = if c == y { T::one() } else { T::zero() };
                        dz[idx(bi, c, v)] = go * ((pc - yc) / n + pc * (gp[c] - dot));
                    }
                }
            }
            vec![Some(Tensor::from_vec(&shape, dz))]
        }))
    }
}

/// Hard-label overlap per foreground class.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    /// Entry `i` is class `i + 1`.
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Dice for classes `1..K`; a class absent from both maps scores 1.0 and a
/// class absent from exactly one scores 0.0.
pub fn dice_score(pred: &Labels, gt: &Labels, classes: usize) -> Result<DiceReport> {
    if pred.shape != gt.shape {
        return dim_err(format!("prediction {:?} and ground truth {:?} differ", pred.shape, gt.shape));
    }
    let mut inter = vec![0usize; classes];
    let mut np = vec![0usize; classes];
    let mut ng = vec![0usize; classes];
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (a as usize, b as usize);
        if a >= classes || b >= classes {
            return Err(Error::Input(format!("label {} out of range for {classes} classes", a.max(b))));
        }
        np[a] += 1;
        ng[b] += 1;
        if a == b {
            inter[a] += 1;
        }
    }
    let per_class: Vec<f64> = (1..classes)
        .map(|c| if np[c] + ng[c] == 0 { 1.0 } else { 2.0 * inter[c] as f64 / (np[c] + ng[c]) as f64 })
        .collect();
    let mean = if per_class.is_empty() { 1.0 } else { per_class.iter().sum::<f64>() / per_class.len() as f64 };
    Ok(DiceReport { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_correct_logits_give_tiny_loss() {
        let labels = Labels::new(&[1, 2, 2], vec![0, 1, 1, 0]).unwrap();
        let mut z = Vec::new();
        for c in 0..2u8 {
            z.extend(labels.data.iter().map(|&l| if l == c { 20.0 } else { -20.0 }));
        }
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 2, 2, 2], z));
        assert!(g.value(g.dice_ce(x, &labels).unwrap()).item() < 1e-4);
    }

    #[test]
    fn uniform_logits_closed_form() {
        // 1 foreground voxel among 4: p = 0.5 everywhere
        let labels = Labels::new(&[1, 4], vec![0, 0, 0, 1]).unwrap();
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4]));
        let loss = g.value(g.dice_ce(x, &labels).unwrap()).item();
        let e = DICE_EPS;
        let d0 = (2.0 * 1.5 + e) / (2.0 + 3.0 + e);
        let d1 = (2.0 * 0.5 + e) / (2.0 + 1.0 + e);
        let expect = 2f64.ln() + 1.0 - (d0 + d1) / 2.0;
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let labels = Labels::new(&[1, 2], vec![0, 2]).unwrap();
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(g.dice_ce(x, &labels), Err(Error::Input(_))));
    }

    #[test]
    fn dice_metric_examples() {
        let a = Labels::new(&[6], vec![1, 1, 0, 0, 0, 0]).unwrap();
        let b = Labels::new(&[6], vec![0, 1, 1, 0, 0, 0]).unwrap();
        assert_eq!(dice_score(&a, &b, 2).unwrap().mean, 0.5);
        assert_eq!(dice_score(&a, &a, 2).unwrap().mean, 1.0);
        let c = Labels::new(&[6], vec![0, 0, 1, 1, 0, 0]).unwrap();
        assert_eq!(dice_score(&a, &c, 2).unwrap().mean, 0.0);
        let r = dice_score(&a, &b, 3).unwrap();
        assert_eq!(r.per_class, vec![0.5, 1.0]);
        assert_eq!(dice_score(&b, &a, 3).unwrap(), r);
        let empty = Labels::zeros(&[6]);
        assert_eq!(dice_score(&empty, &a, 2).unwrap().mean, 0.0);
    }

    #[test]
    fn argmax_picks_largest_class() {
        let z = Tensor::<f32>::from_vec(&[1, 3, 2], vec![0.0, 5.0, 1.0, 0.0, 2.0, -1.0]);
        assert_eq!(argmax_classes(&z).unwrap().data, vec![2, 0]);
    }
}
