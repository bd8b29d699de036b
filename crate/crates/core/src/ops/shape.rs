use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::{inverse_permutation, Tensor};

impl<T: Real> Graph<T> {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let y = xv.reshape(shape)?;
        Ok(self.push_op(y, &[x], move |g, _| vec![Some(g.reshape(&in_shape).expect("reshape grad"))]))
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = self.with_value(x, |t| t.permute(axes))?;
        let inv = inverse_permutation(axes);
        Ok(self.push_op(y, &[x], move |g, _| vec![Some(g.permute(&inv).expect("permute grad"))]))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let y = Tensor::concat(&refs, axis)?;
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(self.push_op(y, parts, move |g, need| {
            let mut start = 0;
            extents
                .iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let part = n.then(|| g.narrow(axis, start, len).expect("concat grad"));
                    start += len;
                    part
                })
                .collect()
        }))
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let y = xv.narrow(axis, start, len)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.push_op(y, &[x], move |g, _| {
            let n = in_shape[axis];
            let mut parts = Vec::new();
            let mut pre_shape = in_shape.clone();
            pre_shape[axis] = start;
            let mut post_shape = in_shape.clone();
            post_shape[axis] = n - start - len;
            let pre = Tensor::zeros(&pre_shape);
            let post = Tensor::zeros(&post_shape);
            if start > 0 {
                parts.push(&pre);
            }
            parts.push(g);
            if n - start - len > 0 {
                parts.push(&post);
            }
            vec![Some(Tensor::concat(&parts, axis).expect("narrow grad"))]
        }))
    }
}
