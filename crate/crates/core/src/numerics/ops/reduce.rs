use crate::numerics::element::Element;
use crate::numerics::tensor::{invalid, numel, BackwardOp, Result, Tensor};

struct SumAllOp {
    scale: f64,
}

impl<T: Element> BackwardOp<T> for SumAllOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let v = g[0] * T::from_f64(self.scale);
        vec![Some(vec![v; inputs[0].numel()])]
    }
}

struct SumAxisOp {
    axis: usize,
}

impl<T: Element> BackwardOp<T> for SumAxisOp {
    fn name(&self) -> &'static str {
        "sum_axis"
    }

    fn backward(&self, inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let shape = inputs[0].shape();
        let outer = numel(&shape[..self.axis]);
        let n = shape[self.axis];
        let inner = numel(&shape[self.axis + 1..]);
        let mut gx = vec![T::zero(); inputs[0].numel()];
        for o in 0..outer {
            for a in 0..n {
                let dst = (o * n + a) * inner;
                gx[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
            }
        }
        vec![Some(gx)]
    }
}

struct SoftmaxOp;

impl<T: Element> BackwardOp<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, inputs: &[Tensor<T>], y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let n = *inputs[0].shape().last().expect("rank >= 1");
        let mut gx = vec![T::zero(); y.len()];
        for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for i in 0..n {
                out[i] = yr[i] * (gr[i] - dot);
            }
        }
        vec![Some(gx)]
    }
}

impl<T: Element> Tensor<T> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], SumAllOp { scale: 1.0 })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel() as f64;
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![s / T::from_f64(n)],
            vec![1],
            vec![self.clone()],
            SumAllOp { scale: 1.0 / n },
        )
    }

    /// Sums out `axis` (the axis is removed; a rank-1 input becomes `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let shape = self.shape();
        let outer = numel(&shape[..axis]);
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &self.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Tensor::from_op(out, out_shape, vec![self.clone()], SumAxisOp { axis }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&self) -> Tensor<T> {
        let n = *self.shape().last().expect("rank >= 1");
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], SoftmaxOp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_single_key_is_one() {
        let x = Tensor::<f64>::from_vec(vec![3.7, -1.0], &[2, 1]).unwrap();
        assert_eq!(x.softmax().data(), &[1.0, 1.0]);
    }

    #[test]
    fn mean_and_sum_axis() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(x.mean().item(), 3.5);
        assert_eq!(x.sum_axis(0).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1).unwrap().data(), &[6.0, 15.0]);
    }
}
