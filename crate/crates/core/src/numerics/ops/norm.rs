use crate::numerics::element::{el, Element};
use crate::numerics::tensor::{invalid, numel, BackwardOp, Result, Tensor, TensorError};

/// Batch statistics produced by a training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over the reduced axes.
    pub var: Vec<T>,
    pub count: usize,
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

struct BatchNormOp {
    axis: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl<T: Element> BackwardOp<T> for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, gamma) = (&inputs[0], &inputs[1]);
        let (outer, c, inner) = split_at_axis(x.shape(), self.axis);
        let n = (outer * inner) as f64;
        let xd = x.data();
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for o in 0..outer {
            for ci in 0..c {
                let base = (o * c + ci) * inner;
                for i in base..base + inner {
                    let xh = (xd[i].as_f64() - self.mean[ci]) * self.inv_std[ci];
                    sum_g[ci] += g[i].as_f64();
                    sum_gx[ci] += g[i].as_f64() * xh;
                }
            }
        }
        let gx = x.requires_grad().then(|| {
            let mut gx = vec![T::zero(); x.numel()];
            for o in 0..outer {
                for ci in 0..c {
                    let base = (o * c + ci) * inner;
                    let k = gamma.data()[ci].as_f64() * self.inv_std[ci] / n;
                    for i in base..base + inner {
                        let xh = (xd[i].as_f64() - self.mean[ci]) * self.inv_std[ci];
                        gx[i] = el(k * (n * g[i].as_f64() - sum_g[ci] - xh * sum_gx[ci]));
                    }
                }
            }
            gx
        });
        let ggamma = gamma.requires_grad().then(|| sum_gx.iter().map(|&v| el(v)).collect());
        let gbeta = inputs[2].requires_grad().then(|| sum_g.iter().map(|&v| el(v)).collect());
        vec![gx, ggamma, gbeta]
    }
}

struct LayerNormOp {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl<T: Element> BackwardOp<T> for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, gamma) = (&inputs[0], &inputs[1]);
        let d = *x.shape().last().unwrap();
        let rows = x.numel() / d;
        let xd = x.data();
        let gd = gamma.data();
        let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        let mut ggamma = vec![0.0f64; d];
        let mut gbeta = vec![0.0f64; d];
        for r in 0..rows {
            let row = r * d..(r + 1) * d;
            let (m, is) = (self.mean[r], self.inv_std[r]);
            let mut sum_gh = 0.0;
            let mut sum_ghx = 0.0;
            for (j, i) in row.clone().enumerate() {
                let xh = (xd[i].as_f64() - m) * is;
                let gv = g[i].as_f64();
                ggamma[j] += gv * xh;
                gbeta[j] += gv;
                let gh = gv * gd[j].as_f64();
                sum_gh += gh;
                sum_ghx += gh * xh;
            }
            if let Some(gx) = gx.as_mut() {
                let df = d as f64;
                for (j, i) in row.enumerate() {
                    let xh = (xd[i].as_f64() - m) * is;
                    let gh = g[i].as_f64() * gd[j].as_f64();
                    gx[i] = el(is / df * (df * gh - sum_gh - xh * sum_ghx));
                }
            }
        }
        vec![
            gx,
            gamma.requires_grad().then(|| ggamma.iter().map(|&v| el(v)).collect()),
            inputs[2].requires_grad().then(|| gbeta.iter().map(|&v| el(v)).collect()),
        ]
    }
}

struct PreluOp {
    axis: usize,
}

impl<T: Element> BackwardOp<T> for PreluOp {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn backward(&self, inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, alpha) = (&inputs[0], &inputs[1]);
        let (outer, c, inner) = split_at_axis(x.shape(), self.axis);
        let shared = alpha.numel() == 1;
        let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        let mut ga = alpha.requires_grad().then(|| vec![T::zero(); alpha.numel()]);
        for o in 0..outer {
            for ci in 0..c {
                let ai = if shared { 0 } else { ci };
                let a = alpha.data()[ai];
                let base = (o * c + ci) * inner;
                for i in base..base + inner {
                    let xv = x.data()[i];
                    if xv > T::zero() {
                        if let Some(gx) = gx.as_mut() {
                            gx[i] = g[i];
                        }
                    } else {
                        if let Some(gx) = gx.as_mut() {
                            gx[i] = g[i] * a;
                        }
                        if let Some(ga) = ga.as_mut() {
                            ga[ai] += g[i] * xv;
                        }
                    }
                }
            }
        }
        vec![gx, ga]
    }
}

fn check_channel_param<T: Element>(op: &'static str, p: &Tensor<T>, c: usize) -> Result<()> {
    if p.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![c],
            rhs: p.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    /// Training-mode batch normalization over every axis except `axis`,
    /// returning the normalized output and the batch statistics used.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        axis: usize,
        eps: f64,
    ) -> Result<(Tensor<T>, BatchStats<T>)> {
        if axis >= self.rank() {
            return Err(invalid("batch_norm", format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, c, inner) = split_at_axis(self.shape(), axis);
        check_channel_param("batch_norm", gamma, c)?;
        check_channel_param("batch_norm", beta, c)?;
        let n = outer * inner;
        let xd = self.data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for o in 0..outer {
            for (ci, m) in mean.iter_mut().enumerate() {
                let base = (o * c + ci) * inner;
                *m += xd[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for o in 0..outer {
            for (ci, v) in var.iter_mut().enumerate() {
                let base = (o * c + ci) * inner;
                *v += xd[base..base + inner]
                    .iter()
                    .map(|x| (x.as_f64() - mean[ci]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![T::zero(); self.numel()];
        for o in 0..outer {
            for ci in 0..c {
                let base = (o * c + ci) * inner;
                let (gm, bt) = (gamma.data()[ci].as_f64(), beta.data()[ci].as_f64());
                for i in base..base + inner {
                    out[i] = el((xd[i].as_f64() - mean[ci]) * inv_std[ci] * gm + bt);
                }
            }
        }
        let stats = BatchStats {
            mean: mean.iter().map(|&v| el(v)).collect(),
            var: var.iter().map(|&v| el(v)).collect(),
            count: n,
        };
        let y = Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            BatchNormOp { axis, mean, inv_std },
        );
        Ok((y, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self.shape().last().ok_or_else(|| invalid("layer_norm", "rank 0 input"))?;
        check_channel_param("layer_norm", gamma, d)?;
        check_channel_param("layer_norm", beta, d)?;
        let rows = self.numel() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); self.numel()];
        for (r, row) in self.data().chunks(d).enumerate() {
            let m = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let v = row.iter().map(|x| (x.as_f64() - m).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (v + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = el((row[j].as_f64() - m) * is * gamma.data()[j].as_f64() + beta.data()[j].as_f64());
            }
            mean.push(m);
            inv_std.push(is);
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            LayerNormOp { mean, inv_std },
        ))
    }

    /// Parametric ReLU with one slope per channel along `axis` (or a single
    /// shared slope when `alpha` has one element).
    pub fn prelu(&self, alpha: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(invalid("prelu", format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, c, inner) = split_at_axis(self.shape(), axis);
        if alpha.numel() != 1 {
            check_channel_param("prelu", alpha, c)?;
        }
        let shared = alpha.numel() == 1;
        let mut out = vec![T::zero(); self.numel()];
        for o in 0..outer {
            for ci in 0..c {
                let a = alpha.data()[if shared { 0 } else { ci }];
                let base = (o * c + ci) * inner;
                for i in base..base + inner {
                    let v = self.data()[i];
                    out[i] = if v > T::zero() { v } else { a * v };
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), alpha.clone()],
            PreluOp { axis },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_normalizes_each_channel() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0], &[2, 2, 2]).unwrap();
        let (y, stats) = x.batch_norm_train(&Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1, 0.0).unwrap();
        assert_eq!(stats.mean, vec![2.5, 25.0]);
        assert_eq!(stats.count, 4);
        let ch0: Vec<f64> = vec![y.data()[0], y.data()[1], y.data()[4], y.data()[5]];
        let m: f64 = ch0.iter().sum::<f64>() / 4.0;
        let v: f64 = ch0.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, -4.0, 0.0, 4.0], &[2, 3]).unwrap();
        let y = x.layer_norm(&Tensor::ones(&[3]), &Tensor::zeros(&[3]), 0.0).unwrap();
        for row in y.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn prelu_negative_slope() {
        let x = Tensor::<f64>::from_vec(vec![-2.0, 3.0], &[1, 2]).unwrap();
        let a = Tensor::<f64>::from_vec(vec![0.25], &[1]).unwrap();
        assert_eq!(x.prelu(&a, 1).unwrap().data(), &[-0.5, 3.0]);
    }
}
