use crate::numerics::element::{gemm_slices, Element};
use crate::numerics::tensor::{BackwardOp, Result, Tensor, TensorError};

/// `[..., m, k] x [k, n]`, leading axes flattened into rows.
struct MatmulOp {
    rows: usize,
    k: usize,
    n: usize,
}

impl<T: Element> BackwardOp<T> for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let ga = a.requires_grad().then(|| {
            let mut ga = vec![T::zero(); a.numel()];
            gemm_slices(self.rows, self.n, self.k, g, false, b.data(), true, &mut ga, false);
            ga
        });
        let gb = b.requires_grad().then(|| {
            let mut gb = vec![T::zero(); b.numel()];
            gemm_slices(self.k, self.rows, self.n, a.data(), true, g, false, &mut gb, false);
            gb
        });
        vec![ga, gb]
    }
}

/// Batched `[B, m, k] x [B, k, n]` (or `[B, n, k]` read transposed).
struct BatchedMatmulOp {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
}

impl<T: Element> BackwardOp<T> for BatchedMatmulOp {
    fn name(&self) -> &'static str {
        "bmm"
    }

    fn backward(&self, inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let ga = a.requires_grad().then(|| {
            let mut ga = vec![T::zero(); a.numel()];
            for i in 0..self.batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                // trans_b: b stored [n,k], so gA = g · b ; else gA = g · bᵀ
                gemm_slices(m, n, k, gi, false, bi, !self.trans_b, &mut ga[i * m * k..(i + 1) * m * k], false);
            }
            ga
        });
        let gb = b.requires_grad().then(|| {
            let mut gb = vec![T::zero(); b.numel()];
            for i in 0..self.batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let out = &mut gb[i * k * n..(i + 1) * k * n];
                if self.trans_b {
                    gemm_slices(n, m, k, gi, true, ai, false, out, false);
                } else {
                    gemm_slices(k, m, n, ai, true, gi, false, out, false);
                }
            }
            gb
        });
        vec![ga, gb]
    }
}

impl<T: Element> Tensor<T> {
    /// Multiplies the last axis of `self` with a 2-D `[k, n]` matrix.
    pub fn matmul(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: w.shape().to_vec(),
        };
        if w.rank() != 2 || self.rank() < 1 {
            return Err(mismatch());
        }
        let k = *self.shape().last().unwrap();
        if w.dim(0) != k {
            return Err(mismatch());
        }
        let n = w.dim(1);
        let rows = self.numel() / k;
        let mut out = vec![T::zero(); rows * n];
        gemm_slices(rows, k, n, self.data(), false, w.data(), false, &mut out, false);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), w.clone()],
            MatmulOp { rows, k, n },
        ))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&self, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: self.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if self.rank() != 3 || b.rank() != 3 || self.dim(0) != b.dim(0) {
            return Err(mismatch());
        }
        let (batch, m, k) = (self.dim(0), self.dim(1), self.dim(2));
        let (bk, n) = if trans_b { (b.dim(2), b.dim(1)) } else { (b.dim(1), b.dim(2)) };
        if bk != k {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm_slices(
                m,
                k,
                n,
                &self.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, m, n],
            vec![self.clone(), b.clone()],
            BatchedMatmulOp {
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn bmm_transposed_matches_explicit() {
        let a = Tensor::<f64>::from_vec((0..12).map(|v| v as f64 * 0.5).collect(), &[2, 2, 3]).unwrap();
        let b = Tensor::<f64>::from_vec((0..24).map(|v| (v as f64).sin()).collect(), &[2, 4, 3]).unwrap();
        let direct = a.bmm(&b, true).unwrap();
        let explicit = a.bmm(&b.transpose(1, 2).unwrap(), false).unwrap();
        for (x, y) in direct.data().iter().zip(explicit.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
