use crate::numerics::element::Element;
use crate::numerics::tensor::{invalid, numel, strides, BackwardOp, Result, Tensor, TensorError};

struct ReshapeOp;

impl<T: Element> BackwardOp<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

struct PermuteOp {
    dims: Vec<usize>,
}

impl<T: Element> BackwardOp<T> for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let in_shape = inputs[0].shape();
        let out_shape: Vec<usize> = self.dims.iter().map(|&d| in_shape[d]).collect();
        let mut inverse = vec![0; self.dims.len()];
        for (i, &d) in self.dims.iter().enumerate() {
            inverse[d] = i;
        }
        vec![Some(permute_data(g, &out_shape, &inverse))]
    }
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], dims: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let src_strides: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        return data.to_vec();
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer = total / inner.max(1);
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..outer {
        let base: usize = (0..rank - 1).map(|d| idx[d] * src_strides[d]).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

struct NarrowOp {
    axis: usize,
    start: usize,
}

impl<T: Element> BackwardOp<T> for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let shape = inputs[0].shape();
        let outer = numel(&shape[..self.axis]);
        let inner = numel(&shape[self.axis + 1..]);
        let full = shape[self.axis];
        let len = g.len() / (outer * inner);
        let mut gx = vec![T::zero(); inputs[0].numel()];
        for o in 0..outer {
            let dst = (o * full + self.start) * inner;
            let src = o * len * inner;
            gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
        }
        vec![Some(gx)]
    }
}

struct ConcatOp {
    axis: usize,
}

impl<T: Element> BackwardOp<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let shape0 = inputs[0].shape();
        let outer = numel(&shape0[..self.axis]);
        let inner = numel(&shape0[self.axis + 1..]);
        let total: usize = inputs.iter().map(|t| t.dim(self.axis)).sum();
        let mut offset = 0;
        inputs
            .iter()
            .map(|t| {
                let len = t.dim(self.axis);
                let res = t.requires_grad().then(|| {
                    let mut gx = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[src..src + len * inner]);
                    }
                    gx
                });
                offset += len;
                res
            })
            .collect()
    }
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            ReshapeOp,
        ))
    }

    /// Reorders axes so that output axis `i` is input axis `dims[i]`.
    pub fn permute(&self, dims: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if dims.len() != rank || dims.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(invalid("permute", format!("{dims:?} is not a permutation of rank {rank}")));
        }
        let out_shape: Vec<usize> = dims.iter().map(|&d| self.dim(d)).collect();
        let data = permute_data(self.data(), self.shape(), dims);
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            PermuteOp {
                dims: dims.to_vec(),
            },
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let mut dims: Vec<usize> = (0..self.rank()).collect();
        if a >= dims.len() || b >= dims.len() {
            return Err(invalid("transpose", format!("axes ({a},{b}) out of range for {:?}", self.shape())));
        }
        dims.swap(a, b);
        self.permute(&dims)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || len == 0 || start + len > self.dim(axis) {
            return Err(invalid(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let shape = self.shape();
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[src..src + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            NarrowOp { axis, start },
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(invalid("concat", format!("axis {axis} out of range for {:?}", first.shape())));
        }
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let total: usize = parts.iter().map(|t| t.dim(axis)).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.dim(axis) * inner;
                data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(data, shape, parts.to_vec(), ConcatOp { axis }))
    }

    /// Stacks equal-shaped tensors along a new axis.
    pub fn stack(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| invalid("stack", "no inputs"))?;
        let mut expanded = first.shape().to_vec();
        if axis > expanded.len() {
            return Err(invalid("stack", format!("axis {axis} out of range")));
        }
        expanded.insert(axis, 1);
        let reshaped = parts
            .iter()
            .map(|p| {
                if p.shape() != first.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "stack",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
                p.reshape(&expanded)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&reshaped, axis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f32>::from_vec((0..24).map(|v| v as f32).collect(), &[2, 3, 4]).unwrap();
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[i,j,k] = x[j,k,i]
        assert_eq!(y.data()[1 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 1]);
        let back = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn narrow_and_concat_invert() {
        let x = Tensor::<f32>::from_vec((0..12).map(|v| v as f32).collect(), &[2, 6]).unwrap();
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 4).unwrap();
        let y = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn reshape_rejects_wrong_size() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        assert!(x.reshape(&[4]).is_err());
    }
}
