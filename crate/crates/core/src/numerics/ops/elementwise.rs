use crate::numerics::element::{el, Element};
use crate::numerics::tensor::{numel, strides, BackwardOp, Result, Tensor, TensorError};

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` laid against `out` with zeros on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast
/// output, innermost axis fastest.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&out[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    for _ in 0..outer {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp {
    kind: BinaryKind,
    out_shape: Vec<usize>,
}

impl<T: Element> BackwardOp<T> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let sa = broadcast_strides(a.shape(), &self.out_shape);
        let sb = broadcast_strides(b.shape(), &self.out_shape);
        let mut ga = a.requires_grad().then(|| vec![T::zero(); a.numel()]);
        let mut gb = b.requires_grad().then(|| vec![T::zero(); b.numel()]);
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&self.out_shape, &sa, &sb, |o, ia, ib| {
            let go = g[o];
            match self.kind {
                BinaryKind::Add => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += go;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += go;
                    }
                }
                BinaryKind::Sub => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += go;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] -= go;
                    }
                }
                BinaryKind::Mul => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += go * bd[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += go * ad[ia];
                    }
                }
                BinaryKind::Div => {
                    let inv = T::one() / bd[ib];
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += go * inv;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] -= go * ad[ia] * inv * inv;
                    }
                }
            }
        });
        vec![ga, gb]
    }
}

fn binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
    let name = <BinaryOp as BackwardOp<T>>::name(&BinaryOp {
        kind,
        out_shape: vec![],
    });
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let f = |x: T, y: T| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    };
    let data: Vec<T> = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
        out
    };
    Ok(Tensor::from_op(
        data,
        out_shape.clone(),
        vec![a.clone(), b.clone()],
        BinaryOp { kind, out_shape },
    ))
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    Swish,
    Square,
    Sqrt,
    Scale(f64),
    Shift,
}

struct UnaryOp {
    kind: UnaryKind,
}

impl<T: Element> BackwardOp<T> for UnaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Relu => "relu",
            UnaryKind::Abs => "abs",
            UnaryKind::Swish => "swish",
            UnaryKind::Square => "square",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Scale(_) => "mul_scalar",
            UnaryKind::Shift => "add_scalar",
        }
    }

    fn backward(&self, inputs: &[Tensor<T>], y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let one = T::one();
        let two = el::<T>(2.0);
        let grad: Vec<T> = match self.kind {
            UnaryKind::Exp => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
            UnaryKind::Log => g.iter().zip(x).map(|(&g, &x)| g / x).collect(),
            UnaryKind::Sigmoid => g.iter().zip(y).map(|(&g, &y)| g * y * (one - y)).collect(),
            UnaryKind::Tanh => g.iter().zip(y).map(|(&g, &y)| g * (one - y * y)).collect(),
            UnaryKind::Relu => g
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect(),
            UnaryKind::Abs => g
                .iter()
                .zip(x)
                .map(|(&g, &x)| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .collect(),
            UnaryKind::Swish => g
                .iter()
                .zip(x)
                .map(|(&g, &x)| {
                    let s = sigmoid(x);
                    g * (s + x * s * (one - s))
                })
                .collect(),
            UnaryKind::Square => g.iter().zip(x).map(|(&g, &x)| g * two * x).collect(),
            UnaryKind::Sqrt => g.iter().zip(y).map(|(&g, &y)| g / (two * y)).collect(),
            UnaryKind::Scale(s) => {
                let s = el::<T>(s);
                g.iter().map(|&g| g * s).collect()
            }
            UnaryKind::Shift => g.to_vec(),
        };
        vec![Some(grad)]
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn unary<T: Element>(x: &Tensor<T>, kind: UnaryKind, shift: T) -> Tensor<T> {
    let data: Vec<T> = match kind {
        UnaryKind::Exp => x.data().iter().map(|v| v.exp()).collect(),
        UnaryKind::Log => x.data().iter().map(|v| v.ln()).collect(),
        UnaryKind::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
        UnaryKind::Tanh => x.data().iter().map(|v| v.tanh()).collect(),
        UnaryKind::Relu => x.data().iter().map(|&v| v.max(T::zero())).collect(),
        UnaryKind::Abs => x.data().iter().map(|v| v.abs()).collect(),
        UnaryKind::Swish => x.data().iter().map(|&v| v * sigmoid(v)).collect(),
        UnaryKind::Square => x.data().iter().map(|&v| v * v).collect(),
        UnaryKind::Sqrt => x.data().iter().map(|v| v.sqrt()).collect(),
        UnaryKind::Scale(s) => {
            let s = el::<T>(s);
            x.data().iter().map(|&v| v * s).collect()
        }
        UnaryKind::Shift => x.data().iter().map(|&v| v + shift).collect(),
    };
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], UnaryOp { kind })
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinaryKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinaryKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinaryKind::Mul)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, rhs, BinaryKind::Div)
    }

    pub fn exp(&self) -> Tensor<T> {
        unary(self, UnaryKind::Exp, T::zero())
    }

    pub fn log(&self) -> Tensor<T> {
        unary(self, UnaryKind::Log, T::zero())
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(self, UnaryKind::Sigmoid, T::zero())
    }

    pub fn tanh(&self) -> Tensor<T> {
        unary(self, UnaryKind::Tanh, T::zero())
    }

    pub fn relu(&self) -> Tensor<T> {
        unary(self, UnaryKind::Relu, T::zero())
    }

    pub fn abs(&self) -> Tensor<T> {
        unary(self, UnaryKind::Abs, T::zero())
    }

    /// `x * sigmoid(x)`
    pub fn swish(&self) -> Tensor<T> {
        unary(self, UnaryKind::Swish, T::zero())
    }

    pub fn square(&self) -> Tensor<T> {
        unary(self, UnaryKind::Square, T::zero())
    }

    pub fn sqrt(&self) -> Tensor<T> {
        unary(self, UnaryKind::Sqrt, T::zero())
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<T> {
        unary(self, UnaryKind::Scale(s), T::zero())
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        unary(self, UnaryKind::Shift, el(s))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-1.0)
    }

    /// Gated linear unit along `axis`: first half times sigmoid of second.
    pub fn glu(&self, axis: usize) -> Result<Tensor<T>> {
        let n = self.dim(axis);
        if n % 2 != 0 {
            return Err(crate::numerics::tensor::invalid(
                "glu",
                format!("axis {axis} of {:?} is not even", self.shape()),
            ));
        }
        let a = self.narrow(axis, 0, n / 2)?;
        let b = self.narrow(axis, n / 2, n / 2)?;
        a.mul(&b.sigmoid())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::<f64>::parameter(vec![0.0], &[1]).unwrap();
        let y = x.sigmoid();
        assert_eq!(y.item(), 0.5);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let a = Tensor::<f64>::parameter(vec![1.5, -2.0, 3.0, 0.25], &[2, 2]).unwrap();
        let y = a.mul(&a.ones_like()).unwrap();
        assert_eq!(y.data(), a.data());
        y.sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn broadcast_bias_add_reduces_grad() {
        let x = Tensor::<f64>::parameter((0..6).map(|v| v as f64).collect(), &[2, 3]).unwrap();
        let b = Tensor::<f64>::parameter(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        y.sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn incompatible_broadcast_names_op_and_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4]);
        match a.mul(&b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "mul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
